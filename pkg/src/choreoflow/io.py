"""Binary motion files and training checkpoints.

Motion file (``.dfm``), all little-endian::

    magic        4 bytes   b"DFM1"
    version      u32       1
    T            u32       frame count
    D            u32       native pose dim of the schema
    fps          f32
    identity_dim u32
    schema_hash  32 bytes  sha256 of the canonical schema text
    identity     f32[identity_dim]
    frames       f32[T * D], row-major

Checkpoint file (``.ckpt``)::

    magic        4 bytes   b"DFCK"
    version      u32       1
    header_len   u32
    header       UTF-8 JSON (sorted keys): config, codec, step, tensor table
    payload      f32 little-endian tensors at the offsets listed in the table

Tensor table entries are ``{"name", "section", "shape", "offset", "count"}``
with ``section`` one of ``param``, ``buffer``, ``ema``, ``opt.exp_avg``, ``opt.exp_avg_sq``.
"""
from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np
import torch

from .errors import ChoreoflowError, DimensionError, MagicMismatch, SchemaHashMismatch, TruncatedFile, VersionUnsupported
from .representation import MotionSequence
from .schema import SkeletonSchema

MOTION_MAGIC = b"DFM1"
MOTION_VERSION = 1
_HEADER = struct.Struct("<4sIIIfI32s")

CKPT_MAGIC = b"DFCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


def motion_bytes(m: MotionSequence, schema_hash: bytes = b"\0" * 32) -> bytes:
    frames = np.asarray(m.frames, dtype="<f4")
    identity = np.asarray(m.identity, dtype="<f4").reshape(-1)
    if frames.ndim != 2:
        raise DimensionError("frames must be a T x D matrix")
    if len(schema_hash) != 32:
        raise ValueError("schema hash must be 32 bytes")
    T, D = frames.shape
    head = _HEADER.pack(MOTION_MAGIC, MOTION_VERSION, T, D, float(m.fps), identity.size, schema_hash)
    return head + identity.tobytes() + np.ascontiguousarray(frames).tobytes()


def write_motion(m: MotionSequence, path, schema: SkeletonSchema | None = None) -> None:
    h = schema.hash if schema is not None else b"\0" * 32
    Path(path).write_bytes(motion_bytes(m, h))


def parse_motion(data: bytes, schema: SkeletonSchema | None = None, strict: bool = False) -> MotionSequence:
    if len(data) < 4 or data[:4] != MOTION_MAGIC:
        raise MagicMismatch(f"bad magic {data[:4]!r}, expected {MOTION_MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFile(
            f"header truncated at byte {len(data)}: expected {_HEADER.size} bytes",
            expected=_HEADER.size, actual=len(data),
        )
    magic, version, T, D, fps, idim, shash = _HEADER.unpack_from(data)
    if version != MOTION_VERSION:
        raise VersionUnsupported(f"motion file version {version} is not supported")
    expected = _HEADER.size + 4 * (idim + T * D)
    if len(data) < expected:
        raise TruncatedFile(
            f"file truncated at byte offset {len(data)}: expected {expected} bytes, got {len(data)}",
            expected=expected, actual=len(data),
        )
    if len(data) > expected:
        raise ChoreoflowError(f"{len(data) - expected} trailing bytes after payload")
    if schema is not None:
        if D != schema.native_pose_dim:
            raise DimensionError(f"file has D={D}, schema {schema.name!r} needs {schema.native_pose_dim}")
        if shash != schema.hash:
            msg = f"schema hash in file does not match schema {schema.name!r}"
            if strict:
                raise SchemaHashMismatch(msg)
            warnings.warn(msg, stacklevel=3)
    off = _HEADER.size
    identity = np.frombuffer(data, dtype="<f4", count=idim, offset=off)
    frames = np.frombuffer(data, dtype="<f4", count=T * D, offset=off + 4 * idim).reshape(T, D)
    return MotionSequence(
        schema_id=schema.name if schema is not None else shash.hex()[:16],
        fps=float(fps),
        frames=frames.astype(np.float64),
        identity=identity.astype(np.float64),
    )


def read_motion(path, schema: SkeletonSchema | None = None, strict: bool = False) -> MotionSequence:
    return parse_motion(Path(path).read_bytes(), schema, strict)


def read_motion_header(path) -> dict:
    data = Path(path).read_bytes()[: _HEADER.size]
    if data[:4] != MOTION_MAGIC:
        raise MagicMismatch(f"bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFile("header truncated", expected=_HEADER.size, actual=len(data))
    magic, version, T, D, fps, idim, shash = _HEADER.unpack(data)
    return {"version": version, "T": T, "D": D, "fps": fps, "identity_dim": idim, "schema_hash": shash.hex()}


# ---------------------------------------------------------------- checkpoints


def _tensor_entries(state) -> list[tuple[str, str, torch.Tensor]]:
    out = []
    params = dict(state.model.named_parameters())
    for name, p in params.items():
        out.append((name, "param", p.detach()))
    for name, b in state.model.named_buffers():
        out.append((name, "buffer", b))
    for name in params:
        out.append((name, "ema", state.ema.shadow[name]))
    name_of = {id(p): n for n, p in params.items()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in st:
                    out.append((name_of[id(p)], f"opt.{key}", st[key]))
    return out


def _opt_steps(state) -> dict[str, float]:
    params = dict(state.model.named_parameters())
    name_of = {id(p): n for n, p in params.items()}
    steps = {}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p, {})
            if "step" in st:
                steps[name_of[id(p)]] = float(st["step"])
    return steps


def checkpoint_bytes(state) -> bytes:
    entries = _tensor_entries(state)
    table, blobs, offset = [], [], 0
    for name, section, t in entries:
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        table.append({"name": name, "section": section, "shape": list(arr.shape), "offset": offset, "count": arr.size})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    codec = state.codec
    header = {
        "format": "choreoflow-checkpoint",
        "step": state.step,
        "train_config": state.config.to_dict(),
        "model_config": state.model.cfg.to_dict(),
        "codec": {
            "mode": codec.mode,
            "schema": codec.schema.name,
            "schema_hash": codec.schema.hash.hex(),
            "stats": codec.stats.to_dict(),
        },
        "optimizer": {"param_groups": [
            {k: v for k, v in g.items() if k not in ("params", "base_lr")} for g in state.optimizer.param_groups
        ], "steps": _opt_steps(state)},
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True, default=_json_default).encode()
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + b"".join(blobs)


def _json_default(o):
    if isinstance(o, tuple):
        return list(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def save_checkpoint(state, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def read_checkpoint_raw(path) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise MagicMismatch(f"bad checkpoint magic {data[:4]!r}")
    if len(data) < _CKPT_HEAD.size:
        raise TruncatedFile("checkpoint header truncated", expected=_CKPT_HEAD.size, actual=len(data))
    _, version, hlen = _CKPT_HEAD.unpack_from(data)
    if version != CKPT_VERSION:
        raise VersionUnsupported(f"checkpoint version {version} is not supported")
    start = _CKPT_HEAD.size + hlen
    if len(data) < start:
        raise TruncatedFile("checkpoint header truncated", expected=start, actual=len(data))
    header = json.loads(data[_CKPT_HEAD.size:start])
    tensors = {}
    for e in header["tensors"]:
        end = start + e["offset"] + 4 * e["count"]
        if end > len(data):
            raise TruncatedFile(f"tensor {e['name']} runs past end of file", expected=end, actual=len(data))
        arr = np.frombuffer(data, dtype="<f4", count=e["count"], offset=start + e["offset"])
        tensors[(e["section"], e["name"])] = arr.reshape(e["shape"])
    return header, tensors


def load_checkpoint(path, schema: SkeletonSchema | None = None):
    """Rebuild a :class:`~choreoflow.flow.TrainState` from a checkpoint file."""
    from .flow import TrainConfig, TrainState
    from .model import EMA, ModelConfig, VelocityDiT, make_optimizer
    from .representation import MotionCodec, stats_from_dict
    from .schema import find_schema

    header, tensors = read_checkpoint_raw(path)
    tcfg = TrainConfig.from_dict(header["train_config"])
    mcfg = ModelConfig(**header["model_config"])
    dtype = getattr(torch, tcfg.dtype)
    schema = schema or find_schema(header["codec"]["schema"])
    if schema.hash.hex() != header["codec"]["schema_hash"]:
        raise SchemaHashMismatch(f"checkpoint was trained on a different {schema.name!r} schema")
    codec = MotionCodec(schema, header["codec"]["mode"], stats_from_dict(header["codec"]["stats"]))
    model = VelocityDiT(mcfg).to(dtype)
    ema = EMA(model, tcfg.ema_decay)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(tensors[("param", name)].copy()))
            ema.shadow[name].copy_(torch.from_numpy(tensors[("ema", name)].copy()))
        for name, b in model.named_buffers():
            b.copy_(torch.from_numpy(tensors[("buffer", name)].copy()))
    opt = make_optimizer(model, tcfg.lr, tcfg.weight_decay)
    steps = header["optimizer"]["steps"]
    for name, p in model.named_parameters():
        if name in steps:
            opt.state[p] = {
                "step": torch.tensor(steps[name]),
                "exp_avg": torch.from_numpy(tensors[("opt.exp_avg", name)].copy()).to(dtype),
                "exp_avg_sq": torch.from_numpy(tensors[("opt.exp_avg_sq", name)].copy()).to(dtype),
            }
    return TrainState(model, opt, ema, codec, tcfg, step=header["step"])

