"""Continuous motion encoding (6D rotations, sin-cos pairs) and normalization.

Native frames hold Euler angles per joint. The continuous encoding maps every
3-DoF joint to the first two columns of its rotation matrix and every 1-DoF
joint to ``(cos, sin)``. Jaw joints are dropped. Root channels pass through.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, DimensionError, EmptyDataset
from .schema import ROOT_CHANNELS, SkeletonSchema

EPS_STD = 1e-8
EPS_GS = 1e-8
GIMBAL_EPS = 1e-7
IDENTITY_DIM = 68

_AXIS = {"X": 0, "Y": 1, "Z": 2}


@dataclass
class MotionSequence:
    schema_id: str
    fps: float
    frames: np.ndarray
    identity: np.ndarray = field(default_factory=lambda: np.zeros(IDENTITY_DIM))
    diagnostics: "DecodeDiagnostics | None" = None

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass
class ContinuousMotion:
    schema_id: str
    fps: float
    frames: np.ndarray
    normalized: bool = False
    identity: np.ndarray = field(default_factory=lambda: np.zeros(IDENTITY_DIM))


@dataclass
class DecodeDiagnostics:
    """Fallback counts from decoding off-manifold input."""

    per_frame: np.ndarray

    @property
    def total(self) -> int:
        return int(self.per_frame.sum())

    @property
    def projection_applied(self) -> bool:
        return self.total > 0


@dataclass
class NormStats:
    sigma_rot: float
    trans_mean: np.ndarray
    trans_std: np.ndarray
    frame_count: int

    def to_dict(self) -> dict:
        return {
            "mode": "hybrid",
            "sigma_rot": float(self.sigma_rot),
            "trans_mean": self.trans_mean.tolist(),
            "trans_std": self.trans_std.tolist(),
            "frame_count": int(self.frame_count),
        }


@dataclass
class ZScoreStats:
    """Per-dimension z-score over raw native frames (representation ablation)."""

    mean: np.ndarray
    std: np.ndarray
    frame_count: int

    def to_dict(self) -> dict:
        return {
            "mode": "zscore136",
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "frame_count": int(self.frame_count),
        }


def stats_from_dict(d: dict) -> NormStats | ZScoreStats:
    if d.get("mode", "hybrid") == "zscore136":
        return ZScoreStats(np.asarray(d["mean"], float), np.asarray(d["std"], float), d["frame_count"])
    return NormStats(
        float(d["sigma_rot"]),
        np.asarray(d["trans_mean"], float),
        np.asarray(d["trans_std"], float),
        d["frame_count"],
    )


# ---------------------------------------------------------------- rotations


def _axis_rotation(axis: int, angle: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    R = np.zeros(np.shape(angle) + (3, 3))
    i, j = (axis + 1) % 3, (axis + 2) % 3
    R[..., axis, axis] = 1.0
    R[..., i, i] = c
    R[..., j, j] = c
    R[..., j, i] = s
    R[..., i, j] = -s
    return R


def euler_to_matrix(angles, order: str = "XYZ") -> np.ndarray:
    """Intrinsic Euler angles to rotation matrices; ``angles[..., k]`` turns about ``order[k]``."""
    angles = np.asarray(angles, dtype=np.float64)
    R = _axis_rotation(_AXIS[order[0]], angles[..., 0])
    R = R @ _axis_rotation(_AXIS[order[1]], angles[..., 1])
    return R @ _axis_rotation(_AXIS[order[2]], angles[..., 2])


def _wrap(theta: np.ndarray) -> np.ndarray:
    # atan2 can return -pi; the canonical branch is (-pi, pi].
    return np.where(theta <= -np.pi, theta + 2 * np.pi, theta)


def matrix_to_euler(R, order: str = "XYZ") -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    i, j, k = (_AXIS[a] for a in order)
    e = 1.0 if (j - i) % 3 == 1 else -1.0
    sb = np.clip(e * R[..., i, k], -1.0, 1.0)
    cb = np.hypot(R[..., i, i], R[..., i, j])
    b = np.arctan2(sb, cb)
    a = np.arctan2(-e * R[..., j, k], R[..., k, k])
    c = np.arctan2(-e * R[..., i, j], R[..., i, i])
    lock = cb < GIMBAL_EPS
    if np.any(lock):
        a = np.where(lock, np.arctan2(e * R[..., k, j], R[..., j, j]), a)
        c = np.where(lock, 0.0, c)
    return _wrap(np.stack([a, b, c], axis=-1))


def axis_angle_matrix(axis, theta) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    return sincos_axis_matrix(axis, np.cos(theta), np.sin(theta))


def sincos_axis_matrix(axis, c, s) -> np.ndarray:
    """Rodrigues rotation about a unit axis given the angle's cosine and sine."""
    K = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    c = np.asarray(c, dtype=np.float64)[..., None, None]
    s = np.asarray(s, dtype=np.float64)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def matrix_to_6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def _gram_schmidt(v: np.ndarray):
    a1, a2 = v[..., :3], v[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1)
    ok1 = n1 >= EPS_GS
    b1 = a1 / np.where(ok1, n1, 1.0)[..., None]
    r = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(r, axis=-1)
    ok = ok1 & (n2 >= EPS_GS)
    b2 = r / np.where(n2 >= EPS_GS, n2, 1.0)[..., None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1), ok


def sixd_to_matrix(v) -> np.ndarray:
    """Gram-Schmidt a 6-vector (or a batch of them) back to a rotation matrix."""
    v = np.asarray(v, dtype=np.float64)
    R, ok = _gram_schmidt(v)
    if not np.all(ok):
        raise DegenerateInput("6D input has a vanishing column after Gram-Schmidt")
    return R


def sixd_to_matrix_safe(v) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`sixd_to_matrix` but degenerate entries fall back to identity.

    Returns ``(R, degenerate_mask)``.
    """
    v = np.asarray(v, dtype=np.float64)
    R, ok = _gram_schmidt(v)
    R = np.where(ok[..., None, None], R, np.eye(3))
    return R, ~ok


def angle_to_sincos(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return np.cos(theta), np.sin(theta)


def sincos_to_angle(c, s):
    """Returns ``(theta, degenerate)``; degenerate pairs decode to 0."""
    c = np.asarray(c, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    degenerate = np.hypot(c, s) < EPS_GS
    theta = np.where(degenerate, 0.0, _wrap(np.arctan2(s, c)))
    if theta.ndim == 0:
        return float(theta), bool(degenerate)
    return theta, degenerate


# ---------------------------------------------------------------- sequences


def _check_native(m: MotionSequence, schema: SkeletonSchema) -> np.ndarray:
    f = np.asarray(m.frames, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != schema.native_pose_dim:
        raise DimensionError(
            f"expected T x {schema.native_pose_dim} native frames, got {f.shape}"
        )
    if f.shape[0] < 1:
        raise DimensionError("sequence has no frames")
    return f


def encode_frames(native: np.ndarray, schema: SkeletonSchema) -> np.ndarray:
    """Native ``(..., native_pose_dim)`` array to continuous ``(..., continuous_dim)``."""
    native = np.asarray(native, dtype=np.float64)
    out = np.empty(native.shape[:-1] + (schema.continuous_dim,))
    out[..., :ROOT_CHANNELS] = native[..., :ROOT_CHANNELS]
    ns, cs = schema.native_slices, schema.continuous_slices
    for j in schema.canonical_joints:
        if j.group == "jaw":
            continue
        src = native[..., ns[j.name]]
        if j.dof == 3:
            out[..., cs[j.name]] = matrix_to_6d(euler_to_matrix(src, j.rotation_order))
        else:
            c, s = angle_to_sincos(src[..., 0])
            out[..., cs[j.name]] = np.stack([c, s], axis=-1)
    return out


def decode_frames(cont: np.ndarray, schema: SkeletonSchema) -> tuple[np.ndarray, np.ndarray]:
    """Continuous to native frames; returns ``(native, fallback_count_per_row)``."""
    cont = np.asarray(cont, dtype=np.float64)
    if cont.shape[-1] != schema.continuous_dim:
        raise DimensionError(f"expected continuous dim {schema.continuous_dim}, got {cont.shape[-1]}")
    out = np.zeros(cont.shape[:-1] + (schema.native_pose_dim,))
    fallbacks = np.zeros(cont.shape[:-1], dtype=np.int64)
    out[..., :ROOT_CHANNELS] = cont[..., :ROOT_CHANNELS]
    ns, cs = schema.native_slices, schema.continuous_slices
    for j in schema.canonical_joints:
        if j.group == "jaw":
            continue
        src = cont[..., cs[j.name]]
        if j.dof == 3:
            R, bad = sixd_to_matrix_safe(src)
            out[..., ns[j.name]] = matrix_to_euler(R, j.rotation_order)
        else:
            theta, bad = sincos_to_angle(src[..., 0], src[..., 1])
            out[..., ns[j.name]] = np.asarray(theta)[..., None]
        fallbacks += np.asarray(bad, dtype=np.int64)
    return out, fallbacks


def encode_sequence(m: MotionSequence, schema: SkeletonSchema) -> ContinuousMotion:
    f = _check_native(m, schema)
    return ContinuousMotion(
        schema_id=m.schema_id, fps=m.fps, frames=encode_frames(f, schema),
        normalized=False, identity=np.asarray(m.identity, dtype=np.float64),
    )


def decode_sequence(c: ContinuousMotion, schema: SkeletonSchema) -> MotionSequence:
    if c.normalized:
        raise ValueError("decode_sequence expects unnormalized input; denormalize first")
    f = np.asarray(c.frames, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != schema.continuous_dim:
        raise DimensionError(f"expected T x {schema.continuous_dim} continuous frames, got {f.shape}")
    native, fb = decode_frames(f, schema)
    return MotionSequence(
        schema_id=c.schema_id, fps=c.fps, frames=native,
        identity=np.asarray(c.identity, dtype=np.float64), diagnostics=DecodeDiagnostics(fb),
    )


# ---------------------------------------------------------------- normalization


def _stack_frames(dataset, attr: str = "frames") -> np.ndarray:
    frames = [np.asarray(getattr(d, attr), dtype=np.float64) for d in dataset]
    if not frames:
        raise EmptyDataset("dataset is empty")
    allf = np.concatenate(frames, axis=0)
    if allf.shape[0] < 2:
        raise EmptyDataset(f"need at least 2 frames, got {allf.shape[0]}")
    return allf


def fit_norm_stats(dataset) -> NormStats:
    """Pooled rotation std (mean taken as 0) plus per-dim root statistics."""
    allf = _stack_frames(dataset)
    rot = allf[:, ROOT_CHANNELS:]
    sigma = float(np.sqrt(np.mean(rot * rot)))
    trans = allf[:, :ROOT_CHANNELS]
    return NormStats(
        sigma_rot=max(sigma, EPS_STD),
        trans_mean=trans.mean(axis=0),
        trans_std=np.maximum(trans.std(axis=0), EPS_STD),
        frame_count=allf.shape[0],
    )


def fit_zscore_stats(dataset) -> ZScoreStats:
    allf = _stack_frames(dataset)
    return ZScoreStats(
        mean=allf.mean(axis=0), std=np.maximum(allf.std(axis=0), EPS_STD), frame_count=allf.shape[0]
    )


def normalize_frames(x: np.ndarray, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = x / stats.sigma_rot
    out[..., :ROOT_CHANNELS] = (x[..., :ROOT_CHANNELS] - stats.trans_mean) / stats.trans_std
    return out


def denormalize_frames(x: np.ndarray, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = x * stats.sigma_rot
    out[..., :ROOT_CHANNELS] = x[..., :ROOT_CHANNELS] * stats.trans_std + stats.trans_mean
    return out


def normalize(c: ContinuousMotion, stats: NormStats) -> ContinuousMotion:
    if c.normalized:
        raise ValueError("motion is already normalized")
    if c.frames.shape[-1] <= ROOT_CHANNELS:
        raise DimensionError("continuous frames have no rotation dims")
    return ContinuousMotion(c.schema_id, c.fps, normalize_frames(c.frames, stats), True, c.identity)


def denormalize(c: ContinuousMotion, stats: NormStats) -> ContinuousMotion:
    if not c.normalized:
        raise ValueError("motion is not normalized")
    if c.frames.shape[-1] <= ROOT_CHANNELS:
        raise DimensionError("continuous frames have no rotation dims")
    return ContinuousMotion(c.schema_id, c.fps, denormalize_frames(c.frames, stats), False, c.identity)


class MotionCodec:
    """Maps native motions to the flow-matching target space and back.

    ``mode="hybrid"`` is the manifold encoding with hybrid normalization;
    ``mode="zscore136"`` z-scores raw native dims with no manifold transform.
    """

    MODES = ("hybrid", "zscore136")

    def __init__(self, schema: SkeletonSchema, mode: str = "hybrid", stats=None):
        if mode not in self.MODES:
            raise ValueError(f"unknown representation mode {mode!r}")
        self.schema = schema
        self.mode = mode
        self.stats = stats

    @property
    def dim(self) -> int:
        return self.schema.continuous_dim if self.mode == "hybrid" else self.schema.native_pose_dim

    @property
    def space(self) -> str:
        return "continuous" if self.mode == "hybrid" else "native"

    def fit(self, motions) -> "MotionCodec":
        motions = list(motions)
        if self.mode == "hybrid":
            self.stats = fit_norm_stats([encode_sequence(m, self.schema) for m in motions])
        else:
            for m in motions:
                _check_native(m, self.schema)
            self.stats = fit_zscore_stats(motions)
        return self

    def to_target(self, native: np.ndarray) -> np.ndarray:
        if self.mode == "hybrid":
            return normalize_frames(encode_frames(native, self.schema), self.stats)
        return (np.asarray(native, dtype=np.float64) - self.stats.mean) / self.stats.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        """Target space to unnormalized (continuous or native) space."""
        if self.mode == "hybrid":
            return denormalize_frames(x, self.stats)
        return np.asarray(x, dtype=np.float64) * self.stats.std + self.stats.mean

    def from_target(self, x: np.ndarray, fps: float, identity=None) -> MotionSequence:
        identity = np.zeros(IDENTITY_DIM) if identity is None else np.asarray(identity, dtype=np.float64)
        if self.mode == "hybrid":
            c = ContinuousMotion(self.schema.name, fps, np.asarray(x, dtype=np.float64), True, identity)
            return decode_sequence(denormalize(c, self.stats), self.schema)
        native = self.denormalize(x)
        for j in self.schema.joints:
            if j.group == "jaw":
                native[:, self.schema.native_slices[j.name]] = 0.0
        rot = native[:, ROOT_CHANNELS:]
        native[:, ROOT_CHANNELS:] = np.mod(rot + np.pi, 2 * np.pi) - np.pi
        native[:, ROOT_CHANNELS:] = np.where(native[:, ROOT_CHANNELS:] <= -np.pi, np.pi, native[:, ROOT_CHANNELS:])
        return MotionSequence(
            self.schema.name, fps, native, identity, DecodeDiagnostics(np.zeros(len(native), dtype=np.int64))
        )
