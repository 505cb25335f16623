"""Differentiable forward kinematics and the kinematic loss.

Everything that needs gradients runs on torch tensors; the numpy entry points
(:func:`forward_kinematics`, :func:`detect_contacts`) wrap them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, ShapeError
from .representation import MotionSequence
from .schema import ROOT_CHANNELS, SkeletonSchema

UP_INDEX = {"x": 0, "y": 1, "z": 2}
GS_EPS = 1e-8


@dataclass
class JointPositions:
    positions: np.ndarray  # T x J x 3, meters
    schema_id: str


@dataclass
class ContactMask:
    mask: np.ndarray  # T x F bool


@dataclass(frozen=True)
class FkWeights:
    pos: float = 1.0
    linvel: float = 0.5
    contact: float = 1.0


# ---------------------------------------------------------------- torch rotations


def _axis_rot(axis: int, angle: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    one, zero = torch.ones_like(angle), torch.zeros_like(angle)
    if axis == 0:
        rows = [one, zero, zero, zero, c, -s, zero, s, c]
    elif axis == 1:
        rows = [c, zero, s, zero, one, zero, -s, zero, c]
    else:
        rows = [c, -s, zero, s, c, zero, zero, zero, one]
    return torch.stack(rows, dim=-1).reshape(angle.shape + (3, 3))


def euler_to_matrix_t(angles: torch.Tensor, order: str) -> torch.Tensor:
    ax = {"X": 0, "Y": 1, "Z": 2}
    R = _axis_rot(ax[order[0]], angles[..., 0])
    R = R @ _axis_rot(ax[order[1]], angles[..., 1])
    return R @ _axis_rot(ax[order[2]], angles[..., 2])


def sixd_to_matrix_t(v: torch.Tensor) -> torch.Tensor:
    a1, a2 = v[..., :3], v[..., 3:6]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp_min(GS_EPS)
    r = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    b2 = r / r.norm(dim=-1, keepdim=True).clamp_min(GS_EPS)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def _skew(axes: np.ndarray) -> np.ndarray:
    axes = np.asarray(axes, dtype=np.float64).reshape(-1, 3)
    K = np.zeros((len(axes), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -axes[:, 2], axes[:, 1]
    K[:, 1, 0], K[:, 1, 2] = axes[:, 2], -axes[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -axes[:, 1], axes[:, 0]
    return K


def sincos_matrix_t(axis, cs: torch.Tensor) -> torch.Tensor:
    """Rotation about ``axis`` by the angle of the (unnormalized) pair ``(cos, sin)``.

    ``axis`` is one unit 3-vector, or ``(n, 3)`` axes matching ``cs[..., n, 2]``.
    """
    n = cs.norm(dim=-1, keepdim=True).clamp_min(GS_EPS)
    c, s = (cs / n).unbind(-1)
    K = torch.as_tensor(_skew(axis), dtype=cs.dtype)
    if np.asarray(axis).ndim == 1:
        K = K[0]
    eye = torch.eye(3, dtype=cs.dtype)
    return eye + s[..., None, None] * K + (1.0 - c)[..., None, None] * (K @ K)


def axis_angle_matrix_t(axis, theta: torch.Tensor) -> torch.Tensor:
    return sincos_matrix_t(axis, torch.stack([torch.cos(theta), torch.sin(theta)], -1))


class _Gather:
    """Per-schema index tables so whole joint groups convert in one batched call."""

    _cache: dict = {}

    def __init__(self, schema: SkeletonSchema):
        joints = schema.canonical_joints
        self.three = [i for i, j in enumerate(joints) if j.dof == 3 and j.group != "jaw"]
        self.one = [i for i, j in enumerate(joints) if j.dof == 1 and j.group != "jaw"]
        self.jaw = [i for i, j in enumerate(joints) if j.group == "jaw"]
        cs, ns = schema.continuous_slices, schema.native_slices
        self.c6 = torch.tensor([list(range(cs[joints[i].name].start, cs[joints[i].name].stop)) for i in self.three], dtype=torch.long).reshape(-1, 6)
        self.c2 = torch.tensor([list(range(cs[joints[i].name].start, cs[joints[i].name].stop)) for i in self.one], dtype=torch.long).reshape(-1, 2)
        self.n1 = torch.tensor([ns[joints[i].name].start for i in self.one], dtype=torch.long)
        self.axes = np.array([joints[i].axis for i in self.one], dtype=np.float64).reshape(-1, 3)
        orders: dict[str, list[int]] = {}
        for i, j in enumerate(joints):
            if j.dof == 3:
                orders.setdefault(j.rotation_order, []).append(i)
        self.orders = {
            o: (idx, torch.tensor([list(range(ns[joints[i].name].start, ns[joints[i].name].stop)) for i in idx], dtype=torch.long))
            for o, idx in orders.items()
        }
        cont_order = self.three + self.one + self.jaw
        self.cont_perm = torch.tensor(np.argsort(cont_order), dtype=torch.long)
        nat_order = [i for idx, _ in self.orders.values() for i in idx] + self.one
        self.nat_perm = torch.tensor(np.argsort(nat_order), dtype=torch.long)
        self.levels, self.parent_slots, self.level_perm = _level_tables(schema)

    @classmethod
    def of(cls, schema: SkeletonSchema) -> "_Gather":
        key = schema.hash
        if key not in cls._cache:
            cls._cache[key] = cls(schema)
        return cls._cache[key]


def rotations_from_continuous(x: torch.Tensor, schema: SkeletonSchema) -> torch.Tensor:
    """``(..., continuous_dim)`` to local rotations ``(..., J, 3, 3)``; jaw is identity."""
    if x.shape[-1] != schema.continuous_dim:
        raise DimensionError(f"expected continuous dim {schema.continuous_dim}, got {x.shape[-1]}")
    g = _Gather.of(schema)
    parts = [sixd_to_matrix_t(x[..., g.c6])]
    if g.one:
        parts.append(sincos_matrix_t(g.axes, x[..., g.c2]))
    if g.jaw:
        parts.append(torch.eye(3, dtype=x.dtype).expand(x.shape[:-1] + (len(g.jaw), 3, 3)))
    return torch.cat(parts, dim=-3)[..., g.cont_perm, :, :]


def rotations_from_native(x: torch.Tensor, schema: SkeletonSchema) -> torch.Tensor:
    if x.shape[-1] != schema.native_pose_dim:
        raise DimensionError(f"expected native dim {schema.native_pose_dim}, got {x.shape[-1]}")
    g = _Gather.of(schema)
    parts = [euler_to_matrix_t(x[..., cols], order) for order, (_, cols) in g.orders.items()]
    if g.one:
        parts.append(axis_angle_matrix_t(g.axes, x[..., g.n1]))
    return torch.cat(parts, dim=-3)[..., g.nat_perm, :, :]


def _level_tables(schema: SkeletonSchema):
    levels = schema.depth_levels
    slot = np.zeros(len(schema.canonical_joints), dtype=np.int64)
    for lv in levels:
        slot[lv] = np.arange(len(lv))
    parent_slots = [torch.as_tensor(slot[schema.parent_index[lv]]) for lv in levels[1:]]
    perm = torch.as_tensor(np.argsort(np.concatenate(levels)))
    return [torch.as_tensor(lv) for lv in levels], parent_slots, perm


def fk_from_rotations(
    translation: torch.Tensor, local: torch.Tensor, schema: SkeletonSchema
) -> torch.Tensor:
    """World joint positions ``(..., J, 3)`` from root translation and local rotations.

    Joints are processed one tree depth at a time; every joint at a depth
    reads its parent from the previous depth's batch.
    """
    g = _Gather.of(schema)
    levels, parent_slots, perm = g.levels, g.parent_slots, g.level_perm
    offsets = torch.as_tensor(schema.offsets, dtype=local.dtype)
    R = local[..., :1, :, :]
    p = translation[..., None, :]
    out = [p]
    for lv, ps in zip(levels[1:], parent_slots):
        pr = R[..., ps, :, :]
        p = p[..., ps, :] + (pr @ offsets[lv][..., None])[..., 0]
        R = pr @ local[..., lv, :, :]
        out.append(p)
    return torch.cat(out, dim=-2)[..., perm, :]


def fk_continuous(x: torch.Tensor, schema: SkeletonSchema) -> torch.Tensor:
    return fk_from_rotations(x[..., :3], rotations_from_continuous(x, schema), schema)


def fk_native(x: torch.Tensor, schema: SkeletonSchema) -> torch.Tensor:
    return fk_from_rotations(x[..., :3], rotations_from_native(x, schema), schema)


def forward_kinematics(m: MotionSequence, schema: SkeletonSchema) -> JointPositions:
    f = np.asarray(m.frames, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != schema.native_pose_dim:
        raise DimensionError(f"expected T x {schema.native_pose_dim} frames, got {f.shape}")
    with torch.no_grad():
        p = fk_native(torch.from_numpy(f), schema).numpy()
    return JointPositions(p, schema.name)


def fk_jacobian_check(m: MotionSequence, schema: SkeletonSchema, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between autograd and central differences of a random functional."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    gen = torch.Generator().manual_seed(seed)
    x = torch.tensor(np.asarray(m.frames, dtype=np.float64))
    J = len(schema.canonical_joints)
    w = torch.randn((x.shape[0], J, 3), generator=gen, dtype=torch.float64)

    def functional(z):
        p = fk_native(z, schema)
        return (w * p).sum() + 0.5 * (p * p).sum()

    xg = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(functional(xg), xg)
    numeric = torch.zeros_like(x)
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            if idx[1] >= ROOT_CHANNELS or idx[1] < 3:
                xp, xm = x.clone(), x.clone()
                xp[idx] += h
                xm[idx] -= h
                numeric[idx] = (functional(xp) - functional(xm)) / (2 * h)
    scale = max(float(grad.abs().max()), 1e-12)
    return float(((grad - numeric).abs() / torch.maximum(grad.abs(), torch.full_like(grad, 1e-3 * scale))).max())


# ---------------------------------------------------------------- contacts and loss


def foot_speed_height(p, schema: SkeletonSchema, fps: float):
    """Per-frame speed (m/s) and height (m) of the schema's foot joints."""
    p = np.asarray(p.positions if isinstance(p, JointPositions) else p, dtype=np.float64)
    feet = p[:, schema.foot_indices, :]
    height = feet[..., UP_INDEX[schema.up_axis]]
    if len(feet) < 2:
        return np.zeros(height.shape), height
    step = np.linalg.norm(np.diff(feet, axis=0), axis=-1) * fps
    speed = np.concatenate([step[:1], step], axis=0)
    return speed, height


def detect_contacts(
    p, schema: SkeletonSchema, fps: float, h_thresh: float = 0.05, v_thresh: float = 0.30
) -> ContactMask:
    if h_thresh <= 0 or v_thresh <= 0:
        raise ValueError("thresholds must be positive")
    speed, height = foot_speed_height(p, schema, fps)
    return ContactMask((height < h_thresh) & (speed < v_thresh))


def fk_loss(
    p_hat: torch.Tensor,
    p: torch.Tensor,
    mask: torch.Tensor,
    foot_idx,
    weights: FkWeights = FkWeights(),
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Position, linear-velocity and foot-contact terms over ``(..., T, J, 3)`` positions."""
    if p_hat.shape != p.shape:
        raise ShapeError(f"prediction {tuple(p_hat.shape)} vs target {tuple(p.shape)}")
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != p.shape[:-2] + (len(foot_idx),):
        raise ShapeError(f"contact mask shape {tuple(mask.shape)} does not match positions")
    pos = ((p_hat - p) ** 2).sum(-1).mean()
    zero = p_hat.sum() * 0.0
    if p.shape[-3] < 2:
        return weights.pos * pos, {"pos": pos, "linvel": zero, "contact": zero}
    dh = p_hat[..., 1:, :, :] - p_hat[..., :-1, :, :]
    dp = p[..., 1:, :, :] - p[..., :-1, :, :]
    linvel = ((dh - dp) ** 2).sum(-1).mean()
    both = mask[..., 1:, :] & mask[..., :-1, :]
    # foot displacement beyond the ground truth's own, on frame pairs in contact at both ends
    slide = ((dh[..., foot_idx, :] - dp[..., foot_idx, :]) ** 2).sum(-1)
    n = both.sum()
    contact = (slide * both).sum() / n if n > 0 else zero
    total = weights.pos * pos + weights.linvel * linvel + weights.contact * contact
    return total, {"pos": pos, "linvel": linvel, "contact": contact}
