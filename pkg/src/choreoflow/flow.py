"""Flow-matching objective, CFG Euler sampler and the training loop."""
from __future__ import annotations

import math

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .choreo import ChoreoAnnotation, TokenLayout, extract_tokens
from .errors import EmptyDataset, LayoutError, NonFiniteError, ShapeError
from .kinematics import UP_INDEX, FkWeights, fk_continuous, fk_loss, fk_native
from .model import EMA, ModelConfig, VelocityDiT, make_optimizer, optimizer_step, pad_tokens, preset
from .representation import MotionCodec, MotionSequence
from .schema import DimLayout, SkeletonSchema, dim_layout

log = logging.getLogger(__name__)

T_MIN = 1e-4


@dataclass(frozen=True)
class LossWeights:
    lambda_rot: float = 1.0
    lambda_body: float = 1.5
    lambda_hand: float = 0.5
    lambda_x0: float = 2.0
    lambda_v: float = 0.5
    lambda_a: float = 1.5

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def interpolate(x0, x1, t):
    """Point on the straight path; ``t`` broadcasts over leading batch dims."""
    if x0.shape != x1.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} vs x1 {tuple(x1.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim == 1 and x0.ndim > 1:
        t = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return (1 - t) * x0 + t * x1


def target_velocity(x0, x1):
    return x1 - x0


def _velocity_groups(layout: DimLayout, roots_in_body: bool = True) -> dict[str, np.ndarray]:
    body = layout.body_rotation
    if roots_in_body:
        body = np.sort(np.concatenate([layout.root_translation, body]))
    return {"rot": layout.global_rotation, "body": body, "hand": layout.hand_rotation}


def anatomy_velocity_loss(v_hat, v_target, layout: DimLayout, weights: LossWeights = LossWeights(),
                          roots_in_body: bool = True):
    """Group-weighted velocity MSE; returns ``(scalar, breakdown)``.

    Breakdown holds each weighted group term plus ``mse_*`` raw group means.
    """
    if v_hat.shape != v_target.shape:
        raise ShapeError(f"prediction {tuple(v_hat.shape)} vs target {tuple(v_target.shape)}")
    D = v_hat.shape[-1]
    groups = _velocity_groups(layout, roots_in_body)
    covered = np.concatenate(list(groups.values()) + [layout.jaw])
    if layout.size != D or len(covered) != D or not np.array_equal(np.sort(covered), np.arange(D)):
        raise LayoutError(f"layout for {layout.size} dims does not partition {D} velocity dims")
    lam = {"rot": weights.lambda_rot, "body": weights.lambda_body, "hand": weights.lambda_hand}
    err = (v_hat - v_target) ** 2
    total = v_hat.sum() * 0.0
    breakdown = {}
    for name, idx in groups.items():
        if len(idx) == 0:
            mse = total * 0.0
        else:
            mse = err[..., torch.as_tensor(idx)].mean()
        breakdown[f"mse_{name}"] = mse
        breakdown[name] = lam[name] * mse
        total = total + breakdown[name]
    return total, breakdown


def _diff(x):
    return x[..., 1:, :] - x[..., :-1, :]


def reconstruction_and_smoothing(x_t, t, v_hat, x0, weights: LossWeights = LossWeights()):
    """Returns ``(L_x0, L_smooth, x0_hat)`` with ``x0_hat = x_t - t * v_hat``."""
    if not (x_t.shape == v_hat.shape == x0.shape):
        raise ShapeError("x_t, v_hat and x0 must share a shape")
    if isinstance(t, torch.Tensor) and t.ndim == 1 and x_t.ndim > 1:
        t = t.reshape(-1, *([1] * (x_t.ndim - 1)))
    x0_hat = x_t - t * v_hat
    l_x0 = weights.lambda_x0 * ((x0_hat - x0) ** 2).mean()
    T = x0.shape[-2]
    zero = x0_hat.sum() * 0.0
    l_v = ((_diff(x0_hat) - _diff(x0)) ** 2).mean() if T >= 2 else zero
    l_a = ((_diff(_diff(x0_hat)) - _diff(_diff(x0))) ** 2).mean() if T >= 3 else zero
    return l_x0, weights.lambda_v * l_v + weights.lambda_a * l_a, x0_hat


@dataclass
class FlowBatch:
    x0: torch.Tensor  # B x T x D, normalized target space
    tokens: torch.Tensor  # B x L
    token_mask: torch.Tensor  # B x L
    identity: torch.Tensor  # B x 68
    fps: float
    positions: torch.Tensor | None = None  # B x T x J x 3, ground truth; computed on demand when None
    contact: torch.Tensor | None = None  # B x T x F


class TorchCodec:
    """Torch-side denormalization and FK for a fitted :class:`MotionCodec`."""

    def __init__(self, codec: MotionCodec, dtype=torch.float64):
        self.codec = codec
        self.schema = codec.schema
        st = codec.stats
        if codec.mode == "hybrid":
            scale = np.full(codec.dim, st.sigma_rot)
            scale[:6] = st.trans_std
            shift = np.zeros(codec.dim)
            shift[:6] = st.trans_mean
        else:
            scale, shift = st.std, st.mean
        self.scale = torch.as_tensor(scale, dtype=dtype)
        self.shift = torch.as_tensor(shift, dtype=dtype)

    def positions(self, x: torch.Tensor) -> torch.Tensor:
        raw = x * self.scale.to(x.dtype) + self.shift.to(x.dtype)
        if self.codec.mode == "hybrid":
            return fk_continuous(raw, self.schema)
        return fk_native(raw, self.schema)


def contact_mask_t(p: torch.Tensor, schema: SkeletonSchema, fps: float, h_thresh=0.05, v_thresh=0.30):
    feet = p[..., schema.foot_indices, :]
    height = feet[..., UP_INDEX[schema.up_axis]]
    if p.shape[-3] < 2:
        return torch.zeros(height.shape, dtype=torch.bool)
    step = (feet[..., 1:, :, :] - feet[..., :-1, :, :]).norm(dim=-1) * fps
    speed = torch.cat([step[..., :1, :], step], dim=-2)
    return (height < h_thresh) & (speed < v_thresh)


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    fk: FkWeights = field(default_factory=FkWeights)
    use_fk: bool = True
    contact_h: float = 0.05
    contact_v: float = 0.30
    roots_in_body: bool = True


def total_loss(
    model,
    batch: FlowBatch,
    tcodec: TorchCodec,
    cfg: LossConfig = LossConfig(),
    generator: torch.Generator | None = None,
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
    drop: torch.Tensor | None = None,
    cond_drop_prob: float = 0.0,
):
    """Velocity, reconstruction, smoothing and FK terms summed; returns ``(scalar, components)``.

    ``t``, ``noise`` and ``drop`` are drawn from ``generator`` unless given.
    """
    x0 = batch.x0
    B = x0.shape[0]
    dtype = x0.dtype
    if t is None:
        t = T_MIN + (1 - T_MIN) * torch.rand(B, generator=generator, dtype=dtype)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=dtype)
    if drop is None:
        drop = torch.rand(B, generator=generator) < cond_drop_prob
    x_t = interpolate(x0, noise, t)
    v_hat = model(x_t, t, batch.identity, batch.tokens, batch.token_mask, drop, drop)
    v_target = target_velocity(x0, noise)
    layout = dim_layout(tcodec.schema, tcodec.codec.space)
    l_vel, breakdown = anatomy_velocity_loss(v_hat, v_target, layout, cfg.weights, cfg.roots_in_body)
    l_x0, l_smooth, x0_hat = reconstruction_and_smoothing(x_t, t, v_hat, x0, cfg.weights)
    comps = {"vel": l_vel, "x0": l_x0, "smooth": l_smooth}
    comps.update({f"vel_{k}": v for k, v in breakdown.items()})
    total = l_vel + l_x0 + l_smooth
    if cfg.use_fk and any(w > 0 for w in (cfg.fk.pos, cfg.fk.linvel, cfg.fk.contact)):
        p_hat = tcodec.positions(x0_hat)
        p, mask = batch.positions, batch.contact
        if p is None or mask is None:
            with torch.no_grad():
                p = tcodec.positions(x0)
                mask = contact_mask_t(p, tcodec.schema, batch.fps, cfg.contact_h, cfg.contact_v)
        l_fk, fk_parts = fk_loss(p_hat, p, mask, tcodec.schema.foot_indices, cfg.fk)
        comps["fk"] = l_fk
        comps.update({f"fk_{k}": v for k, v in fk_parts.items()})
        total = total + l_fk
    else:
        comps["fk"] = total * 0.0
    comps["total"] = total
    return total, comps


# ---------------------------------------------------------------- sampling


def guided_velocity(v_cond: torch.Tensor | None, v_uncond: torch.Tensor | None, w: float) -> torch.Tensor:
    """``v_uncond + w (v_cond - v_uncond)``; w = 0 and w = 1 return the inputs unchanged."""
    if w == 0:
        return v_uncond
    if w == 1:
        return v_cond
    return v_uncond + w * (v_cond - v_uncond)


def euler_integrate(velocity_fn, x1: torch.Tensor, steps: int) -> torch.Tensor:
    """Integrate ``dx/dt = v(x, t)`` from t = 1 to t = 0 with uniform Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = -1.0 / steps
    x = x1
    for i in range(steps):
        t = 1.0 - i / steps
        v = velocity_fn(x, t)
        if not torch.isfinite(v).all():
            raise NonFiniteError("non-finite velocity", step=i)
        x = x + dt * v
        if not torch.isfinite(x).all():
            raise NonFiniteError("non-finite state", step=i)
    return x


def model_velocity_fn(model: VelocityDiT, tokens, identity, w: float):
    """Batched CFG velocity callable for :func:`euler_integrate`."""
    dtype = next(model.parameters()).dtype
    if isinstance(tokens, torch.Tensor):
        tok, mask = tokens, tokens != 0
    else:
        tok, mask = pad_tokens(tokens)
    identity = torch.as_tensor(np.asarray(identity), dtype=dtype)
    if identity.ndim == 1:
        identity = identity[None]
    B = tok.shape[0]
    identity = identity.expand(B, -1)
    yes = torch.ones(B, dtype=torch.bool)
    no = torch.zeros(B, dtype=torch.bool)

    def fn(x, t):
        tt = torch.full((B,), t, dtype=dtype)
        v_c = model(x, tt, identity, tok, mask, no, no) if w != 0 else None
        v_u = model(x, tt, identity, tok, mask, yes, yes) if w != 1 else None
        return guided_velocity(v_c, v_u, w)

    return fn


@torch.no_grad()
def sample_batch(model: VelocityDiT, tokens, identity, frames: int, sampler: SamplerConfig = SamplerConfig(),
                 noise: torch.Tensor | None = None) -> torch.Tensor:
    """Target-space samples ``(B, frames, D)``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    B = len(tokens)
    if noise is None:
        gen = torch.Generator().manual_seed(sampler.seed)
        noise = torch.randn((B, frames, model.cfg.in_dim), generator=gen, dtype=dtype)
    fn = model_velocity_fn(model, tokens, identity, sampler.guidance_scale)
    return euler_integrate(fn, noise, sampler.steps)


def sample(model: VelocityDiT, annotation: ChoreoAnnotation | list[int], identity, frames: int,
           sampler: SamplerConfig, codec: MotionCodec, fps: float = 30.0,
           layout: TokenLayout | None = None) -> MotionSequence:
    if frames < 1:
        raise ValueError("frames must be >= 1")
    tokens = annotation if isinstance(annotation, list) else extract_tokens(annotation, layout, model.cfg.L_max)
    x = sample_batch(model, [tokens], identity, frames, sampler)[0]
    return codec.from_target(x.double().numpy(), fps, identity)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over ``steps``
    weight_decay: float = 0.0
    ema_decay: float = 0.9999
    seed: int = 0
    preset: str = "desk"
    representation: str = "hybrid"
    dtype: str = "float32"
    log_every: int = 1
    checkpoint_every: int = 0
    model_overrides: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_factor(self, step: int) -> float:
        if self.lr_schedule == "cosine" and self.steps > 0:
            return 0.5 * (1.0 + math.cos(math.pi * min(step, self.steps) / self.steps))
        return 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = d.pop("loss", {}) or {}
        lc = LossConfig(
            weights=LossWeights(**loss.get("weights", {})),
            fk=FkWeights(**loss.get("fk", {})),
            **{k: v for k, v in loss.items() if k not in ("weights", "fk")},
        )
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(loss=lc, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class TrainState:
    model: VelocityDiT
    optimizer: torch.optim.Optimizer
    ema: EMA
    codec: MotionCodec
    config: TrainConfig
    step: int = 0
    history: list = field(default_factory=list)


class TrainingDataset:
    """Motions encoded to target space plus their token sequences."""

    def __init__(self, motions: list[MotionSequence], annotations: list, codec: MotionCodec,
                 layout: TokenLayout | None = None, l_max: int = 256, dtype=torch.float32):
        if not motions:
            raise EmptyDataset("no motions")
        if len(motions) != len(annotations):
            raise ValueError("motions and annotations differ in length")
        self.layout = layout or TokenLayout()
        lengths = {m.T for m in motions}
        if len(lengths) != 1:
            raise ValueError("training motions must share a frame count")
        fps = {float(m.fps) for m in motions}
        if len(fps) != 1:
            raise ValueError("training motions must share a frame rate")
        self.fps = fps.pop()
        self.x0 = torch.as_tensor(np.stack([codec.to_target(m.frames) for m in motions]), dtype=dtype)
        self.identity = torch.as_tensor(np.stack([np.asarray(m.identity) for m in motions]), dtype=dtype)
        toks = [a if isinstance(a, list) else extract_tokens(a, self.layout, l_max) for a in annotations]
        self.tokens, self.token_mask = pad_tokens(toks)
        self.positions = self.contact = None

    def precompute_targets(self, codec: MotionCodec, loss: LossConfig) -> None:
        """Cache ground-truth joint positions and contact masks for the FK loss."""
        with torch.no_grad():
            self.positions = TorchCodec(codec, self.x0.dtype).positions(self.x0)
            self.contact = contact_mask_t(self.positions, codec.schema, self.fps, loss.contact_h, loss.contact_v)

    def __len__(self):
        return self.x0.shape[0]

    def batch(self, idx) -> FlowBatch:
        idx = torch.as_tensor(idx)
        pos = None if self.positions is None else self.positions[idx]
        con = None if self.contact is None else self.contact[idx]
        return FlowBatch(self.x0[idx], self.tokens[idx], self.token_mask[idx], self.identity[idx], self.fps, pos, con)


def data_moments(x0: torch.Tensor):
    """Per-dim mean and variance plus a frame-lag autocorrelation pooled over dims.

    The autocorrelation uses each sequence's deviations from its own mean, so
    offsets between sequences do not masquerade as slow temporal structure.
    """
    x = x0.double()
    flat = x.reshape(-1, x.shape[-1])
    mean, var = flat.mean(0), flat.var(0, unbiased=False)
    z = x - x.mean(dim=1, keepdim=True)
    within = (z * z).mean(dim=(0, 1))
    live = within > 1e-12
    z = z[..., live] / within[live].sqrt()
    T = x.shape[1]
    autocorr = torch.zeros(T, dtype=torch.float64)
    autocorr[0] = 1.0
    if z.shape[-1]:
        for k in range(1, T):
            autocorr[k] = (z[:, k:] * z[:, : T - k]).mean()
    return mean, var, autocorr


def init_training(dataset_motions, annotations, config: TrainConfig, schema: SkeletonSchema,
                  layout: TokenLayout | None = None) -> tuple[TrainState, TrainingDataset]:
    torch.manual_seed(config.seed)
    layout = layout or TokenLayout()
    dtype = getattr(torch, config.dtype)
    codec = MotionCodec(schema, config.representation).fit(dataset_motions)
    mcfg = preset(config.preset, codec.dim, layout.size, **config.model_overrides)
    data = TrainingDataset(dataset_motions, annotations, codec, layout, mcfg.L_max, dtype)
    if config.loss.use_fk:
        data.precompute_targets(codec, config.loss)
    model = VelocityDiT(mcfg).to(dtype)
    mean, var, autocorr = data_moments(data.x0)
    model.set_data_moments(mean, var, autocorr)
    opt = make_optimizer(model, config.lr, config.weight_decay)
    ema = EMA(model, config.ema_decay)
    return TrainState(model, opt, ema, codec, config), data


def train_loop(state: TrainState, data: TrainingDataset, steps: int | None = None,
               on_step=None, on_checkpoint=None) -> TrainState:
    """Run ``steps`` updates (default ``config.steps``) and return the mutated state."""
    cfg = state.config
    steps = cfg.steps if steps is None else steps
    gen = torch.Generator().manual_seed(cfg.seed * 7919 + state.step)
    tcodec = TorchCodec(state.codec, dtype=data.x0.dtype)
    model = state.model
    for _ in range(steps):
        model.train()
        # dropout draws from the global generator; reseed per step so resumed runs match
        torch.manual_seed(cfg.seed * 1_000_003 + state.step)
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        batch = data.batch(idx)
        try:
            loss, comps = total_loss(model, batch, tcodec, cfg.loss, generator=gen,
                                     cond_drop_prob=model.cfg.cond_drop_prob)
            if not torch.isfinite(loss):
                raise NonFiniteError("non-finite loss", step=state.step)
            loss.backward()
            factor = cfg.lr_factor(state.step)
            for group in state.optimizer.param_groups:
                group["lr"] = group.setdefault("base_lr", group["lr"]) * factor
            gnorm = optimizer_step(model, state.optimizer, state.ema, step=state.step)
        except NonFiniteError:
            # the update is skipped for non-finite losses and gradients, so the state is still good
            model.zero_grad(set_to_none=True)
            if on_checkpoint is not None and all(torch.isfinite(p).all() for p in model.parameters()):
                on_checkpoint(state)
            raise
        state.step += 1
        rec = {"step": state.step, "grad_norm": gnorm}
        rec.update({k: v.item() for k, v in comps.items()})
        state.history.append(rec)
        if on_step is not None and cfg.log_every and state.step % cfg.log_every == 0:
            on_step(rec)
        if on_checkpoint is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state


def loss_reduction(history: list[dict], key: str = "vel", window: int = 100) -> float:
    """Ratio of the mean of ``key`` over the last ``window`` steps to the first ``window``."""
    vals = [h[key] for h in history]
    if len(vals) < 2 * window:
        window = max(1, len(vals) // 2)
    return float(np.mean(vals[-window:]) / np.mean(vals[:window]))

