"""Conditional diffusion transformer predicting flow-matching velocities.

Blocks stack self-attention (RoPE + QK-Norm), cross-attention to choreography
tokens and a feed-forward layer. Every sublayer is modulated by AdaLN-Zero
from ``timestep_embedding(t) + identity_projection(s)``.

With ``gaussian_skip`` the head output is added to a gated closed-form
velocity for Gaussian data, whose moments come from the training set and
are shifted per sample by the pooled text context.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import NonFiniteError, ShapeError
from .representation import IDENTITY_DIM


@dataclass
class ModelConfig:
    in_dim: int
    token_vocab: int
    layers: int = 2
    hidden_dim: int = 64
    ffn_dim: int = 256
    heads: int = 4
    L_max: int = 256
    dropout: float = 0.05
    cond_drop_prob: float = 0.1
    max_frames: int = 1024
    identity_dim: int = IDENTITY_DIM
    time_freq_dim: int = 128
    qk_scale_init: float = 10.0
    gaussian_skip: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if (self.hidden_dim // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError("cond_drop_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "desk": dict(layers=2, hidden_dim=64, ffn_dim=256, heads=4, dropout=0.05),
    "ablation": dict(layers=12, hidden_dim=512, ffn_dim=2048, heads=8, dropout=0.1),
    "full": dict(layers=12, hidden_dim=1024, ffn_dim=4096, heads=16, dropout=0.05),
}


def preset(name: str, in_dim: int, token_vocab: int, **overrides) -> ModelConfig:
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(in_dim=in_dim, token_vocab=token_vocab, **kw)


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (1000.0 * t)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def rope(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate channel pairs of ``x`` (..., T, d) by position-dependent angles."""
    d = x.shape[-1]
    inv = base ** (-torch.arange(0, d, 2, dtype=x.dtype) / d)
    ang = positions.to(x.dtype)[:, None] * inv[None]
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.qkv = nn.Linear(cfg.hidden_dim, 3 * cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.qk_scale = nn.Parameter(torch.full((cfg.heads,), cfg.qk_scale_init))

    def logits(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        B, T, H = x.shape
        q, k, _ = self.qkv(x).reshape(B, T, 3, self.heads, H // self.heads).permute(2, 0, 3, 1, 4)
        q = F.normalize(q, dim=-1, eps=1e-6)
        k = F.normalize(k, dim=-1, eps=1e-6)
        q, k = rope(q, positions), rope(k, positions)
        return self.qk_scale[None, :, None, None] * (q @ k.transpose(-1, -2))

    def forward(self, x, positions):
        B, T, H = x.shape
        v = self.qkv(x).reshape(B, T, 3, self.heads, H // self.heads)[:, :, 2].transpose(1, 2)
        attn = self.logits(x, positions).softmax(-1)
        return self.out((attn @ v).transpose(1, 2).reshape(B, T, H))


class CrossAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.q = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.kv = nn.Linear(cfg.hidden_dim, 2 * cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)

    def forward(self, x, ctx, ctx_mask):
        B, T, H = x.shape
        L = ctx.shape[1]
        d = H // self.heads
        q = self.q(x).reshape(B, T, self.heads, d).transpose(1, 2)
        k, v = self.kv(ctx).reshape(B, L, 2, self.heads, d).permute(2, 0, 3, 1, 4)
        logits = (q @ k.transpose(-1, -2)) / math.sqrt(d)
        logits = logits.masked_fill(~ctx_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(-1)
        return self.out((attn @ v).transpose(1, 2).reshape(B, T, H))


class DiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(H, elementwise_affine=False, eps=1e-6)
        self.attn = SelfAttention(cfg)
        self.norm2 = nn.LayerNorm(H, elementwise_affine=False, eps=1e-6)
        self.cross = CrossAttention(cfg)
        self.norm3 = nn.LayerNorm(H, elementwise_affine=False, eps=1e-6)
        self.ffn = nn.Sequential(nn.Linear(H, cfg.ffn_dim), nn.GELU(approximate="tanh"), nn.Linear(cfg.ffn_dim, H))
        self.drop = nn.Dropout(cfg.dropout)
        self.adaln = nn.Sequential(nn.SiLU(), nn.Linear(H, 9 * H))
        nn.init.zeros_(self.adaln[1].weight)
        nn.init.zeros_(self.adaln[1].bias)

    def forward(self, x, c, positions, ctx, ctx_mask):
        (s1, sc1, g1, s2, sc2, g2, s3, sc3, g3) = self.adaln(c).chunk(9, dim=-1)
        x = x + g1[:, None] * self.drop(self.attn(modulate(self.norm1(x), s1, sc1), positions))
        x = x + g2[:, None] * self.drop(self.cross(modulate(self.norm2(x), s2, sc2), ctx, ctx_mask))
        x = x + g3[:, None] * self.drop(self.ffn(modulate(self.norm3(x), s3, sc3)))
        return x


class VelocityDiT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden_dim
        self.in_proj = nn.Linear(cfg.in_dim, H)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_freq_dim, H), nn.SiLU(), nn.Linear(H, H))
        self.identity_proj = nn.Linear(cfg.identity_dim, H)
        self.null_identity = nn.Parameter(torch.zeros(H))
        self.token_embed = nn.Embedding(cfg.token_vocab, H)
        self.token_pos = nn.Embedding(cfg.L_max, H)
        self.null_text = nn.Parameter(torch.randn(H) * 0.02)
        self.blocks = nn.ModuleList([DiTBlock(cfg) for _ in range(cfg.layers)])
        self.final_norm = nn.LayerNorm(H, elementwise_affine=False, eps=1e-6)
        self.final_adaln = nn.Sequential(nn.SiLU(), nn.Linear(H, 2 * H))
        self.head = nn.Linear(H, cfg.in_dim)
        for lin in (self.final_adaln[1], self.head):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        # Data moments for the Gaussian skip path; set with set_data_moments.
        # Autocorrelation by frame lag, shared by all dims; lag 0 only means frames are independent.
        self.register_buffer("data_mean", torch.zeros(cfg.in_dim))
        self.register_buffer("data_var", torch.ones(cfg.in_dim))
        autocorr = torch.zeros(cfg.max_frames)
        autocorr[0] = 1.0
        self.register_buffer("data_autocorr", autocorr)
        self.skip_gate = nn.Parameter(torch.zeros(cfg.in_dim)) if cfg.gaussian_skip else None
        if cfg.gaussian_skip:
            # text context shifts the per-dim mean and log-variance of the skip prior
            self.skip_moments = nn.Linear(H, 2 * cfg.in_dim)
            nn.init.zeros_(self.skip_moments.weight)
            nn.init.zeros_(self.skip_moments.bias)
        self._basis_cache: dict = {}

    @torch.no_grad()
    def set_data_moments(self, mean, var, autocorr=None) -> None:
        self.data_mean.copy_(torch.as_tensor(mean, dtype=self.data_mean.dtype))
        self.data_var.copy_(torch.as_tensor(var, dtype=self.data_var.dtype).clamp_min(0.0))
        self.data_autocorr.zero_()
        self.data_autocorr[0] = 1.0
        if autocorr is not None:
            autocorr = torch.as_tensor(autocorr, dtype=self.data_autocorr.dtype)[: self.cfg.max_frames]
            self.data_autocorr[: len(autocorr)] = autocorr

    def _time_basis(self, T: int, dtype, device):
        """Eigenbasis of the T x T Toeplitz frame correlation, eigenvalues clamped at 0."""
        key = (T, dtype, device, self.data_autocorr._version, self.data_autocorr.data_ptr())
        hit = self._basis_cache.get(key)
        if hit is None:
            r = self.data_autocorr[:T].double().cpu()
            lag = (torch.arange(T)[:, None] - torch.arange(T)[None]).abs()
            lam, U = torch.linalg.eigh(r[lag])
            hit = (U.to(dtype=dtype, device=device), lam.clamp_min(0.0).to(dtype=dtype, device=device))
            self._basis_cache = {key: hit}
        return hit

    def gaussian_velocity(self, x: torch.Tensor, t: torch.Tensor, mean_shift=None, log_var_shift=None) -> torch.Tensor:
        """Exact posterior-mean velocity if the data were Gaussian with the stored moments.

        Each dim is modelled independently with a stationary frame correlation.
        Optional ``(B, D)`` shifts adjust the mean (in units of the data std) and the log-variance.
        A narrow hidden width cannot carry per-dim noise through to the head;
        this closed-form term supplies it, and the network learns the rest.
        """
        U, lam = self._time_basis(x.shape[1], x.dtype, x.device)
        t = t[:, None, None]
        mu, var = self.data_mean, self.data_var
        if mean_shift is not None:
            mu = mu + mean_shift[:, None, :] * var.sqrt()
        if log_var_shift is not None:
            var = var * log_var_shift[:, None, :].exp()
        s = lam[:, None] * var
        gain = (t - (1 - t) * s) / ((1 - t) ** 2 * s + t * t).clamp_min(1e-12)
        y = torch.einsum("sk,bsd->bkd", U, x - (1 - t) * mu)
        return torch.einsum("tk,bkd->btd", U, gain * y) - mu

    def conditioning(self, t, identity, drop_identity):
        c = self.time_mlp(timestep_features(t, self.cfg.time_freq_dim))
        s = self.identity_proj(identity)
        s = torch.where(drop_identity[:, None], self.null_identity.expand_as(s), s)
        return c + s

    def context(self, tokens, token_mask, drop_text):
        B, L = tokens.shape
        if L > self.cfg.L_max:
            raise ShapeError(f"{L} tokens exceed L_max={self.cfg.L_max}")
        if L == 0:
            tokens = torch.zeros((B, 1), dtype=torch.long)
            token_mask = torch.zeros((B, 1), dtype=torch.bool)
            L = 1
        pos = torch.arange(L)
        ctx = self.token_embed(tokens) + self.token_pos(pos)[None]
        null = torch.zeros_like(ctx)
        null[:, 0] = self.null_text
        null_mask = torch.zeros_like(token_mask)
        null_mask[:, 0] = True
        # rows with an empty token list attend to the null token as well
        use_null = drop_text | ~token_mask.any(-1)
        ctx = torch.where(use_null[:, None, None], null, ctx)
        mask = torch.where(use_null[:, None], null_mask, token_mask)
        return ctx, mask

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        identity: torch.Tensor,
        tokens: torch.Tensor,
        token_mask: torch.Tensor | None = None,
        drop_text: torch.Tensor | None = None,
        drop_identity: torch.Tensor | None = None,
        position_offset: int = 0,
    ) -> torch.Tensor:
        if x.ndim != 3 or x.shape[-1] != self.cfg.in_dim:
            raise ShapeError(f"expected (B, T, {self.cfg.in_dim}) input, got {tuple(x.shape)}")
        B, T, _ = x.shape
        if T > self.cfg.max_frames:
            raise ShapeError(f"{T} frames exceed max_frames={self.cfg.max_frames}")
        if not torch.isfinite(x).all():
            raise NonFiniteError("non-finite model input")
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(B)
        if token_mask is None:
            token_mask = tokens != 0
        if drop_text is None:
            drop_text = torch.zeros(B, dtype=torch.bool)
        if drop_identity is None:
            drop_identity = torch.zeros(B, dtype=torch.bool)
        c = self.conditioning(t, identity.to(x.dtype), drop_identity)
        ctx, ctx_mask = self.context(tokens, token_mask, drop_text)
        positions = torch.arange(T) + position_offset
        h = self.in_proj(x)
        for blk in self.blocks:
            h = blk(h, c, positions, ctx, ctx_mask)
        shift, scale = self.final_adaln(c).chunk(2, dim=-1)
        out = self.head(modulate(self.final_norm(h), shift, scale))
        if self.skip_gate is not None:
            w = ctx_mask.to(x.dtype)[..., None]
            pooled = (ctx * w).sum(1) / w.sum(1).clamp_min(1.0)
            mean_shift, log_var_shift = self.skip_moments(pooled).chunk(2, dim=-1)
            out = out + self.skip_gate * self.gaussian_velocity(x, t, mean_shift, log_var_shift)
        return out


@dataclass
class ConditioningBundle:
    tokens: list[int]
    identity: np.ndarray
    timestep: float = 0.0
    drop_text: bool = False
    drop_identity: bool = False

    def __post_init__(self):
        if not 0.0 <= self.timestep <= 1.0:
            raise ValueError("timestep must lie in [0, 1]")


def pad_tokens(seqs, l_max: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    L = max(1, max((len(s) for s in seqs), default=1))
    if l_max is not None:
        L = min(L, l_max)
    out = torch.zeros((len(seqs), L), dtype=torch.long)
    for i, s in enumerate(seqs):
        s = list(s)[:L]
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out, out != 0


def forward_single(model: VelocityDiT, x_t, cond: ConditioningBundle) -> torch.Tensor:
    """Velocity for one ``T x D`` state under a :class:`ConditioningBundle`."""
    x = torch.as_tensor(x_t)
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)[None]
    tokens, mask = pad_tokens([cond.tokens])
    return model(
        x,
        torch.tensor([cond.timestep], dtype=dtype),
        torch.as_tensor(np.asarray(cond.identity), dtype=dtype)[None],
        tokens,
        mask,
        torch.tensor([cond.drop_text]),
        torch.tensor([cond.drop_identity]),
    )[0]


# ---------------------------------------------------------------- training utilities


class EMA:
    """Exponential moving average of model parameters."""

    def __init__(self, model: nn.Module, decay: float = 0.9999):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        names = list(self.shadow)
        params = dict(model.named_parameters())
        shadow = [self.shadow[k] for k in names]
        torch._foreach_mul_(shadow, self.decay)
        torch._foreach_add_(shadow, [params[k].detach() for k in names], alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, model: nn.Module) -> None:
        for k, p in model.named_parameters():
            p.copy_(self.shadow[k])


# The skip gate must travel from 0 to about 1; at the base rate it lags the rest of the model.
SKIP_GATE_LR_SCALE = 20.0


def make_optimizer(model: nn.Module, lr: float = 2e-4, weight_decay: float = 0.0, betas=(0.9, 0.999)):
    gate = getattr(model, "skip_gate", None)
    rest = [p for p in model.parameters() if p is not gate]
    groups = [{"params": rest}] if rest else []
    if gate is not None:
        groups.append({"params": [gate], "lr": lr * SKIP_GATE_LR_SCALE, "weight_decay": 0.0})
    try:
        return torch.optim.AdamW(groups, lr=lr, weight_decay=weight_decay, betas=betas, fused=True)
    except (RuntimeError, TypeError):
        return torch.optim.AdamW(groups, lr=lr, weight_decay=weight_decay, betas=betas)


def optimizer_step(model: nn.Module, optimizer, ema: EMA | None = None, step: int | None = None) -> float:
    """Apply one AdamW update; returns the global gradient norm."""
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    gnorm = float(torch.linalg.vector_norm(torch.stack(torch._foreach_norm(grads)).double())) if grads else 0.0
    if not math.isfinite(gnorm):
        raise NonFiniteError("non-finite gradient", step=step)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    if not math.isfinite(float(torch.stack(torch._foreach_norm([p.detach() for p in model.parameters()])).sum())):
        raise NonFiniteError("non-finite parameter after update", step=step)
    if ema is not None:
        ema.update(model)
    return gnorm


def finite_difference_check(
    model: nn.Module, loss_fn, n_probe: int = 64, h: float = 1e-6, seed: int = 0
) -> dict:
    """Compare autograd gradients with central differences on random parameter entries.

    ``loss_fn()`` must be deterministic. Relative error uses
    ``max(|analytic|, |numeric|, 1e-6 * max|grad|)`` as denominator.
    """
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in params}
    gmax = max(float(g.abs().max()) for g in grads.values())
    sizes = np.array([p.numel() for _, p in params])
    rng = np.random.default_rng(seed)
    which = rng.choice(len(params), size=n_probe, p=sizes / sizes.sum())
    worst, records = 0.0, []
    with torch.no_grad():
        for pi in which:
            name, p = params[pi]
            flat = p.view(-1)
            k = int(rng.integers(flat.numel()))
            orig = flat[k].item()
            flat[k] = orig + h
            lp = float(loss_fn())
            flat[k] = orig - h
            lm = float(loss_fn())
            flat[k] = orig
            num = (lp - lm) / (2 * h)
            ana = float(grads[name].view(-1)[k])
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-6 * gmax, 1e-300)
            worst = max(worst, rel)
            records.append((name, k, ana, num, rel))
    model.zero_grad(set_to_none=True)
    return {"max_rel_error": worst, "probes": records, "max_grad": gmax}
