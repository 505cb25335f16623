"""Shared builders for model and loss tests."""
import numpy as np
import torch

from choreoflow.choreo import TokenLayout, extract_tokens
from choreoflow.flow import FlowBatch, LossConfig, TorchCodec, total_loss
from choreoflow.model import VelocityDiT, pad_tokens, preset
from choreoflow.representation import MotionCodec, MotionSequence

from conftest import random_native

ANN = {"phrases": [{"body": {"left_arm": "raise"}, "orientation": 2}], "free_text": "up we go"}


def desk_model(in_dim, seed=0, dtype=torch.float64, randomize=True, **overrides):
    torch.manual_seed(seed)
    cfg = preset("desk", in_dim, TokenLayout().size, dropout=0.0, **overrides)
    model = VelocityDiT(cfg).to(dtype)
    if randomize:
        # nonzero gates and head so every branch carries gradient
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=dtype))
    model.eval()
    return model


def fd_problem(schema, T=4, B=2, seed=0):
    """Deterministic full-loss closure on a randomized float64 desk model."""
    rng = np.random.default_rng(seed)
    motions = [MotionSequence(schema.name, 30.0, random_native(schema, T, rng, scale=1.5)) for _ in range(B)]
    for m in motions:
        m.frames[:, 1] = rng.uniform(0.0, 0.06)  # some frames near the ground engage the contact term
    codec = MotionCodec(schema).fit(motions)
    x0 = torch.as_tensor(np.stack([codec.to_target(m.frames) for m in motions]))
    tokens, mask = pad_tokens([extract_tokens(ANN)] * B)
    identity = torch.as_tensor(rng.normal(size=(B, 68)))
    batch = FlowBatch(x0, tokens, mask, identity, 30.0)
    model = desk_model(codec.dim, seed)
    tcodec = TorchCodec(codec, torch.float64)
    gen = torch.Generator().manual_seed(seed)
    t = torch.rand(B, generator=gen, dtype=torch.float64) * 0.8 + 0.1
    noise = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    drop = torch.tensor([False, True][:B] + [False] * max(0, B - 2))
    cfg = LossConfig()

    def loss_fn():
        return total_loss(model, batch, tcodec, cfg, t=t, noise=noise, drop=drop)[0]

    return model, loss_fn
