import numpy as np
import pytest
import torch

from choreoflow.choreo import TokenLayout
from choreoflow.errors import NonFiniteError, ShapeError
from choreoflow.model import (
    EMA, ConditioningBundle, ModelConfig, VelocityDiT, finite_difference_check, forward_single, make_optimizer,
    optimizer_step, pad_tokens, preset, rope,
)

from helpers import desk_model, fd_problem

V = TokenLayout().size


def _inputs(B, T, D, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn((B, T, D), generator=g, dtype=dtype)
    t = torch.rand(B, generator=g, dtype=dtype)
    s = torch.randn((B, 68), generator=g, dtype=dtype)
    tok = torch.randint(4, V, (B, 9), generator=g)
    return x, t, s, tok


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, 10, hidden_dim=65, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(10, 10, cond_drop_prob=1.5)
    assert preset("full", 260, V).hidden_dim == 1024


def test_zero_output_at_init():
    torch.manual_seed(0)
    model = VelocityDiT(preset("desk", 260, V)).double()
    for seed in range(10):
        x, t, s, tok = _inputs(2, 7, 260, seed)
        out = model(x, t, s, tok)
        assert out.shape == (2, 7, 260)
        assert torch.equal(out, torch.zeros_like(out))


def test_shapes_and_errors():
    model = desk_model(260, randomize=False)
    x, t, s, tok = _inputs(1, 7, 260)
    assert model(x, t, s, tok).shape == (1, 7, 260)
    with pytest.raises(ShapeError):
        model(x[..., :10], t, s, tok)
    with pytest.raises(ShapeError):
        model(torch.zeros((1, 2000, 260), dtype=torch.float64), t, s, tok)
    bad = x.clone()
    bad[0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        model(bad, t, s, tok)


def test_rope_relativity():
    model = desk_model(14, randomize=True)
    attn = model.blocks[0].attn
    x = torch.randn((1, 2, 64), dtype=torch.float64)
    a = attn.logits(x, torch.arange(2))
    b = attn.logits(x, torch.arange(2) + 37)
    assert (a - b).abs().max() < 1e-12


def test_rope_is_rotation():
    x = torch.randn((3, 5, 16), dtype=torch.float64)
    y = rope(x, torch.arange(5))
    assert torch.allclose(x.norm(dim=-1), y.norm(dim=-1))


def test_qk_logits_bounded_by_scale():
    model = desk_model(14)
    attn = model.blocks[0].attn
    x = 1e6 * torch.randn((1, 6, 64), dtype=torch.float64)
    logits = attn.logits(x, torch.arange(6))
    assert torch.isfinite(logits).all()
    assert (logits.abs() <= attn.qk_scale.abs()[None, :, None, None] + 1e-9).all()


def test_dropped_conditions_ignore_inputs():
    model = desk_model(14)
    x, t, s, tok = _inputs(2, 5, 14)
    yes = torch.ones(2, dtype=torch.bool)
    a = model(x, t, s, tok, None, yes, yes)
    s2 = torch.randn_like(s)
    tok2 = torch.randint(4, V, tok.shape)
    b = model(x, t, s2, tok2, None, yes, yes)
    assert torch.equal(a, b)
    c = model(x, t, s2, tok2)
    assert not torch.equal(a, c)


def test_deterministic_forward():
    x, t, s, tok = _inputs(2, 5, 14)
    a = desk_model(14, seed=3)(x, t, s, tok)
    b = desk_model(14, seed=3)(x, t, s, tok)
    assert torch.equal(a, b)


def test_gradients_at_zero_gates():
    torch.manual_seed(0)
    model = VelocityDiT(preset("desk", 14, V, dropout=0.0)).double()
    x, t, s, tok = _inputs(2, 5, 14)
    (model(x, t, s, tok) ** 2).sum().backward()
    for name, p in model.named_parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0, name


def test_gradients_scale_with_loss():
    model, loss_fn = fd_problem(__import__("choreoflow.schema", fromlist=["x"]).find_schema("chain3"))
    loss_fn().backward()
    g1 = [p.grad.clone() for p in model.parameters()]
    model.zero_grad()
    (2 * loss_fn()).backward()
    for a, p in zip(g1, model.parameters()):
        assert torch.allclose(2 * a, p.grad, rtol=1e-12, atol=0)


@pytest.mark.parametrize("name", ["chain3", "mhr260"])
def test_finite_difference_full_loss(name):
    from choreoflow.schema import find_schema
    model, loss_fn = fd_problem(find_schema(name))
    res = finite_difference_check(model, loss_fn, n_probe=64, h=1e-6, seed=1)
    assert res["max_rel_error"] < 1e-3


def test_optimizer_examples():
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    m = torch.nn.Module()
    m.p = p
    opt = make_optimizer(m, lr=0.1)
    p.grad = torch.zeros_like(p)
    optimizer_step(m, opt)
    assert p.item() == 1.0
    p.grad = torch.ones_like(p)
    optimizer_step(m, opt)
    assert p.item() < 1.0
    p.grad = torch.tensor([float("inf")], dtype=torch.float64)
    with pytest.raises(NonFiniteError):
        optimizer_step(m, opt, step=7)


def test_ema_closed_form():
    m = torch.nn.Module()
    m.p = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    ema = EMA(m, decay=0.9)
    history = [0.0]
    for k in range(1, 6):
        with torch.no_grad():
            m.p.fill_(float(k))
        ema.update(m)
        history.append(float(k))
    # shadow_k = d^k * p_0 + sum_i (1-d) d^(k-i) p_i
    expected = 0.9 ** 5 * history[0] + sum(0.1 * 0.9 ** (5 - i) * history[i] for i in range(1, 6))
    assert ema.shadow["p"].item() == pytest.approx(expected, rel=1e-14)


def test_forward_single_and_padding():
    model = desk_model(14)
    bundle = ConditioningBundle([5, 6, 7], np.zeros(68), 0.5)
    out = forward_single(model, torch.zeros((4, 14), dtype=torch.float64), bundle)
    assert out.shape == (4, 14)
    tok, mask = pad_tokens([[5, 6], [7]])
    assert tok.tolist() == [[5, 6], [7, 0]] and mask.tolist() == [[True, True], [True, False]]
    with pytest.raises(ValueError):
        ConditioningBundle([1], np.zeros(68), 1.5)


def test_gaussian_skip_exact_for_constant_dims():
    model = desk_model(14, randomize=False)
    mu = torch.linspace(-1, 1, 14, dtype=torch.float64)
    model.set_data_moments(mu, torch.zeros(14))
    noise = torch.randn((1, 3, 14), dtype=torch.float64)
    t = torch.tensor([0.3], dtype=torch.float64)
    x_t = (1 - t) * mu + t * noise
    assert torch.allclose(model.gaussian_velocity(x_t, t), noise - mu, atol=1e-12)


def test_gaussian_skip_variance_shift_collapses_to_mean():
    model = desk_model(6, randomize=False)
    mu = torch.arange(6, dtype=torch.float64)
    model.set_data_moments(mu, torch.ones(6), np.exp(-np.arange(8) / 3.0))
    noise = torch.randn((2, 8, 6), dtype=torch.float64)
    t = torch.tensor([0.2, 0.9], dtype=torch.float64)
    x_t = (1 - t[:, None, None]) * mu + t[:, None, None] * noise
    v = model.gaussian_velocity(x_t, t, torch.zeros(2, 6), torch.full((2, 6), -60.0, dtype=torch.float64))
    assert torch.allclose(v, noise - mu, atol=1e-9)


def test_gaussian_skip_matches_dense_posterior():
    model = desk_model(2, randomize=False)
    r = np.exp(-np.arange(5) / 2.0)
    model.set_data_moments(torch.tensor([0.5, -1.0]), torch.tensor([2.0, 0.3]), r)
    x = torch.randn((1, 5, 2), dtype=torch.float64)
    t = 0.4
    v = model.gaussian_velocity(x, torch.tensor([t], dtype=torch.float64))
    K = torch.as_tensor(r[np.abs(np.subtract.outer(np.arange(5), np.arange(5)))])
    for d, (m, var) in enumerate([(0.5, 2.0), (-1.0, 0.3)]):
        cov_x0 = var * K
        cov_xt = (1 - t) ** 2 * cov_x0 + t * t * torch.eye(5, dtype=torch.float64)
        x0_hat = m + (1 - t) * cov_x0 @ torch.linalg.solve(cov_xt, x[0, :, d] - (1 - t) * m)
        assert torch.allclose(v[0, :, d], (x[0, :, d] - x0_hat) / t, atol=1e-10)
