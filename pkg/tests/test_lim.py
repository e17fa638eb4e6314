import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from objcentric.config import LimConfig
from objcentric.encoder import FeatureMap, cell_centers
from objcentric.lim import LatentInference, QueryState, dedupe_queries, wrap_unit

D = 8


def make_lim(**kw):
    base = dict(n_slots=3, scale_dim=6, iters=3, mlp_hidden=12)
    base.update(kw)
    torch.manual_seed(0)
    return LatentInference(LimConfig(**base), D, 16).double()


def fmap(seed=0, h=4, w=4, batch=1):
    g = torch.Generator().manual_seed(seed)
    return FeatureMap(torch.randn(batch, h * w, D, generator=g, dtype=torch.float64), (h, w),
                      cell_centers(h, w, torch.float64))


def test_zero_projections_give_uniform_attention():
    lim = make_lim()
    with torch.no_grad():
        for lin in (lim.key_bg, lim.key_fg):
            lin.weight.zero_()
    state = lim.initial_state(1)
    a, w, _, _ = lim.attention_step(state, fmap())
    assert torch.allclose(a, torch.full_like(a, 1 / 4))
    assert torch.allclose(w, torch.full_like(w, 1 / 16))


def test_masked_column():
    lim = make_lim()
    state = lim.initial_state(1)
    state = replace(state, valid=torch.tensor([[True, False, True]]))
    a, w, _, _ = lim.attention_step(state, fmap())
    assert (a[..., 2] == 0).all() and (w[..., 2] == 0).all()
    assert torch.allclose(a.sum(-1), torch.ones(1, 16, dtype=a.dtype), atol=1e-12)


def test_simplex_and_column_normalization():
    lim = make_lim()
    for s in range(20):
        fm = fmap(s)
        state = lim.initial_state(1)
        state = replace(state, p_img=torch.rand(1, 3, 2, dtype=torch.float64) * 2 - 1)
        a, w, _, _ = lim.attention_step(state, fm)
        assert (a.sum(-1) - 1).abs().max() <= 1e-6
        assert (w.sum(1) - 1).abs().max() <= 1e-6


def test_non_finite_features_raise():
    lim = make_lim()
    fm = fmap()
    fm.features[0, 3, 0] = float("nan")
    with pytest.raises(FloatingPointError, match="iteration 2"):
        lim.attention_step(lim.initial_state(1), fm, iteration=2)


@pytest.mark.parametrize("dy,dx", [(1, 0), (0, 3), (2, 1), (3, 3)])
def test_toroidal_shift_equivariance(dy, dx):
    h = w = 4
    lim = make_lim(toroidal=True).float()
    with torch.no_grad():
        lim.pos_bg.weight.zero_()
        lim.pos_bg.bias.zero_()
    torch.manual_seed(3)
    f = torch.randn(1, h, w, D)
    grid = cell_centers(h, w)
    p = torch.rand(1, 3, 2) * 2 - 1
    state = replace(lim.initial_state(1, torch.float32), p_img=p)
    a, wn, _, u = lim.attention_step(state, FeatureMap(f.reshape(1, -1, D), (h, w), grid))
    f2 = torch.roll(f, shifts=(dy, dx), dims=(1, 2))
    p2 = wrap_unit(p + torch.tensor([2 * dx / w, 2 * dy / h]))
    a2, wn2, _, u2 = lim.attention_step(replace(state, p_img=p2), FeatureMap(f2.reshape(1, -1, D), (h, w), grid))
    a_shift = torch.roll(a.reshape(1, h, w, -1), shifts=(dy, dx), dims=(1, 2)).reshape(1, h * w, -1)
    assert (a2 - a_shift).abs().max() <= 1e-5
    assert (u2 - u).abs().max() <= 1e-5
    # attention mean moves by 2*delta/grid, minus 2 for the mass that wrapped around
    mean = torch.einsum("bnk,nc->bkc", wn[..., 1:], grid)
    mean2 = torch.einsum("bnk,nc->bkc", wn2[..., 1:], grid)
    wgrid = wn[0, :, 1:].reshape(h, w, -1)
    wrapped_x = wgrid[:, w - dx:].sum((0, 1)) if dx else torch.zeros(3)
    wrapped_y = wgrid[h - dy:].sum((0, 1)) if dy else torch.zeros(3)
    expect = mean[0] + torch.tensor([2 * dx / w, 2 * dy / h]) - 2 * torch.stack([wrapped_x, wrapped_y], -1)
    assert (mean2[0] - expect).abs().max() <= 1e-5


def test_update_queries_contracts():
    lim = make_lim()
    state = lim.initial_state(1)
    u_bg = torch.zeros(1, 1, D, dtype=torch.float64)
    u_fg = torch.randn(1, 3, D, dtype=torch.float64)
    with torch.no_grad():
        for mlp in (lim.t_bg, lim.t_fg):
            mlp.fc2.weight.zero_()
            mlp.fc2.bias.zero_()
    out = lim.update_queries(state, u_bg, torch.zeros_like(u_fg))
    assert torch.equal(out.q_fg, state.q_fg) and torch.equal(out.q_bg, state.q_bg)
    lim = make_lim()
    state = replace(lim.initial_state(1), valid=torch.tensor([[True, False, True]]))
    out = lim.update_queries(state, u_bg, u_fg)
    assert torch.equal(out.q_fg[0, 1], state.q_fg[0, 1])
    qu = state.q_fg + u_fg
    assert torch.allclose(out.q_fg[0, 0] - qu[0, 0], lim.t_fg(qu)[0, 0], atol=1e-12)


def _onehot_w(n_sites, site):
    w = torch.zeros(1, n_sites, 4, dtype=torch.float64)
    w[0, site, 1:] = 1.0
    w[0, :, 0] = 1.0 / n_sites
    return w


def test_momentum_example():
    lim = make_lim(momentum=0.5)
    # cell centers of a 2x2 grid sit at +/-0.5
    fm2 = FeatureMap(torch.zeros(1, 4, D, dtype=torch.float64), (2, 2), cell_centers(2, 2, torch.float64))
    site = int(((fm2.abs_grid - torch.tensor([0.5, 0.5], dtype=torch.float64)).norm(dim=1)).argmin())
    state = lim.initial_state(1)
    p = lim.update_positions(state, _onehot_w(4, site), fm2)
    assert torch.allclose(p, torch.tensor([0.25, 0.25], dtype=torch.float64).expand(1, 3, 2))


def test_momentum_edge_cases():
    fm = fmap()
    p0 = torch.tensor([[[0.3, -0.4], [0.1, 0.2], [-0.5, 0.5]]], dtype=torch.float64)
    state = replace(make_lim().initial_state(1), p_img=p0)
    w = torch.rand(1, 16, 4, dtype=torch.float64)
    w = w / w.sum(1, keepdim=True)
    lim1 = make_lim()
    lim1.cfg = LimConfig.model_construct(**{**lim1.cfg.model_dump(), "momentum": 1.0})  # outside the training range
    assert torch.equal(lim1.update_positions(state, w, fm), p0)
    uniform = torch.full((1, 16, 4), 1 / 16, dtype=torch.float64)
    lim_half = make_lim(momentum=0.5)
    assert torch.allclose(lim_half.update_positions(state, uniform, fm), p0 * 0.5, atol=1e-12)


def test_zero_mass_holds_position(caplog):
    lim = make_lim()
    fm = fmap()
    p0 = torch.full((1, 3, 2), 0.3, dtype=torch.float64)
    state = replace(lim.initial_state(1), p_img=p0)
    w = torch.zeros(1, 16, 4, dtype=torch.float64)
    with caplog.at_level("WARNING"):
        p = lim.update_positions(state, w, fm)
    assert torch.equal(p, p0)
    assert "zero attention mass" in caplog.text


def _brute_dedupe(q, p, valid, sim, dist):
    valid = list(valid)
    k = len(valid)
    for i, j in itertools.combinations(range(k), 2):  # lexicographic = ascending scan
        if not (valid[i] and valid[j]):
            continue
        cos = float(q[i] @ q[j]) / (np.linalg.norm(q[i]) * np.linalg.norm(q[j]))
        if cos > sim and np.linalg.norm(p[i] - p[j]) < dist:
            valid[j] = False
    return valid


def _state(q, p, valid=None):
    k = q.shape[0]
    valid = torch.ones(1, k, dtype=torch.bool) if valid is None else torch.tensor([valid])
    return QueryState(torch.zeros(1, 1, q.shape[1], dtype=torch.float64), torch.tensor(q)[None],
                      torch.tensor(p)[None], valid)


def test_dedupe_examples():
    q = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    p = np.zeros((2, 2))
    assert dedupe_queries(_state(q, p), 0.9, 0.1).tolist() == [[True, False]]
    q = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert dedupe_queries(_state(q, p), 0.9, 0.1).tolist() == [[True, True]]
    # chain: a~b, b~c, a !~ c
    q = np.array([[1.0, 0.0], [math.cos(0.35), math.sin(0.35)], [math.cos(0.7), math.sin(0.7)]])
    p = np.zeros((3, 2))
    got = dedupe_queries(_state(q, p), math.cos(0.4), 0.1).tolist()[0]
    assert got == [True, False, True] == _brute_dedupe(q, p, [True] * 3, math.cos(0.4), 0.1)


def test_dedupe_brute_force_100_sets():
    rng = np.random.default_rng(0)
    for trial in range(100):
        k = int(rng.integers(2, 7))
        base = rng.normal(size=(2, 4))
        q = base[rng.integers(0, 2, size=k)] + 0.2 * rng.normal(size=(k, 4))
        p = rng.uniform(-0.1, 0.1, size=(k, 2))
        valid = list(rng.random(k) > 0.15)
        got = dedupe_queries(_state(q, p, valid), 0.9, 0.1).tolist()[0]
        assert got == _brute_dedupe(q, p, valid, 0.9, 0.1), trial


def test_position_bias_bounds():
    lim = make_lim()
    for _ in range(50):
        w = torch.rand(1, 16, 4, dtype=torch.float64) * 100
        assert lim.position_bias(w).abs().max() <= 0.2
    lim0 = make_lim(bias_scale=0.0)
    assert (lim0.position_bias(torch.rand(1, 16, 4, dtype=torch.float64)) == 0).all()
    with torch.no_grad():
        lim.pos_bias.weight.zero_()
        lim.pos_bias.bias.zero_()
    assert (lim.position_bias(torch.rand(1, 16, 4, dtype=torch.float64)) == 0).all()


def test_single_iteration_unrolls():
    lim = make_lim(iters=1, momentum=0.0, bias_scale=0.0)
    fm = fmap(5)
    out = lim(fm)
    _, w, _, _ = lim.attention_step(lim.initial_state(1), fm)
    mean = torch.einsum("bnk,nc->bkc", w[..., 1:], fm.abs_grid)
    assert torch.allclose(out.p_img, mean.clamp(-1, 1), atol=1e-12)


def test_latent_shapes_and_validity():
    lim = make_lim()
    out, trace = lim(fmap(batch=2), return_trace=True)
    assert out.z_fg.shape == (2, 3, 2 * D) and out.z_bg.shape == (2, 1, 2 * D)
    assert out.p_img.abs().max() <= 1
    for a, b in zip(trace, trace[1:]):
        assert not (b.valid & ~a.valid).any()


def test_invalid_slots_zero_latent():
    lim = make_lim(n_slots=2)
    with torch.no_grad():
        lim.q_fg_init[1] = lim.q_fg_init[0]
    out = lim(fmap())
    assert out.valid.tolist() == [[True, False]]
    assert (out.z_fg[0, 1] == 0).all()


def test_gradient_wrt_query_init():
    lim = make_lim()
    fm = fmap(2)
    g = torch.Generator().manual_seed(1)
    probe = torch.randn(1, 3, 2 * D, generator=g, dtype=torch.float64)
    probe_p = torch.randn(1, 3, 2, generator=g, dtype=torch.float64)

    def readout():
        out = lim(fm)
        return (out.z_fg * probe).sum() + (out.p_img * probe_p).sum() + out.z_bg.sum()

    assert torch.autograd.gradcheck(lambda q: _with_init(lim, q, readout), (lim.q_fg_init.detach().clone().requires_grad_(),),
                                    eps=1e-6, atol=1e-6, rtol=1e-4)


def _with_init(lim, q, fn):
    saved = lim.q_fg_init
    try:
        del lim.q_fg_init
        lim.q_fg_init = q
        return fn()
    finally:
        lim.q_fg_init = saved
