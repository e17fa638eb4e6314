import itertools

import numpy as np
import pytest
import torch

from objcentric.config import LossWeights, PerceptualConfig
from objcentric.losses import (LossComponents, PerceptualNet, combine, depth_ranking_loss, loss_total,
                               occlusion_loss, perceptual_loss, recon_loss, sample_pairs)


def test_weighted_sum_example():
    c = LossComponents(*(torch.tensor(v, dtype=torch.float64) for v in (0.1, 1.0, 0.01, 0.02)))
    assert abs(float(combine(c, LossWeights())) - 0.123) < 1e-12
    assert float(combine(c, LossWeights(perc=0, depth=0, occ=0))) == pytest.approx(0.1)


def test_recon():
    a = torch.rand(6, 5, 3, generator=torch.Generator().manual_seed(0))
    assert float(recon_loss(a, a)) == 0.0
    assert float(recon_loss(a, (a + 0.1))) == pytest.approx(0.01, rel=1e-5)
    b = torch.rand(6, 5, 3, generator=torch.Generator().manual_seed(1))
    naive = sum((float(a[i, j, k]) - float(b[i, j, k])) ** 2 for i in range(6) for j in range(5) for k in range(3)) / 90
    assert float(recon_loss(a, b)) == pytest.approx(naive, rel=1e-6)
    with pytest.raises(ValueError):
        recon_loss(a, b[:5])


def test_perceptual():
    net = PerceptualNet(PerceptualConfig(channels=(4, 4)))
    x = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(0))
    assert float(perceptual_loss(x, x, net)) == 0.0
    y = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(1))
    assert float(perceptual_loss(x, y, net)) == pytest.approx(float(perceptual_loss(y, x, net)), rel=1e-6)
    # same mean colour, different texture
    flat = torch.full((16, 16, 3), 0.5)
    checker = torch.from_numpy((np.indices((16, 16)).sum(0) % 2).astype(np.float32))[..., None].expand(16, 16, 3)
    assert float(perceptual_loss(flat, checker, net)) > 0
    with pytest.raises(ValueError):
        perceptual_loss(x[:4, :4], y[:4, :4], net)


def test_depth_ranking_examples():
    g = torch.Generator().manual_seed(3)
    ref = torch.rand(8, 8, generator=g) * 4 + 2
    pairs = sample_pairs(64, 200, torch.Generator().manual_seed(4))
    assert float(depth_ranking_loss(ref, ref, pairs, margin=0.0)) == 0.0
    assert float(depth_ranking_loss(torch.exp(ref) + 3 * ref, ref, pairs, margin=0.0)) == 0.0

    pred = -ref
    got = float(depth_ranking_loss(pred, ref, pairs, margin=1e-4))
    terms = []
    p, r = pred.reshape(-1).tolist(), ref.reshape(-1).tolist()
    for a, b in pairs.tolist():
        if r[a] == r[b]:
            continue
        near, far = (a, b) if r[a] < r[b] else (b, a)
        terms.append(max(0.0, p[near] - p[far] + 1e-4))
    assert all(t > 0 for t in terms)
    assert got == pytest.approx(sum(terms) / len(terms), rel=1e-5)


def test_depth_rank_invariance_over_all_pairs():
    ref = torch.tensor([3.0, 1.0, 2.0, 5.0])
    pairs = torch.tensor(list(itertools.product(range(4), repeat=2)))
    for f in (lambda x: x, lambda x: x ** 3, lambda x: torch.log(x) + 10):
        assert float(depth_ranking_loss(f(ref), ref, pairs, margin=0.0)) == 0.0


def test_occlusion():
    assert float(occlusion_loss(torch.zeros(10))) == 0.0
    assert float(occlusion_loss(torch.full((7,), 0.25))) == pytest.approx(0.25)
    assert float(occlusion_loss(torch.zeros(0))) == 0.0


def test_perfect_render_leaves_only_perc_floor():
    net = PerceptualNet(PerceptualConfig(channels=(4, 4)))
    rgb = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(0))
    depth = torch.rand(8, 8, generator=torch.Generator().manual_seed(1)) + 2
    total, comps = loss_total([(rgb, depth)], [rgb], [depth], [sample_pairs(64, 32)], torch.zeros(5), LossWeights(), net)
    assert comps.as_floats() == {"recon": 0.0, "perc": 0.0, "depth": 0.0, "occ": 0.0}
    assert float(total) == 0.0
    with pytest.raises(ValueError):
        loss_total([(rgb, depth)], [rgb, rgb], [depth], [None], torch.zeros(1), LossWeights(), net)
