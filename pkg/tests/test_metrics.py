import itertools
import math

import numpy as np
import pytest
import torch

from objcentric.config import PerceptualConfig
from objcentric.lim import SceneLatents
from objcentric.losses import PerceptualNet
from objcentric.metrics import (NO_SLOT, PSNR_CAP, EditError, EditSpec, MetricsReport, SegmentationPair,
                                adjusted_rand_index, apply_edit, ari, iou, is_undefined, perceptual_distance, psnr,
                                select_slot_by_mask, silhouette_centroid, ssim, ssim_window)


def brute_force_ari(a, b):
    """Pair-counting definition, independent of the contingency shortcut."""
    n = len(a)
    pairs = list(itertools.combinations(range(n), 2))
    if not pairs:
        return 1.0
    same_a = np.array([a[i] == a[j] for i, j in pairs])
    same_b = np.array([b[i] == b[j] for i, j in pairs])
    index = float(np.sum(same_a & same_b))
    sa, sb, total = float(same_a.sum()), float(same_b.sum()), float(len(pairs))
    expected = sa * sb / total
    maximum = 0.5 * (sa + sb)
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


def partitions(n, groups=3):
    """Canonical labelings (restricted growth strings): one per set partition."""
    out = []

    def rec(prefix, top):
        if len(prefix) == n:
            out.append(tuple(prefix))
            return
        for g in range(min(top + 2, groups)):
            rec(prefix + [g], max(top, g))

    rec([0], 0)
    return out


def test_partition_enumeration():
    assert [len(partitions(n)) for n in range(1, 8)] == [1, 2, 5, 14, 41, 122, 365]


def test_ari_matches_pair_counting_on_every_partition_pair():
    # ARI depends on the labelings only through their partitions (relabeling
    # invariance is checked separately), so this covers every labeling of
    # up to 6 elements into at most 3 groups
    checked = 0
    for n in range(1, 7):
        parts = partitions(n)
        for a, b in itertools.product(parts, parts):
            got = adjusted_rand_index(np.array(a), np.array(b))
            assert abs(got - brute_force_ari(a, b)) < 1e-12, (a, b)
            checked += 1
    assert checked == sum(len(partitions(n)) ** 2 for n in range(1, 7))


def test_ari_permutation_invariance():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.integers(0, 3, 30), rng.integers(0, 4, 30)
        perm = rng.permutation(4)
        assert adjusted_rand_index(a, perm[b]) == pytest.approx(adjusted_rand_index(a, b), abs=1e-12)
        assert adjusted_rand_index(b, a) == pytest.approx(adjusted_rand_index(a, b), abs=1e-12)


def test_ari_views_and_sentinel():
    gt = np.array([[0, 0, 1], [1, 2, 2]])
    pred = np.array([[3, 3, 1], [1, 0, 0]])
    assert ari(SegmentationPair(pred, gt)) == pytest.approx(1.0)
    assert ari(SegmentationPair(pred, gt), foreground_only=True) == pytest.approx(1.0)
    assert is_undefined(ari(SegmentationPair(pred, np.zeros_like(gt)), foreground_only=True))
    with pytest.raises(ValueError):
        SegmentationPair(pred, gt[:1])
    with pytest.raises(ValueError):
        SegmentationPair(-pred, gt)


def test_psnr():
    x = np.random.default_rng(1).uniform(0, 0.9, (8, 8, 3))
    assert psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-9)
    assert psnr(x, x) == PSNR_CAP
    y = np.random.default_rng(2).uniform(0, 1, (8, 8, 3))
    assert psnr(x, y) == psnr(y, x)


def naive_ssim(x, y, w):
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    k = w.shape[0]
    vals = []
    for ch in range(x.shape[2]):
        for i in range(x.shape[0] - k + 1):
            for j in range(x.shape[1] - k + 1):
                px, py = x[i:i + k, j:j + k, ch], y[i:i + k, j:j + k, ch]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * px * px).sum() - mx * mx
                vy = (w * py * py).sum() - my * my
                cxy = (w * px * py).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim():
    rng = np.random.default_rng(3)
    x, y = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    for kind, size in (("gaussian", 5), ("uniform", 3), ("gaussian", 8)):
        w = ssim_window(kind, size)
        assert ssim(x, y, window=kind, size=size) == pytest.approx(naive_ssim(x, y, w), abs=1e-10)


def test_perceptual_distance():
    net = PerceptualNet(PerceptualConfig(channels=(4, 4)))
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    assert perceptual_distance(x, x, net) == 0.0
    for _ in range(100):
        a, b = rng.uniform(size=(2, 16, 16, 3)).astype(np.float32)
        assert perceptual_distance(a, b, net) >= 0.0
    assert net.label == "perc-dist"


def _latents(k=3):
    g = torch.Generator().manual_seed(0)
    return SceneLatents(torch.randn(1, 1, 4, generator=g), torch.randn(1, k, 4, generator=g),
                        torch.zeros(1, k, 2), torch.tensor([[True, True, False]]), torch.randn(1, k, 3, generator=g))


def test_edits():
    lat = _latents()
    moved = apply_edit(lat, EditSpec("translate", 1, (0.2, -0.1, 0.0)))
    assert torch.allclose(moved.p_wd[0, 1], lat.p_wd[0, 1] + torch.tensor([0.2, -0.1, 0.0]))
    assert torch.equal(moved.p_wd[0, 0], lat.p_wd[0, 0]) and torch.equal(moved.z_fg, lat.z_fg)
    gone = apply_edit(lat, EditSpec("remove", 0))
    assert gone.valid.tolist() == [[False, True, False]]
    assert torch.equal(gone.p_wd, lat.p_wd) and torch.equal(gone.z_bg, lat.z_bg)
    assert lat.valid.tolist() == [[True, True, False]]  # input untouched
    for bad in (EditSpec("remove", 2), EditSpec("remove", 5), EditSpec("scale", 0)):
        with pytest.raises(EditError):
            apply_edit(lat, bad)
    spec = EditSpec("translate", 1, (0.5, 0.0, 0.0))
    assert EditSpec.from_dict(spec.to_dict()) == EditSpec("translate", 1, (0.5, 0.0, 0.0))


def test_slot_selection_and_iou():
    seg = np.zeros((6, 6), int)
    seg[1:3, 1:3] = 1
    seg[3:6, 3:6] = 3
    gt = seg == 3
    assert select_slot_by_mask(seg, gt, 3) == 2
    assert select_slot_by_mask(np.zeros((6, 6), int), gt, 3) == NO_SLOT
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b = rng.random((5, 5)) > 0.5, rng.random((5, 5)) > 0.5
        sa = {tuple(p) for p in np.argwhere(a)}
        sb = {tuple(p) for p in np.argwhere(b)}
        expect = len(sa & sb) / len(sa | sb) if sa | sb else 0.0
        assert iou(a, b) == pytest.approx(expect)
    assert silhouette_centroid(seg == 3).tolist() == [4.0, 4.0]
    assert silhouette_centroid(np.zeros((3, 3), bool)) is None


def test_report_means_skip_sentinels():
    rep = MetricsReport()
    nan = float("nan")
    rep.add(scene=0, view=0, role="input", PSNR=20.0, SSIM=0.5, **{"perc-dist": 0.1}, ARI=0.5, **{"FG-ARI": nan}, **{"NV-ARI": nan})
    rep.add(scene=1, view=0, role="input", PSNR=30.0, SSIM=0.7, **{"perc-dist": 0.3}, ARI=0.7, **{"FG-ARI": 0.9}, **{"NV-ARI": nan})
    rep.add(scene=1, view=1, role="novel", PSNR=25.0, SSIM=0.6, **{"perc-dist": 0.2}, ARI=nan, **{"FG-ARI": nan}, **{"NV-ARI": 0.4})
    m = rep.means("input")
    assert m["FG-ARI"] == (0.9, 1) and m["PSNR"] == (25.0, 2)
    s = rep.summary()
    assert s["PSNR"] == 25.0 and s["NV-ARI"] == 0.4 and s["ARI"] == pytest.approx(0.6)
    text = rep.to_text()
    assert text.splitlines()[0].split("\t")[:3] == ["scene", "view", "role"]
    assert "n/a" in text and text == rep.to_text()
