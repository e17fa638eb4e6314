"""Evaluation metrics and scene-editing operators."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .lim import SceneLatents
from .losses import PerceptualNet, perceptual_loss

UNDEFINED = float("nan")
"""Sentinel for scores over an empty pixel set; averages skip it."""

NO_SLOT = -1
PSNR_CAP = 99.0


def is_undefined(x: float) -> bool:
    return isinstance(x, float) and math.isnan(x)


# -- segmentation ------------------------------------------------------------

@dataclass
class SegmentationPair:
    pred: np.ndarray
    gt: np.ndarray
    view_role: Literal["input", "novel"] = "input"

    def __post_init__(self):
        self.pred = np.asarray(self.pred)
        self.gt = np.asarray(self.gt)
        if self.pred.shape != self.gt.shape:
            raise ValueError(f"label maps differ in shape: {self.pred.shape} vs {self.gt.shape}")
        if (self.pred < 0).any() or (self.gt < 0).any():
            raise ValueError("labels must be nonnegative")


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def adjusted_rand_index(pred: np.ndarray, gt: np.ndarray) -> float:
    """Adjusted-for-chance Rand index from the contingency table.

    When the expected and maximum index coincide (both labelings put all
    points in one cluster, or each point in its own) the score is 1.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    n = pred.size
    if n == 0:
        return UNDEFINED
    _, pi = np.unique(pred, return_inverse=True)
    _, gi = np.unique(gt, return_inverse=True)
    table = np.zeros((pi.max() + 1, gi.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, gi), 1)
    index = _comb2(table).sum()
    a = _comb2(table.sum(1)).sum()
    b = _comb2(table.sum(0)).sum()
    expected = a * b / _comb2(n) if n > 1 else 0.0
    maximum = 0.5 * (a + b)
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def ari(pair: SegmentationPair, foreground_only: bool = False) -> float:
    pred, gt = pair.pred.reshape(-1), pair.gt.reshape(-1)
    if foreground_only:
        keep = gt > 0
        pred, gt = pred[keep], gt[keep]
    return adjusted_rand_index(pred, gt)


# -- image quality -----------------------------------------------------------

def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(pred, target, cap: float = PSNR_CAP) -> float:
    p, t = _np(pred), _np(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    mse = float(np.mean((p - t) ** 2))
    if mse <= 10 ** (-cap / 10):
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


SSIM_K1 = 0.01
SSIM_K2 = 0.03


def ssim_window(kind: str = "gaussian", size: int = 11, sigma: float = 1.5) -> np.ndarray:
    if kind == "uniform":
        w = np.ones((size, size))
    elif kind == "gaussian":
        ax = np.arange(size) - (size - 1) / 2.0
        g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
        w = np.outer(g, g)
    else:
        raise ValueError(f"unknown ssim window {kind!r}")
    return w / w.sum()


def ssim(pred, target, window: str | np.ndarray = "gaussian", size: int = 11, sigma: float = 1.5,
         data_range: float = 1.0) -> float:
    """Mean structural similarity over valid window placements.

    Constants C1 = (0.01 L)^2 and C2 = (0.03 L)^2 with L the data range.
    Colour images are scored per channel and averaged. The window is
    shrunk to the image size when the image is smaller.
    """
    x, y = _np(pred), _np(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    size = min(size, x.shape[0], x.shape[1])
    w = window if isinstance(window, np.ndarray) else ssim_window(window, size, sigma)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    k = torch.from_numpy(w)[None, None]
    xt = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[:, None]
    yt = torch.from_numpy(np.ascontiguousarray(y.transpose(2, 0, 1)))[:, None]
    filt = lambda a: F.conv2d(a, k)
    mx, my = filt(xt), filt(yt)
    sxx = filt(xt * xt) - mx ** 2
    syy = filt(yt * yt) - my ** 2
    sxy = filt(xt * yt) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    return float(s.mean())


def perceptual_distance(pred, target, perc_net: PerceptualNet) -> float:
    to_t = lambda a: a.detach().float() if isinstance(a, torch.Tensor) else torch.tensor(np.asarray(a), dtype=torch.float32)
    with torch.no_grad():
        return float(perceptual_loss(to_t(pred), to_t(target), perc_net))


# -- editing -----------------------------------------------------------------

@dataclass
class EditSpec:
    op: Literal["translate", "remove"]
    slot: int
    delta: Sequence[float] = (0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return {"op": self.op, "slot": self.slot, "delta": [float(v) for v in self.delta]}

    @classmethod
    def from_dict(cls, d: dict) -> "EditSpec":
        return cls(d["op"], int(d["slot"]), tuple(d.get("delta", (0.0, 0.0, 0.0))))


class EditError(ValueError):
    pass


def apply_edit(lat: SceneLatents, edit: EditSpec, b: int = 0) -> SceneLatents:
    """Return edited latents; only the target slot of scene ``b`` changes."""
    k = lat.n_slots
    if not 0 <= edit.slot < k or not bool(lat.valid[b, edit.slot]):
        raise EditError(f"slot {edit.slot} is not a valid slot (K={k})")
    p_wd, valid = lat.p_wd.clone(), lat.valid.clone()
    if edit.op == "translate":
        delta = torch.as_tensor(edit.delta, dtype=p_wd.dtype)
        p_wd[b, edit.slot] = p_wd[b, edit.slot] + delta
    elif edit.op == "remove":
        valid[b, edit.slot] = False
    else:
        raise EditError(f"unknown edit op {edit.op!r}")
    return SceneLatents(lat.z_bg.clone(), lat.z_fg.clone(), lat.p_img.clone(), valid, p_wd)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def select_slot_by_mask(seg, gt_mask, n_slots: int | None = None) -> int:
    """Foreground slot (0-based; label slot+1 in ``seg``) with the highest IoU.

    Ties go to the lowest index; NO_SLOT when no slot overlaps the mask.
    seg may be a label map or anything with a ``.seg`` attribute.
    """
    seg = getattr(seg, "seg", seg)
    seg = _np(seg).astype(np.int64)
    gt = np.asarray(gt_mask, bool)
    k = n_slots if n_slots is not None else int(seg.max())
    best, best_iou = NO_SLOT, 0.0
    for s in range(k):
        v = iou(seg == s + 1, gt)
        if v > best_iou:
            best, best_iou = s, v
    return best


def silhouette_centroid(mask) -> np.ndarray | None:
    """(col, row) centroid in pixels of a boolean mask; None when empty."""
    m = np.asarray(mask, bool)
    if not m.any():
        return None
    rows, cols = np.nonzero(m)
    return np.array([cols.mean(), rows.mean()])


# -- reporting ---------------------------------------------------------------

REPORT_COLUMNS = ("scene", "view", "role", "PSNR", "SSIM", "perc-dist", "ARI", "FG-ARI", "NV-ARI")
METRIC_COLUMNS = REPORT_COLUMNS[3:]


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    perc_label: str = "perc-dist"

    def add(self, **row):
        self.rows.append(row)

    def columns(self):
        return tuple(self.perc_label if c == "perc-dist" else c for c in REPORT_COLUMNS)

    def means(self, role: str | None = None) -> dict:
        out = {}
        for c in METRIC_COLUMNS:
            vals = [r[c] for r in self.rows if c in r and not is_undefined(r[c]) and (role is None or r["role"] == role)]
            out[c] = (float(np.mean(vals)) if vals else UNDEFINED, len(vals))
        return out

    def summary(self) -> dict:
        """Headline numbers: input-view ARI/FG-ARI, novel-view PSNR/SSIM/perceptual/NV-ARI."""
        inp, nov = self.means("input"), self.means("novel")
        return {"ARI": inp["ARI"][0], "FG-ARI": inp["FG-ARI"][0], "NV-ARI": nov["NV-ARI"][0],
                "PSNR": nov["PSNR"][0], "SSIM": nov["SSIM"][0], self.perc_label: nov["perc-dist"][0],
                "input-PSNR": inp["PSNR"][0]}

    def to_text(self) -> str:
        fmt = lambda v: "n/a" if v is None or is_undefined(v) else (f"{v:.4f}" if isinstance(v, float) else str(v))
        lines = ["\t".join(self.columns())]
        for r in self.rows:
            lines.append("\t".join(fmt(r.get(c)) for c in REPORT_COLUMNS))
        for role in ("input", "novel", None):
            m = self.means(role)
            name = f"mean[{role or 'all'}]"
            lines.append("\t".join([name, "-", "-"] + [f"{fmt(m[c][0])} (n={m[c][1]})" for c in METRIC_COLUMNS]))
        return "\n".join(lines) + "\n"
