"""Training objectives: reconstruction, perceptual, depth ranking and
background occlusion terms plus their weighted total."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights, PerceptualConfig


def recon_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


class PerceptualNet(nn.Module):
    """Fixed multi-layer conv feature extractor.

    Default weights are random but seeded, so the loss is a deterministic
    function of the config. Parameters never receive gradients.
    """

    min_size = 8

    def __init__(self, cfg: PerceptualConfig):
        super().__init__()
        self.cfg = cfg
        layers, cin = [], 3
        for i, c in enumerate(cfg.channels):
            layers.append(nn.Conv2d(cin, c, 3, stride=1 if i == 0 else 2, padding=1))
            cin = c
        self.layers = nn.ModuleList(layers)
        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.no_grad():
            for conv in self.layers:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        if cfg.kind == "pretrained":
            if cfg.weights is None:
                raise ValueError("pretrained perceptual net needs a weights file")
            from safetensors.torch import load_file

            self.load_state_dict(load_file(cfg.weights))
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def label(self) -> str:
        return "lpips" if self.cfg.kind == "pretrained" else "perc-dist"

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """img (B, H, W, 3) or (H, W, 3) in [0, 1]."""
        if img.dim() == 3:
            img = img[None]
        if min(img.shape[1:3]) < self.min_size:
            raise ValueError(f"image {tuple(img.shape[1:3])} below perceptual minimum {self.min_size}")
        x = img.permute(0, 3, 1, 2) * 2 - 1
        feats = []
        for conv in self.layers:
            x = F.relu(conv(x.to(conv.weight.dtype)))
            feats.append(x)
        return feats


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, net: PerceptualNet) -> torch.Tensor:
    fp, ft = net.features(pred), net.features(target)
    return sum(((a - b) ** 2).mean() for a, b in zip(fp, ft))


def sample_pairs(n_pixels: int, n_pairs: int, generator: torch.Generator | None = None) -> torch.Tensor:
    return torch.randint(0, n_pixels, (n_pairs, 2), generator=generator)


def depth_ranking_loss(pred_depth: torch.Tensor, ref_depth: torch.Tensor, pairs: torch.Tensor,
                       margin: float = 1e-4) -> torch.Tensor:
    """Hinge on every sampled pair whose reference order is strict.

    Pairs are oriented so the reference-nearer pixel comes first; ties in
    the reference are skipped.
    """
    pd, rd = pred_depth.reshape(-1), ref_depth.reshape(-1)
    a, b = pairs[:, 0], pairs[:, 1]
    ra, rb = rd[a], rd[b]
    keep = ra != rb
    near = torch.where(ra < rb, a, b)[keep]
    far = torch.where(ra < rb, b, a)[keep]
    if near.numel() == 0:
        return pd.sum() * 0.0
    return F.relu(pd[near] - pd[far] + margin).mean()


def occlusion_loss(bg_sigma_near: torch.Tensor) -> torch.Tensor:
    """Mean background density over samples flagged as near the camera."""
    if bg_sigma_near.numel() == 0:
        return bg_sigma_near.sum() * 0.0
    return bg_sigma_near.mean()


@dataclass
class LossComponents:
    recon: torch.Tensor
    perc: torch.Tensor
    depth: torch.Tensor
    occ: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("recon", "perc", "depth", "occ")}


def combine(c: LossComponents, w: LossWeights, perc_on: bool = True) -> torch.Tensor:
    perc_w = w.perc if perc_on else 0.0
    return c.recon + perc_w * c.perc + w.depth * c.depth + w.occ * c.occ


def loss_total(renders, targets, ref_depths, pair_sets, bg_near, weights: LossWeights, perc_net: PerceptualNet | None,
               perc_on: bool = True, margin: float = 1e-4):
    """Weighted objective over aligned per-view renders.

    renders: list of (rgb (H, W, 3), depth (H, W)); targets: list of rgb;
    ref_depths: list of oracle depth maps; pair_sets: pixel pairs per view;
    bg_near: flattened flagged background densities.
    """
    if not (len(renders) == len(targets) == len(ref_depths)):
        raise ValueError("renders, targets and depth references must align by view")
    recon = torch.stack([recon_loss(r[0], t) for r, t in zip(renders, targets)]).mean()
    if perc_on and perc_net is not None:
        perc = torch.stack([perceptual_loss(r[0], t, perc_net) for r, t in zip(renders, targets)]).mean()
    else:
        perc = recon.new_zeros(())
    depth = torch.stack([depth_ranking_loss(r[1], d, p, margin)
                         for r, d, p in zip(renders, ref_depths, pair_sets)]).mean()
    occ = occlusion_loss(bg_near)
    comps = LossComponents(recon, perc, depth, occ)
    return combine(comps, weights, perc_on), comps
