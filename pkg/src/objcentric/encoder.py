"""Image encoder producing the spatial feature map consumed by the LIM."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig


class BackboneError(ValueError):
    pass


@dataclass
class FeatureMap:
    features: torch.Tensor  # (B, N, C)
    grid_shape: tuple[int, int]
    abs_grid: torch.Tensor  # (N, 2), row-major, x fastest

    @property
    def n_sites(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]


def cell_centers(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    xs = -1 + (2 * torch.arange(w, dtype=dtype) + 1) / w
    ys = -1 + (2 * torch.arange(h, dtype=dtype) + 1) / h
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], -1).reshape(-1, 2)


def _conv(cin, cout, stride):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class TinyConvTrunk(nn.Module):
    """Four conv blocks; the first log2(ds) of them halve the resolution."""

    def __init__(self, hidden: int, downsample: int):
        super().__init__()
        n_down = int(round(math.log2(downsample)))
        if 2 ** n_down != downsample or n_down > 4:
            raise BackboneError(f"downsample_factor must be a power of two <= 16, got {downsample}")
        layers, cin = [], 3
        for i in range(4):
            layers += [_conv(cin, hidden, 2 if i < n_down else 1), nn.ReLU()]
            cin = hidden
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Encoder(nn.Module):
    """Trunk (trainable or frozen) followed by a two-layer conv head."""

    def __init__(self, cfg: BackboneConfig, trunk: nn.Module, frozen: bool):
        super().__init__()
        self.cfg = cfg
        self.trunk = trunk
        self.frozen = frozen
        if frozen:
            for p in self.trunk.parameters():
                p.requires_grad_(False)
        self.head = nn.Sequential(
            _conv(cfg.hidden_channels, cfg.hidden_channels, 1), nn.ReLU(),
            _conv(cfg.hidden_channels, cfg.out_channels, 1),
        )
        self.norm = nn.LayerNorm(cfg.out_channels) if cfg.feature_norm else nn.Identity()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, image: torch.Tensor) -> FeatureMap:
        return extract_features(image, self)


def extract_features(image: torch.Tensor, encoder: Encoder) -> FeatureMap:
    """image: (B, H, W, 3) or (B, 3, H, W) in [0, 1]."""
    if image.dim() == 3:
        image = image[None]
    if image.shape[-1] == 3 and image.shape[1] != 3:
        image = image.permute(0, 3, 1, 2)
    ds = encoder.cfg.downsample_factor
    h, w = image.shape[-2:]
    if h % ds or w % ds:
        raise BackboneError(f"input {h}x{w} not divisible by downsample factor {ds}")
    x = image * 2 - 1
    if encoder.frozen:
        with torch.no_grad():
            x = encoder.trunk(x)
    else:
        x = encoder.trunk(x)
    x = encoder.head(x)
    b, c, hf, wf = x.shape
    feats = encoder.norm(x.permute(0, 2, 3, 1).reshape(b, hf * wf, c))
    if not torch.isfinite(feats).all():
        raise FloatingPointError("non-finite encoder features")
    return FeatureMap(feats, (hf, wf), cell_centers(hf, wf, dtype=feats.dtype))


def load_backbone(cfg: BackboneConfig | dict, source: str | None = None) -> Encoder:
    if isinstance(cfg, dict):
        kind = cfg.get("kind")
        if kind not in ("tiny_conv", "frozen_pretrained"):
            raise BackboneError(f"unknown backbone kind {kind!r}")
        cfg = BackboneConfig.model_validate(cfg)
    trunk = TinyConvTrunk(cfg.hidden_channels, cfg.downsample_factor)
    if cfg.kind == "tiny_conv":
        return Encoder(cfg, trunk, frozen=False)
    source = source or cfg.weights
    if source is None:
        raise BackboneError("frozen_pretrained backbone needs a weight source")
    path = Path(source)
    if not path.is_file():
        raise BackboneError(f"missing backbone weights: {path}")
    from safetensors.torch import load_file

    try:
        state = load_file(str(path))
    except Exception as e:  # safetensors raises several unrelated types
        raise BackboneError(f"corrupt backbone weights {path}: {e}") from e
    state = {k.removeprefix("trunk."): v for k, v in state.items() if not k.startswith("head.")}
    missing, unexpected = trunk.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise BackboneError(f"weights {path} do not match the trunk (missing={missing}, unexpected={unexpected})")
    return Encoder(cfg, trunk, frozen=True)


def load_precomputed_features(path, grid_shape: tuple[int, int], normalize: bool = True) -> FeatureMap:
    """Read an (N, C) float array written in the scenegen array format.

    Lets features from any offline encoder feed the LIM directly; rows are
    sites in row-major order with x fastest.
    """
    from .arrayio import ArrayFormatError, read_array

    try:
        arr = read_array(path)
    except (OSError, ArrayFormatError) as e:
        raise BackboneError(f"cannot read precomputed features {path}: {e}") from e
    h, w = grid_shape
    if arr.ndim != 2 or arr.shape[0] != h * w:
        raise BackboneError(f"feature array {arr.shape} does not match grid {h}x{w}")
    f = torch.from_numpy(arr.astype("float32"))
    if normalize:
        f = F.layer_norm(f, f.shape[-1:])
    return FeatureMap(f[None], (h, w), cell_centers(h, w))
