"""Run configuration.

Every tunable lives here. Models reject unknown keys so that a typo in a
config file fails loudly instead of silently falling back to a default.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    """Raised when a config document fails validation.

    ``offending`` lists every bad key path (dotted), not just the first.
    """

    def __init__(self, message: str, offending: list[str] | None = None):
        super().__init__(message)
        self.offending = offending or []


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False, validate_assignment=True)


class GeneratorConfig(_Strict):
    image_size: int = 32
    fov_deg: float = 36.0
    n_views: int = 4
    cam_radius: float = 4.5
    cam_elevation_deg: float = 50.0
    scene_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    count_range: tuple[int, int] = (2, 3)
    size_range: tuple[float, float] = (0.25, 0.4)
    shapes: list[Literal["sphere", "cube", "cylinder"]] = ["sphere", "cube", "cylinder"]
    placement_half_extent: float = 0.9
    overlap_fraction: float = 0.0
    max_attempts: int = 1000
    n_ground_textures: int = 6
    light_dir: tuple[float, float, float] = (0.4, 0.3, 1.0)
    ambient: float = 0.4
    diffuse: float = 0.6
    shadows: bool = False
    seed: int = 0
    n_test: int = 0

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.count_range
        if not 1 <= lo <= hi:
            raise ValueError("count_range must satisfy 1 <= lo <= hi")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ValueError("size_range must be positive and ordered")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must be in [0, 1)")
        return self

    @property
    def focal(self) -> float:
        return 0.5 * self.image_size / math.tan(math.radians(self.fov_deg) / 2)


class BackboneConfig(_Strict):
    kind: Literal["tiny_conv", "frozen_pretrained"] = "tiny_conv"
    downsample_factor: int = 4
    out_channels: int = 64
    hidden_channels: int = 64
    weights: Optional[str] = None
    feature_norm: bool = True


class LimConfig(_Strict):
    n_slots: int = Field(4, ge=1)
    scale_dim: int = Field(64, gt=0)
    iters: int = Field(6, ge=1)
    momentum: float = Field(0.5, ge=0.0, lt=1.0)
    bias_scale: float = Field(0.2, ge=0.0)
    mlp_hidden: int = 128
    sim_threshold: float = 0.9
    dist_threshold: float = 0.1
    query_norm: bool = True
    toroidal: bool = False


class LiftSettings(_Strict):
    mode: Literal["plane", "depth"] = "plane"
    plane_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    plane_offset: float = 0.0


class DecoderConfig(_Strict):
    hidden: int = 64
    n_layers: int = 3
    n_freq_fg: int = 5
    n_freq_bg: int = 5
    activation: Literal["relu", "softplus", "silu", "tanh"] = "relu"
    density_act: Literal["relu", "softplus"] = "softplus"
    # unit-norm latent (LayerNorm without affine, scaled by 1/sqrt(dim)) on decoder input
    latent_norm: bool = True
    fg_density_bias: float = -1.0
    # foreground raw density gets -|x|^2 / (2 s^2) in the slot frame (None: off)
    fg_radial_scale: Optional[float] = Field(None, gt=0.0)


class SamplingConfig(_Strict):
    n_coarse: int = Field(64, ge=2)
    n_fine: int = Field(256, ge=2)
    near: float = 2.0
    far: float = 7.5
    keep_radius: Optional[float] = None
    guard_band: float = 0.3
    locality_bbox: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-1.4, -1.4, -0.05),
        (1.4, 1.4, 1.0),
    )
    # background density is zeroed above this height over the lift plane (None: no cap)
    bg_max_height: Optional[float] = None
    object_centric_enabled: bool = False
    jitter: bool = True
    occ_near_fraction: float = 0.1
    density_map: Literal["composite", "isolated"] = "composite"
    chunk_rays: int = 4096

    @model_validator(mode="after")
    def _check(self):
        if not 0 < self.near < self.far:
            raise ValueError("require 0 < near < far")
        lo, hi = self.locality_bbox
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError("locality_bbox min must not exceed max")
        return self

    @property
    def resolved_keep_radius(self) -> float:
        if self.keep_radius is not None:
            return self.keep_radius
        lo, hi = self.locality_bbox
        diag = math.sqrt(sum((b - a) ** 2 for a, b in zip(lo, hi)))
        return diag / 4.0


class LossWeights(_Strict):
    perc: float = Field(0.006, ge=0.0)
    depth: float = Field(1.5, ge=0.0)
    occ: float = Field(0.1, ge=0.0)
    # rank the opacity-normalized depth sum(w t) / sum(w); the raw sum can be
    # "ranked" by dimming rays instead of moving surfaces
    depth_normalized: bool = True


class PerceptualConfig(_Strict):
    kind: Literal["random", "pretrained"] = "random"
    seed: int = 1234
    channels: tuple[int, ...] = (16, 32, 32)
    weights: Optional[str] = None


class StageConfig(_Strict):
    stage: Literal["prior", "full"] = "prior"
    epochs: int = Field(20, ge=1)
    lr_init: Optional[float] = None
    lr_half_epochs: float = 50.0
    perc_epoch: int = 10
    object_centric_epoch: int = 20
    fine_epoch: Optional[int] = None
    coarse_res: int = 16
    batch_scenes: int = 1
    depth_pairs: int = 512
    depth_margin: float = 1e-4
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    max_steps: Optional[int] = None
    log_every: int = 1
    reinit_background: bool = False

    @model_validator(mode="after")
    def _check(self):
        marks = [self.perc_epoch, self.object_centric_epoch]
        if self.fine_epoch is not None:
            marks.append(self.fine_epoch)
        for m in marks:
            if m < 0 or m > self.epochs:
                raise ValueError(f"schedule epochs must lie in [0, epochs={self.epochs}], got {m}")
        if any(a > b for a, b in zip(marks, marks[1:])):
            raise ValueError("schedule epochs must be nondecreasing: perc_epoch <= object_centric_epoch <= fine_epoch")
        return self

    @property
    def lr(self) -> float:
        if self.lr_init is not None:
            return self.lr_init
        return 3e-4 if self.stage == "prior" else 1.5e-4


class TTOConfig(_Strict):
    steps: int = 50
    lr: float = 1e-2
    tune_decoders: bool = False
    seed: int = 0


class RunConfig(_Strict):
    generator: GeneratorConfig = GeneratorConfig()
    backbone: BackboneConfig = BackboneConfig()
    lim: LimConfig = LimConfig()
    lift: LiftSettings = LiftSettings()
    decoder: DecoderConfig = DecoderConfig()
    sampling: SamplingConfig = SamplingConfig()
    loss: LossWeights = LossWeights()
    perceptual: PerceptualConfig = PerceptualConfig()
    train: StageConfig = StageConfig()
    tto: TTOConfig = TTOConfig()
    dataset: Optional[str] = None
    seed: int = 0
    num_threads: int = 1

    @property
    def latent_dim(self) -> int:
        return self.backbone.out_channels

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


def _pydantic_paths(err: ValidationError) -> list[str]:
    return [".".join(str(p) for p in e["loc"]) for e in err.errors()]


def parse_config(doc: dict, model=RunConfig):
    try:
        return model.model_validate(doc)
    except ValidationError as err:
        paths = _pydantic_paths(err)
        raise ConfigError(f"invalid config: {', '.join(paths)}\n{err}", paths) from None


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text()
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if overrides:
        doc = merge(doc, overrides)
    return parse_config(doc)


def merge(base: dict, extra: dict) -> dict:
    """Recursive dict merge; ``extra`` wins."""
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def config_keys(model=RunConfig, prefix: str = "") -> list[str]:
    """Flattened list of every leaf key, used for schema closure checks."""
    keys = []
    for name, field in model.model_fields.items():
        ann = field.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            keys.extend(config_keys(ann, prefix + name + "."))
        else:
            keys.append(prefix + name)
    return keys
