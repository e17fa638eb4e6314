"""Conditional radiance fields, density-weighted composition, ray sampling
and emission-absorption quadrature.

Tensor layout: fields are stacked on dim 0 with index 0 = background,
1..K = foreground slots; then rays, then samples along each ray.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DecoderConfig, SamplingConfig

log = logging.getLogger(__name__)


@dataclass
class RadianceSample:
    color: torch.Tensor  # (..., 3) in [0, 1]
    sigma: torch.Tensor  # (...) >= 0


def positional_encoding(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < n_freq."""
    if n_freq == 0:
        return x
    freqs = (2.0 ** torch.arange(n_freq, dtype=x.dtype, device=x.device)) * math.pi
    xf = x[..., None, :] * freqs[:, None]  # (..., F, 3)
    enc = torch.cat([torch.sin(xf), torch.cos(xf)], -1).flatten(-2)
    return torch.cat([x, enc], -1)


_ACTS = {"relu": nn.ReLU, "softplus": nn.Softplus, "silu": nn.SiLU, "tanh": nn.Tanh}


class ConditionalField(nn.Module):
    """g(x | z): an MLP on [PE(x), z].

    The first layer is split into a position part and a latent part so the
    latent projection is computed once per field rather than per sample;
    this is the same function as a single linear layer on the concatenation.
    """

    def __init__(self, n_freq: int, z_dim: int, cfg: DecoderConfig, density_bias: float = 0.0,
                 radial_scale: float | None = None):
        super().__init__()
        self.n_freq = n_freq
        pe_dim = 3 + 6 * n_freq
        self.in_pos = nn.Linear(pe_dim, cfg.hidden)
        self.in_z = nn.Linear(z_dim, cfg.hidden, bias=False)
        act = _ACTS[cfg.activation]
        layers = []
        for _ in range(cfg.n_layers - 1):
            layers += [act(), nn.Linear(cfg.hidden, cfg.hidden)]
        layers.append(act())
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(cfg.hidden, 4)
        with torch.no_grad():
            self.out.bias[3] = density_bias
        self.density_act = cfg.density_act
        self.latent_norm = cfg.latent_norm
        self.radial_scale = radial_scale

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> RadianceSample:
        """x: (G, P, 3) points, z: (G, Dz) one latent per group."""
        if self.latent_norm:
            # slot latents share a large common component; without this the
            # latent path behaves like a bias with a much larger step size
            z = F.layer_norm(z, z.shape[-1:]) / math.sqrt(z.shape[-1])
        h = self.in_pos(positional_encoding(x, self.n_freq)) + self.in_z(z)[:, None, :]
        raw = self.out(self.body(h))
        color = torch.sigmoid(raw[..., :3])
        pre = raw[..., 3]
        if self.radial_scale is not None:
            pre = pre - (x * x).sum(-1) / (2 * self.radial_scale ** 2)
        if self.density_act == "relu":
            sigma = F.relu(pre)
        else:
            sigma = F.softplus(pre)
        return RadianceSample(color, sigma)


def decode_fg(x_local: torch.Tensor, z_fg: torch.Tensor, valid: torch.Tensor, field: ConditionalField) -> RadianceSample:
    """x_local (S, P, 3) per slot, z_fg (S, Dz), valid (S,). Invalid slots are never evaluated."""
    color = x_local.new_zeros(x_local.shape)
    sigma = x_local.new_zeros(x_local.shape[:-1])
    idx = torch.nonzero(valid, as_tuple=True)[0]
    if idx.numel():
        out = field(x_local[idx], z_fg[idx])
        color = color.index_copy(0, idx, out.color)
        sigma = sigma.index_copy(0, idx, out.sigma)
    return RadianceSample(color, sigma)


def decode_bg(x_world: torch.Tensor, z_bg: torch.Tensor, field: ConditionalField) -> RadianceSample:
    """x_world (P, 3), z_bg (Dz,)."""
    out = field(x_world[None], z_bg[None])
    return RadianceSample(out.color[0], out.sigma[0])


_TOTAL_FLOOR = 1e-20


def compose(sigma: torch.Tensor, color: torch.Tensor) -> RadianceSample:
    """Density-weighted mean over the field axis (dim 0).

    sigma (F, ...), color (F, ..., 3). Points where every field is empty
    compose to (0, 0).
    """
    w = composition_weights(sigma)
    return RadianceSample((w[..., None] * color).sum(0), (w * sigma).sum(0))


def composition_weights(sigma: torch.Tensor) -> torch.Tensor:
    # the floor keeps d(sigma/total)/d(total) finite when densities underflow
    # to subnormals; total == 0 still gives exactly zero weights
    return sigma / sigma.sum(0).clamp_min(_TOTAL_FLOOR)


def height_gate(x_world: torch.Tensor, max_height: float, plane=((0.0, 0.0, 1.0), 0.0)) -> torch.Tensor:
    """1 at or below ``max_height`` over the plane n.x = offset, 0 above."""
    n = torch.as_tensor(plane[0], dtype=x_world.dtype, device=x_world.device)
    return ((x_world @ n - plane[1]) <= max_height).to(x_world.dtype)


def locality_gate(x_world: torch.Tensor, bbox) -> torch.Tensor:
    """1 inside the closed box, 0 outside."""
    lo = torch.as_tensor(bbox[0], dtype=x_world.dtype, device=x_world.device)
    hi = torch.as_tensor(bbox[1], dtype=x_world.dtype, device=x_world.device)
    inside = ((x_world >= lo) & (x_world <= hi)).all(-1)
    return inside.to(x_world.dtype)


# -- sampling --------------------------------------------------------------

@dataclass
class RaySamples:
    t: torch.Tensor  # (R, S) strictly increasing
    delta: torch.Tensor  # (R, S) quadrature widths
    fallback: torch.Tensor  # (R,) bool, object-centric set was empty


def stratified(n_rays: int, n: int, near, far, jitter: bool, generator=None, dtype=torch.float32) -> tuple:
    near = torch.as_tensor(near, dtype=dtype).expand(n_rays)
    far = torch.as_tensor(far, dtype=dtype).expand(n_rays)
    u = torch.rand(n_rays, n, generator=generator, dtype=dtype) if jitter else torch.full((n_rays, n), 0.5, dtype=dtype)
    width = (far - near) / n
    t = near[:, None] + (torch.arange(n, dtype=dtype)[None] + u) * width[:, None]
    return t, width[:, None].expand(n_rays, n).clone()


def keep_intervals(origins, dirs, positions, valid, cfg: SamplingConfig, plane=((0.0, 0.0, 1.0), 0.0)):
    """Per-ray candidate intervals (R, J) from keep-balls plus the ground guard band."""
    from .geometry import ray_sphere_interval

    r = cfg.resolved_keep_radius
    lo_list, hi_list = [], []
    if positions is not None and positions.shape[1] > 0:
        t0, t1, hit = ray_sphere_interval(origins, dirs, positions, r)
        hit = hit & valid
        lo_list.append(torch.where(hit, t0, torch.zeros_like(t0)))
        hi_list.append(torch.where(hit, t1, torch.zeros_like(t1)))
    if cfg.guard_band > 0:
        n = torch.as_tensor(plane[0], dtype=dirs.dtype)
        denom = dirs @ n
        tg = (plane[1] - origins @ n) / torch.where(denom.abs() > 1e-9, denom, torch.ones_like(denom))
        ok = (denom < -1e-9) & (tg > 0)
        g0 = torch.where(ok, tg - cfg.guard_band, torch.zeros_like(tg))
        g1 = torch.where(ok, tg + cfg.guard_band, torch.zeros_like(tg))
        lo_list.append(g0[:, None])
        hi_list.append(g1[:, None])
    lo = torch.cat(lo_list, 1).clamp(cfg.near, cfg.far)
    hi = torch.cat(hi_list, 1).clamp(cfg.near, cfg.far)
    return lo, torch.maximum(lo, hi)


def sample_union(lo: torch.Tensor, hi: torch.Tensor, n: int, jitter: bool, generator=None):
    """Stratify n samples over the union of intervals [lo_j, hi_j] per ray.

    Returns depths (R, n), stratum measure (R,), and the union length (R,).
    """
    n_rays, j = lo.shape
    ends = torch.sort(torch.cat([lo, hi], 1), dim=1).values  # (R, 2J)
    mids = 0.5 * (ends[:, 1:] + ends[:, :-1])  # (R, 2J-1)
    covered = ((lo[:, None, :] <= mids[..., None]) & (mids[..., None] <= hi[:, None, :]) & (hi > lo)[:, None, :]).any(-1)
    seg = (ends[:, 1:] - ends[:, :-1]) * covered
    cum = torch.cat([torch.zeros(n_rays, 1, dtype=lo.dtype), torch.cumsum(seg, 1)], 1)  # (R, 2J)
    total = cum[:, -1]
    u = torch.rand(n_rays, n, generator=generator, dtype=lo.dtype) if jitter else torch.full((n_rays, n), 0.5, dtype=lo.dtype)
    target = (torch.arange(n, dtype=lo.dtype)[None] + u) / n * total[:, None]
    # segment k covers cumulative range [cum_k, cum_{k+1}); skip empty segments
    k = torch.searchsorted(cum[:, 1:].contiguous(), target.contiguous(), right=True)
    k = k.clamp(max=seg.shape[1] - 1)
    base = torch.gather(cum, 1, k)
    start = torch.gather(ends, 1, k)
    t = start + (target - base)
    return t, total / n, total


def sample_ray(origins, dirs, positions, valid, cfg: SamplingConfig, generator=None, plane=((0.0, 0.0, 1.0), 0.0)) -> RaySamples:
    """Sample depths for unit rays (R, 3).

    positions (R, K, 3) / valid (R, K) are the lifted object positions seen by
    each ray; only used when object-centric sampling is enabled.
    """
    r = origins.shape[0]
    dtype = origins.dtype
    if not cfg.object_centric_enabled:
        t, d = stratified(r, cfg.n_coarse, cfg.near, cfg.far, cfg.jitter, generator, dtype)
        return RaySamples(t, d, torch.zeros(r, dtype=torch.bool))
    lo, hi = keep_intervals(origins, dirs, positions, valid, cfg, plane)
    t, width, total = sample_union(lo, hi, cfg.n_fine, cfg.jitter, generator)
    empty = total <= 1e-9
    if bool(empty.any()):
        log.warning("object-centric keep set empty for %d ray(s); using stratified samples", int(empty.sum()))
        ts, ds = stratified(r, cfg.n_fine, cfg.near, cfg.far, cfg.jitter, generator, dtype)
        t = torch.where(empty[:, None], ts, t)
        width = torch.where(empty, ds[:, 0], width)
    return RaySamples(t, width[:, None].expand_as(t).clone(), empty)


# -- quadrature ------------------------------------------------------------

@dataclass
class RayRender:
    rgb: torch.Tensor  # (R, 3)
    depth: torch.Tensor  # (R,)
    alpha: torch.Tensor  # (R,) accumulated opacity
    weights: torch.Tensor  # (R, S)
    field_maps: torch.Tensor  # (F, R) per-field density maps


def quadrature_weights(sigma: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """w_k = T_k (1 - exp(-sigma_k delta_k)), T_k = exp(-sum_{l<k} sigma_l delta_l)."""
    sd = sigma * delta
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(sd[..., :1]), sd[..., :-1]], -1), -1))
    return trans * (1.0 - torch.exp(-sd))


def integrate(sigma_f: torch.Tensor, color_f: torch.Tensor, t: torch.Tensor, delta: torch.Tensor,
              density_map: str = "composite") -> RayRender:
    """Compose per-field samples then integrate.

    sigma_f (F, R, S), color_f (F, R, S, 3).
    """
    comp = compose(sigma_f, color_f)
    w = quadrature_weights(comp.sigma, delta)
    rgb = (w[..., None] * comp.color).sum(-2)
    depth = (w * t).sum(-1)
    alpha = w.sum(-1)
    if density_map == "composite":
        fmaps = (w[None] * composition_weights(sigma_f)).sum(-1)
    else:
        fmaps = quadrature_weights(sigma_f, delta[None]).sum(-1)
    return RayRender(rgb, depth, alpha, w, fmaps)


def segmentation(field_maps: torch.Tensor) -> torch.Tensor:
    """argmax over fields (dim 0); torch.argmax returns the first maximum,
    so ties resolve to background, then to the lowest slot index."""
    return torch.argmax(field_maps, dim=0)
