"""The full single-image model: encoder -> LIM -> position lifting ->
compositional object-centric fields."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig, SamplingConfig
from .encoder import Encoder, load_backbone
from .fields import ConditionalField, RadianceSample, RayRender, decode_fg, height_gate, integrate, locality_gate, sample_ray, segmentation
from .geometry import CameraBatch, lift_depth_batch, lift_plane_batch, pixel_grid, ray_dirs
from .lim import LatentInference, SceneLatents

CAMERA_PARAM_DIM = 13


class ScaleHead(nn.Module):
    """Linear map (camera params ++ object latent) -> positive depth scale."""

    def __init__(self, z_dim: int):
        super().__init__()
        self.linear = nn.Linear(CAMERA_PARAM_DIM + z_dim, 1)
        with torch.no_grad():
            self.linear.weight.mul_(0.01)
            self.linear.bias.fill_(math.log(math.e - 1.0))  # softplus^-1(1)

    def forward(self, cam_params: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """cam_params (B, 13), z (B, K, Dz) -> (B, K)."""
        k = z.shape[1]
        x = torch.cat([cam_params[:, None].expand(-1, k, -1), z], -1)
        return F.softplus(self.linear(x)[..., 0])


def lift_depth(cams: CameraBatch, p_img: torch.Tensor, z_fg: torch.Tensor, head: ScaleHead, scene_center) -> torch.Tensor:
    scale = head(cams.params(), z_fg)
    return lift_depth_batch(cams, p_img, scale, scene_center)


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    field_maps: torch.Tensor  # (K+1, H, W)
    depth: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)
    seg: torch.Tensor  # (H, W)


@dataclass
class RayBatchResult:
    render: RayRender
    bg_sigma_near: torch.Tensor  # background densities at flagged near samples (flattened)


class ObjectCentricModel(nn.Module):
    def __init__(self, cfg: RunConfig, encoder: Encoder | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.latent_dim
        g = cfg.generator
        self.encoder = encoder if encoder is not None else load_backbone(cfg.backbone)
        ds = cfg.backbone.downsample_factor
        n_sites = (g.image_size // ds) ** 2
        self.lim = LatentInference(cfg.lim, d, n_sites)
        z_dim = 2 * d
        self.fg_field = ConditionalField(cfg.decoder.n_freq_fg, z_dim, cfg.decoder, density_bias=cfg.decoder.fg_density_bias,
                                         radial_scale=cfg.decoder.fg_radial_scale)
        self.bg_field = ConditionalField(cfg.decoder.n_freq_bg, z_dim, cfg.decoder, density_bias=0.0)
        self.scale_head = ScaleHead(z_dim) if cfg.lift.mode == "depth" else None

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # -- inference -----------------------------------------------------------

    def infer(self, image: torch.Tensor, cams: CameraBatch) -> SceneLatents:
        """image (B, H, W, 3) in [0, 1]; cams are the input cameras (B)."""
        fmap = self.encoder(image)
        lat = self.lim(fmap)
        return self.lift(lat, cams)

    def lift(self, lat: SceneLatents, cams: CameraBatch) -> SceneLatents:
        lift = self.cfg.lift
        if lift.mode == "plane":
            p_wd = lift_plane_batch(cams, lat.p_img, lift.plane_normal, lift.plane_offset)
        else:
            p_wd = lift_depth(cams, lat.p_img, lat.z_fg, self.scale_head, self.cfg.generator.scene_center)
        return lat.with_(p_wd=p_wd)

    # -- rendering -----------------------------------------------------------

    def render_rays(self, lat: SceneLatents, r_in: torch.Tensor, origins: torch.Tensor, dirs: torch.Tensor,
                    sampling: SamplingConfig, locality: bool, generator=None, b: int = 0) -> RayBatchResult:
        """Render unit rays (R, 3) for scene ``b`` of ``lat``.

        r_in is the world-to-camera rotation of the input view; it defines
        every object's local frame.
        """
        k = lat.n_slots
        valid = lat.valid[b]
        p_wd = lat.p_wd[b]
        n_rays = origins.shape[0]
        lift = self.cfg.lift
        samples = sample_ray(origins, dirs, p_wd.detach()[None].expand(n_rays, -1, -1), valid[None].expand(n_rays, -1),
                             sampling, generator, plane=(lift.plane_normal, lift.plane_offset))
        t = samples.t
        x = origins[:, None, :] + t[..., None] * dirs[:, None, :]  # (R, S, 3)
        n_s = t.shape[1]
        flat = x.reshape(1, -1, 3)
        bg = self.bg_field(flat, lat.z_bg[b])
        if sampling.bg_max_height is not None:
            gate = height_gate(flat[0], sampling.bg_max_height, (lift.plane_normal, lift.plane_offset))
            bg = RadianceSample(bg.color, bg.sigma * gate[None])
        x_loc = torch.einsum("ij,kpj->kpi", r_in, flat - p_wd[:, None, :])  # (K, R*S, 3)
        fg = decode_fg(x_loc, lat.z_fg[b], valid, self.fg_field)
        sig_fg = fg.sigma
        if locality:
            sig_fg = sig_fg * locality_gate(flat[0], sampling.locality_bbox)[None]
        sigma = torch.cat([bg.sigma, sig_fg], 0).reshape(k + 1, n_rays, n_s)
        color = torch.cat([bg.color, fg.color], 0).reshape(k + 1, n_rays, n_s, 3)
        render = integrate(sigma, color, t, samples.delta, sampling.density_map)
        near_cut = sampling.near + sampling.occ_near_fraction * (sampling.far - sampling.near)
        bg_near = sigma[0][t < near_cut]
        return RayBatchResult(render, bg_near)

    def render_pixels(self, lat: SceneLatents, r_in: torch.Tensor, cam: CameraBatch, p_pix: torch.Tensor,
                      sampling: SamplingConfig, locality: bool, generator=None, b: int = 0) -> RayBatchResult:
        """Render normalized pixel coordinates p_pix (M, 2) of a single camera."""
        dirs = ray_dirs(cam, p_pix[None])[0]
        origins = cam.center.expand(dirs.shape[0], -1)
        chunk = sampling.chunk_rays
        if dirs.shape[0] <= chunk:
            return self.render_rays(lat, r_in, origins, dirs, sampling, locality, generator, b)
        parts = [self.render_rays(lat, r_in, origins[i:i + chunk], dirs[i:i + chunk], sampling, locality, generator, b)
                 for i in range(0, dirs.shape[0], chunk)]
        cat = lambda name: torch.cat([getattr(p.render, name) for p in parts], 0)
        render = RayRender(cat("rgb"), cat("depth"), cat("alpha"), cat("weights"),
                           torch.cat([p.render.field_maps for p in parts], 1))
        return RayBatchResult(render, torch.cat([p.bg_sigma_near for p in parts]))

    def render_image(self, lat: SceneLatents, r_in: torch.Tensor, cam: CameraBatch, sampling: SamplingConfig,
                     locality: bool = False, generator=None, b: int = 0) -> RenderOutput:
        h, w = cam.height, cam.width
        grid = pixel_grid(w, h, dtype=cam.R.dtype)
        res = self.render_pixels(lat, r_in, cam, grid, sampling, locality, generator, b).render
        maps = res.field_maps.reshape(-1, h, w)
        return RenderOutput(res.rgb.reshape(h, w, 3), maps, res.depth.reshape(h, w), res.alpha.reshape(h, w),
                            segmentation(maps))


def build_model(cfg: RunConfig, dtype=torch.float32) -> ObjectCentricModel:
    """Deterministically initialized model (seeded by ``cfg.seed``)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = ObjectCentricModel(cfg)
    return model.to(dtype)
