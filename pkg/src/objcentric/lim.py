"""Latent inference: iterative background/foreground cross-attention with
jointly tracked 2D object positions.

One background query and K foreground queries compete for feature-map
sites through a per-site softmax. Foreground keys carry a relative
positional encoding around each query's current image position, which is
itself refined every iteration by a momentum-smoothed attention mean.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from .config import LimConfig
from .encoder import FeatureMap

log = logging.getLogger(__name__)


@dataclass
class QueryState:
    q_bg: torch.Tensor  # (B, 1, D)
    q_fg: torch.Tensor  # (B, K, D)
    p_img: torch.Tensor  # (B, K, 2)
    valid: torch.Tensor  # (B, K) bool
    attn: torch.Tensor | None = None  # A: (B, N, K+1)
    attn_norm: torch.Tensor | None = None  # W: (B, N, K+1)


@dataclass
class SceneLatents:
    z_bg: torch.Tensor  # (B, 1, 2D)
    z_fg: torch.Tensor  # (B, K, 2D)
    p_img: torch.Tensor  # (B, K, 2)
    valid: torch.Tensor  # (B, K) bool
    p_wd: torch.Tensor | None = None  # (B, K, 3)
    attn_norm: torch.Tensor | None = None

    @property
    def n_slots(self) -> int:
        return self.z_fg.shape[1]

    def detached(self) -> "SceneLatents":
        return SceneLatents(
            self.z_bg.detach(), self.z_fg.detach(), self.p_img.detach(), self.valid.clone(),
            None if self.p_wd is None else self.p_wd.detach(),
            None if self.attn_norm is None else self.attn_norm.detach(),
        )

    def with_(self, **kw) -> "SceneLatents":
        return replace(self, **kw)


def wrap_unit(x: torch.Tensor) -> torch.Tensor:
    """Map coordinate differences onto the torus [-1, 1)."""
    return x - 2.0 * torch.floor((x + 1.0) / 2.0)


class UpdateMLP(nn.Module):
    """Pre-norm residual branch t(q)."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, q):
        return self.fc2(torch.relu(self.fc1(self.norm(q))))


class LatentInference(nn.Module):
    def __init__(self, cfg: LimConfig, dim: int, n_sites: int):
        super().__init__()
        self.cfg = cfg
        self.dim = dim
        self.n_sites = n_sites
        ds = cfg.scale_dim
        self.q_bg_init = nn.Parameter(torch.randn(1, dim) * dim ** -0.5)
        self.q_fg_init = nn.Parameter(torch.randn(cfg.n_slots, dim) * dim ** -0.5)
        self.key_bg = nn.Linear(dim, ds, bias=False)
        self.key_fg = nn.Linear(dim, ds, bias=False)
        self.query_bg = nn.Linear(dim, ds, bias=False)
        self.query_fg = nn.Linear(dim, ds, bias=False)
        self.value_bg = nn.Linear(dim, dim, bias=False)
        self.value_fg = nn.Linear(dim, dim, bias=False)
        self.pos_fg = nn.Linear(4, dim)  # h1 on the relative encoding
        self.pos_bg = nn.Linear(2, dim)  # background row: absolute grid only
        self.pos_bias = nn.Linear(n_sites, 2)  # h2
        self.t_bg = UpdateMLP(dim, cfg.mlp_hidden)
        self.t_fg = UpdateMLP(dim, cfg.mlp_hidden)
        self.norm_q_bg = nn.LayerNorm(dim) if cfg.query_norm else nn.Identity()
        self.norm_q_fg = nn.LayerNorm(dim) if cfg.query_norm else nn.Identity()

    # -- single steps --------------------------------------------------------

    def initial_state(self, batch: int, dtype=None) -> QueryState:
        dtype = dtype or self.q_fg_init.dtype
        k = self.cfg.n_slots
        return QueryState(
            self.q_bg_init[None].expand(batch, -1, -1),
            self.q_fg_init[None].expand(batch, -1, -1),
            torch.zeros(batch, k, 2, dtype=dtype, device=self.q_fg_init.device),
            torch.ones(batch, k, dtype=torch.bool, device=self.q_fg_init.device),
        )

    def attention_step(self, state: QueryState, fmap: FeatureMap, iteration: int = 0):
        f = fmap.features
        grid = fmap.abs_grid.to(f.dtype)
        if f.shape[1] != self.n_sites:
            raise ValueError(f"feature map has {f.shape[1]} sites, module built for {self.n_sites}")
        if not torch.isfinite(f).all():
            raise FloatingPointError(f"non-finite features at iteration {iteration}")
        rel = grid[None, None] - state.p_img[:, :, None, :]  # (B, K, N, 2)
        if self.cfg.toroidal:
            rel = wrap_unit(rel)
        e_pos = torch.cat([rel, -rel], -1)
        keys_bg = self.key_bg(f + self.pos_bg(grid)[None])  # (B, N, Ds)
        keys_fg = self.key_fg(f[:, None] + self.pos_fg(e_pos))  # (B, K, N, Ds)
        qb = self.query_bg(self.norm_q_bg(state.q_bg))  # (B, 1, Ds)
        qf = self.query_fg(self.norm_q_fg(state.q_fg))  # (B, K, Ds)
        logits_bg = torch.einsum("bnd,bod->bno", keys_bg, qb)
        logits_fg = torch.einsum("bknd,bkd->bnk", keys_fg, qf)
        logits_fg = logits_fg.masked_fill(~state.valid[:, None, :], float("-inf"))
        logits = torch.cat([logits_bg, logits_fg], -1) / math.sqrt(self.cfg.scale_dim)
        attn = torch.softmax(logits, dim=-1)
        mass = attn.sum(1, keepdim=True)
        attn_norm = torch.where(mass > 0, attn / mass.clamp_min(1e-30), torch.zeros_like(attn))
        u_bg = torch.einsum("bn,bnd->bd", attn_norm[..., 0], self.value_bg(f))[:, None]
        u_fg = torch.einsum("bnk,bnd->bkd", attn_norm[..., 1:], self.value_fg(f))
        if not (torch.isfinite(u_bg).all() and torch.isfinite(u_fg).all()):
            raise FloatingPointError(f"non-finite attention update at iteration {iteration}")
        return attn, attn_norm, u_bg, u_fg

    def update_queries(self, state: QueryState, u_bg, u_fg) -> QueryState:
        q_bg = state.q_bg + u_bg
        q_bg = q_bg + self.t_bg(q_bg)
        q_fg = state.q_fg + u_fg
        q_fg = q_fg + self.t_fg(q_fg)
        q_fg = torch.where(state.valid[..., None], q_fg, state.q_fg)
        return replace(state, q_bg=q_bg, q_fg=q_fg)

    def update_positions(self, state: QueryState, attn_norm: torch.Tensor, fmap: FeatureMap) -> torch.Tensor:
        m = self.cfg.momentum
        w = attn_norm[..., 1:]  # (B, N, K)
        mean = torch.einsum("bnk,nc->bkc", w, fmap.abs_grid.to(w.dtype))
        has_mass = w.sum(1) > 0  # (B, K)
        starved = state.valid & ~has_mass
        if bool(starved.any()):
            log.warning("zero attention mass on %d valid slot(s); holding position", int(starved.sum()))
        p_new = mean * (1 - m) + state.p_img * m
        move = (state.valid & has_mass)[..., None]
        return torch.where(move, p_new, state.p_img).clamp(-1.0, 1.0)

    def position_bias(self, attn_norm: torch.Tensor) -> torch.Tensor:
        w = attn_norm[..., 1:].transpose(1, 2)  # (B, K, N)
        return torch.tanh(self.pos_bias(w)) * self.cfg.bias_scale

    # -- full loop -----------------------------------------------------------

    def forward(self, fmap: FeatureMap, return_trace: bool = False):
        b = fmap.features.shape[0]
        state = self.initial_state(b, fmap.features.dtype)
        trace = []
        for it in range(self.cfg.iters):
            if it == self.cfg.iters - 1:
                state = replace(state, valid=dedupe_queries(state, self.cfg.sim_threshold, self.cfg.dist_threshold))
            attn, w, u_bg, u_fg = self.attention_step(state, fmap, it)
            p = self.update_positions(state, w, fmap)
            state = self.update_queries(state, u_bg, u_fg)
            state = replace(state, p_img=p, attn=attn, attn_norm=w)
            if return_trace:
                trace.append(state)
        p = (state.p_img + self.position_bias(state.attn_norm)).clamp(-1.0, 1.0)
        p = torch.where(state.valid[..., None], p, state.p_img)
        f = fmap.features
        w = state.attn_norm
        resid_bg = torch.einsum("bn,bnd->bd", w[..., 0], f)[:, None]
        resid_fg = torch.einsum("bnk,bnd->bkd", w[..., 1:], f)
        z_bg = torch.cat([state.q_bg, resid_bg], -1)
        z_fg = torch.cat([state.q_fg, resid_fg], -1)
        z_fg = torch.where(state.valid[..., None], z_fg, torch.zeros_like(z_fg))
        out = SceneLatents(z_bg, z_fg, p, state.valid, attn_norm=w)
        return (out, trace) if return_trace else out


def infer_latents(fmap: FeatureMap, lim: LatentInference) -> SceneLatents:
    return lim(fmap)


def dedupe_queries(state: QueryState, sim_threshold: float, dist_threshold: float) -> torch.Tensor:
    """Invalidate later slots that duplicate an earlier surviving slot.

    Pairs are scanned in ascending index order; slot j is dropped when some
    still-valid i < j has cosine(q_i, q_j) > sim_threshold and
    |p_i - p_j| < dist_threshold.
    """
    with torch.no_grad():
        q = torch.nn.functional.normalize(state.q_fg, dim=-1)
        cos = q @ q.transpose(1, 2)
        dist = torch.cdist(state.p_img, state.p_img)
        dup = (cos > sim_threshold) & (dist < dist_threshold)
        valid = state.valid.clone()
        k = valid.shape[1]
        for j in range(1, k):
            hit = (dup[:, :j, j] & valid[:, :j]).any(-1)
            valid[:, j] &= ~hit
    return valid
