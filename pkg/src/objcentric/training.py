"""Two-stage training, coarse-to-fine supervision, test-time optimization
and latent interpolation."""
from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import SCHEMA_VERSION, Checkpoint, CheckpointError, pack_optimizer, save_checkpoint, unpack_optimizer
from .config import RunConfig, SamplingConfig, StageConfig
from .geometry import CameraBatch, pixel_grid
from .lim import SceneLatents
from .losses import LossComponents, PerceptualNet, combine, loss_total, perceptual_loss, recon_loss, sample_pairs
from .model import ObjectCentricModel, build_model
from .scenegen import Dataset, SceneRecord

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint_path: str | None, diagnostics: dict):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.diagnostics = diagnostics


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent named RNG stream derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def torch_stream(seed: int, name: str) -> torch.Generator:
    s = int(rng_stream(seed, name).integers(0, 2**62))
    return torch.Generator().manual_seed(s)


# -- schedules ---------------------------------------------------------------

@dataclass
class Flags:
    perceptual: bool
    object_centric: bool
    locality: bool
    fine: bool

    def as_dict(self):
        return {"perceptual": self.perceptual, "object_centric": self.object_centric,
                "locality": self.locality, "fine": self.fine}


def schedule_flags(epoch: int, cfg: StageConfig) -> Flags:
    oc = epoch >= cfg.object_centric_epoch
    fine = cfg.fine_epoch is not None and epoch >= cfg.fine_epoch
    return Flags(epoch >= cfg.perc_epoch, oc, not oc, fine)


@dataclass
class SupervisionPlan:
    mode: str  # "full" | "coarse" | "crop"
    res: int
    offset: tuple[int, int] = (0, 0)  # (row, col) of the crop

    @property
    def n_pixels(self) -> int:
        return self.res * self.res


def coarse_to_fine(epoch: int, cfg: StageConfig, image_size: int, rng: np.random.Generator | None = None) -> SupervisionPlan:
    res = min(cfg.coarse_res, image_size)
    if res == image_size:
        return SupervisionPlan("full", image_size)
    if cfg.fine_epoch is None or epoch < cfg.fine_epoch:
        return SupervisionPlan("coarse", res)
    rng = rng if rng is not None else np.random.default_rng(0)
    r = int(rng.integers(0, image_size - res + 1))
    c = int(rng.integers(0, image_size - res + 1))
    return SupervisionPlan("crop", res, (r, c))


def _downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img.reshape(h // factor, factor, w // factor, factor, *img.shape[2:]).mean(axis=(1, 3))


class SceneTensors:
    """Per-scene torch views of a dataset record, cached per resolution."""

    def __init__(self, rec: SceneRecord, dtype=torch.float32):
        self.rec = rec
        self.dtype = dtype
        self.cams = [CameraBatch.from_poses([c], dtype) for c in rec.cameras]
        self.rgb = torch.tensor(rec.rgb, dtype=dtype)
        self.depth = torch.tensor(rec.depth, dtype=dtype)
        self._coarse: dict[int, tuple] = {}

    @property
    def n_views(self) -> int:
        return len(self.cams)

    def input_R(self, v: int) -> torch.Tensor:
        return self.cams[v].R[0].transpose(0, 1)

    def coarse(self, res: int):
        if res not in self._coarse:
            size = self.rec.rgb.shape[1]
            f = size // res
            cams = [CameraBatch.from_poses([c.scaled(1.0 / f)], self.dtype) for c in self.rec.cameras]
            rgb = torch.tensor(np.stack([_downsample(x, f) for x in self.rec.rgb]), dtype=self.dtype)
            depth = torch.tensor(np.stack([_downsample(x, f) for x in self.rec.depth]), dtype=self.dtype)
            self._coarse[res] = (cams, rgb, depth)
        return self._coarse[res]

    def view_plan(self, v: int, plan: SupervisionPlan):
        """(camera, normalized pixel coords, target rgb, target depth) for view v."""
        if plan.mode == "coarse":
            cams, rgb, depth = self.coarse(plan.res)
            cam = cams[v]
            return cam, pixel_grid(plan.res, plan.res, self.dtype), rgb[v], depth[v]
        size = self.rgb.shape[1]
        grid = pixel_grid(size, size, self.dtype).reshape(size, size, 2)
        r, c = plan.offset
        s = plan.res
        return (self.cams[v], grid[r:r + s, c:c + s].reshape(-1, 2), self.rgb[v, r:r + s, c:c + s],
                self.depth[v, r:r + s, c:c + s])


def render_sampling(cfg: RunConfig, flags: Flags, jitter: bool) -> SamplingConfig:
    s = cfg.sampling.model_copy()
    s.object_centric_enabled = flags.object_centric
    s.jitter = jitter
    return s


# -- training ----------------------------------------------------------------

def param_names(model: torch.nn.Module) -> dict[int, str]:
    return {id(p): n for n, p in model.named_parameters()}


def make_optimizer(model: ObjectCentricModel, cfg: StageConfig):
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=0.5 ** (1.0 / cfg.lr_half_epochs))
    return opt, sched


def make_checkpoint(model: ObjectCentricModel, cfg: RunConfig, opt=None, meta: dict | None = None) -> Checkpoint:
    tensors = {f"model/{k}": v.detach().clone() for k, v in model.state_dict().items()}
    meta = dict(meta or {})
    if opt is not None:
        ot, groups = pack_optimizer(opt, param_names(model))
        tensors.update(ot)
        meta["optimizer"] = groups
    return Checkpoint(cfg.train.stage, cfg.model_dump(mode="json"), tensors, meta)


def model_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None) -> ObjectCentricModel:
    if ckpt.schema_version != SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint schema {ckpt.schema_version} != {SCHEMA_VERSION}")
    cfg = cfg or RunConfig.model_validate(ckpt.config)
    model = build_model(cfg)
    model.load_state_dict(ckpt.model_state())
    return model


class Trainer:
    def __init__(self, model: ObjectCentricModel, dataset: Dataset, cfg: RunConfig, log_path: str | None = None,
                 out_dir: str | None = None):
        self.model = model
        self.cfg = cfg
        self.stage = cfg.train
        self.records = [r for r in dataset.split("train")]
        if not self.records:
            raise ValueError("dataset has no training scenes")
        counts = {len(r.scene.objects) for r in self.records}
        if self.stage.stage == "prior" and counts != {1}:
            raise ValueError(f"prior stage needs single-object scenes, got object counts {sorted(counts)}")
        self.scenes = [SceneTensors(r) for r in self.records]
        self.perc = PerceptualNet(cfg.perceptual)
        self.opt, self.sched = make_optimizer(model, self.stage)
        seed = self.stage.seed
        self.order_rng = rng_stream(seed, "order")
        self.view_rng = rng_stream(seed, "views")
        self.crop_rng = rng_stream(seed, "crops")
        self.pair_gen = torch_stream(seed, "pairs")
        self.sample_gen = torch_stream(seed, "samples")
        self.log_path = Path(log_path) if log_path else None
        self.out_dir = Path(out_dir) if out_dir else None
        self.history: list[dict] = []
        self.step_count = 0
        self.epoch = 0

    def step_loss(self, scene: SceneTensors, v_in: int, flags: Flags, plan: SupervisionPlan):
        model, cfg = self.model, self.cfg
        lat = model.infer(scene.rgb[v_in][None], scene.cams[v_in])
        r_in = scene.input_R(v_in)
        sampling = render_sampling(cfg, flags, jitter=cfg.sampling.jitter)
        renders, targets, refs, pairs, near = [], [], [], [], []
        for v in range(scene.n_views):
            cam, pix, tgt, dref = scene.view_plan(v, plan)
            out = model.render_pixels(lat, r_in, cam, pix, sampling, flags.locality, self.sample_gen)
            h, w = tgt.shape[:2]
            depth = out.render.depth
            if cfg.loss.depth_normalized:
                depth = depth / out.render.alpha.clamp_min(1e-4)
            renders.append((out.render.rgb.reshape(h, w, 3), depth.reshape(h, w)))
            targets.append(tgt)
            refs.append(dref)
            pairs.append(sample_pairs(h * w, self.stage.depth_pairs, self.pair_gen))
            near.append(out.bg_sigma_near)
        total, comps = loss_total(renders, targets, refs, pairs, torch.cat(near), cfg.loss, self.perc,
                                  perc_on=flags.perceptual, margin=self.stage.depth_margin)
        return total, comps, lat

    def _abort(self, msg: str, diag: dict):
        path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = str(self.out_dir / "last_good.ckpt")
            save_checkpoint(self.checkpoint(), path)
        raise TrainingAborted(msg, path, diag)

    def checkpoint(self) -> Checkpoint:
        meta = {"epoch": self.epoch, "step": self.step_count,
                "flags": schedule_flags(max(self.epoch - 1, 0), self.stage).as_dict(),
                "final_flags": schedule_flags(self.stage.epochs - 1, self.stage).as_dict()}
        return make_checkpoint(self.model, self.cfg, self.opt, meta)

    def run(self, progress=None) -> Checkpoint:
        st = self.stage
        n = len(self.scenes)
        t0 = time.time()
        logf = self.log_path.open("a") if self.log_path else None
        try:
            for epoch in range(st.epochs):
                self.epoch = epoch
                flags = schedule_flags(epoch, st)
                order = self.order_rng.permutation(n)
                for start in range(0, n, st.batch_scenes):
                    if st.max_steps is not None and self.step_count >= st.max_steps:
                        break
                    idx = order[start:start + st.batch_scenes]
                    self.opt.zero_grad(set_to_none=True)
                    parts = []
                    for i in idx:
                        scene = self.scenes[int(i)]
                        v_in = int(self.view_rng.integers(0, scene.n_views))
                        plan = coarse_to_fine(epoch, st, scene.rgb.shape[1], self.crop_rng)
                        total, comps, _ = self.step_loss(scene, v_in, flags, plan)
                        if not torch.isfinite(total):
                            self._abort(f"non-finite loss at step {self.step_count}",
                                        {"step": self.step_count, "epoch": epoch, "scene": int(i),
                                         "components": comps.as_floats()})
                        parts.append(comps)
                    # the logged total is recomputed from the batch-mean components
                    # so that it decomposes exactly
                    acc = parts[0] if len(parts) == 1 else LossComponents(
                        *(torch.stack([getattr(c, k) for c in parts]).mean() for k in ("recon", "perc", "depth", "occ")))
                    total = combine(acc, self.cfg.loss, flags.perceptual)
                    total.backward()
                    gnorm = torch.nn.utils.clip_grad_norm_(self.model.trainable_parameters(),
                                                           st.grad_clip if st.grad_clip else float("inf"))
                    if not torch.isfinite(gnorm):
                        self._abort(f"non-finite gradient at step {self.step_count}",
                                    {"step": self.step_count, "epoch": epoch, "components": acc.as_floats()})
                    self.opt.step()
                    rec = {"step": self.step_count, "epoch": epoch, "loss": float(total.detach()),
                           **acc.as_floats(), "lr": self.opt.param_groups[0]["lr"], "flags": flags.as_dict(),
                           "scene": int(idx[-1]), "view": v_in}
                    self.history.append(rec)
                    if logf and self.step_count % st.log_every == 0:
                        logf.write(json.dumps(rec, sort_keys=True) + "\n")
                        logf.flush()
                    self.step_count += 1
                self.sched.step()
                if progress:
                    recent = [h["recon"] for h in self.history[-n:]]
                    progress(epoch, float(np.mean(recent)) if recent else float("nan"), time.time() - t0)
                if st.max_steps is not None and self.step_count >= st.max_steps:
                    break
            self.epoch = st.epochs if st.max_steps is None else self.epoch + 1
        finally:
            if logf:
                logf.close()
        return self.checkpoint()


def train_stage(model: ObjectCentricModel, dataset: Dataset, cfg: RunConfig, log_path=None, out_dir=None,
                progress=None) -> Checkpoint:
    return Trainer(model, dataset, cfg, log_path, out_dir).run(progress)


def prior_transfer(stage1: Checkpoint, cfg_full: RunConfig) -> ObjectCentricModel:
    """Initialize a full-stage model from a prior-stage checkpoint.

    Every module is copied. When the slot count grows, existing query rows
    are copied and the extra rows keep their fresh initialization.
    Optimizer state is not carried over.
    """
    if stage1.schema_version != SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint schema {stage1.schema_version} != {SCHEMA_VERSION}")
    if stage1.stage != "prior":
        raise CheckpointError(f"expected a prior-stage checkpoint, got {stage1.stage!r}")
    model = build_model(cfg_full)
    own = model.state_dict()
    src = stage1.model_state()
    new_state = {}
    for k, v in own.items():
        if k not in src:
            raise CheckpointError(f"prior checkpoint lacks {k}")
        if cfg_full.train.reinit_background and k.startswith("bg_field."):
            new_state[k] = v
        elif k == "lim.q_fg_init" and src[k].shape != v.shape:
            m = min(src[k].shape[0], v.shape[0])
            merged = v.clone()
            merged[:m] = src[k][:m]
            new_state[k] = merged
        elif src[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {k}: {tuple(src[k].shape)} vs {tuple(v.shape)}")
        else:
            new_state[k] = src[k].clone()
    model.load_state_dict(new_state)
    return model


# -- test-time optimization --------------------------------------------------

@dataclass
class TTOResult:
    latents: SceneLatents
    losses: list[float]
    model: ObjectCentricModel


def eval_sampling(cfg: RunConfig, object_centric: bool) -> SamplingConfig:
    s = cfg.sampling.model_copy()
    s.object_centric_enabled = object_centric
    s.jitter = False
    return s


def test_time_optimize(model: ObjectCentricModel, image: torch.Tensor, cam: CameraBatch, steps: int, lr: float,
                       tune_decoders: bool = False, object_centric: bool = True,
                       perc_net: PerceptualNet | None = None) -> TTOResult:
    """Adapt latents (and optionally decoders) to one image; encoder and LIM stay frozen."""
    cfg = model.cfg
    with torch.no_grad():
        lat0 = model.infer(image[None], cam)
    if steps == 0:
        return TTOResult(lat0, [], model)
    if tune_decoders:
        import copy

        model = copy.deepcopy(model)
    sampling = eval_sampling(cfg, object_centric)
    perc_net = perc_net or PerceptualNet(cfg.perceptual)
    z_bg = lat0.z_bg.detach().clone().requires_grad_(True)
    z_fg = lat0.z_fg.detach().clone().requires_grad_(True)
    p_wd = lat0.p_wd.detach().clone().requires_grad_(True)
    params = [z_bg, z_fg, p_wd]
    for p in model.parameters():
        p.requires_grad_(False)
    if tune_decoders:
        for mod in (model.fg_field, model.bg_field):
            for p in mod.parameters():
                p.requires_grad_(True)
                params.append(p)
    opt = torch.optim.Adam(params, lr=lr)
    r_in = cam.R[0].transpose(0, 1)
    target = image
    losses = []

    def objective():
        lat = lat0.with_(z_bg=z_bg, z_fg=z_fg * lat0.valid[..., None], p_wd=p_wd)
        out = model.render_image(lat, r_in, cam, sampling)
        rec = recon_loss(out.rgb, target)
        return rec, rec + cfg.loss.perc * perceptual_loss(out.rgb, target, perc_net), lat

    try:
        for _ in range(steps):
            opt.zero_grad(set_to_none=True)
            rec, total, _ = objective()
            if not torch.isfinite(total):
                raise TrainingAborted("non-finite loss during test-time optimization", None, {"recon": float(rec.detach())})
            losses.append(float(rec.detach()))
            total.backward()
            opt.step()
        with torch.no_grad():
            rec, _, lat = objective()
        losses.append(float(rec.detach()))
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        for p in model.encoder.trunk.parameters():
            p.requires_grad_(not model.encoder.frozen)
    return TTOResult(lat.detached(), losses, model)


def interpolate_latents(z_a: torch.Tensor, z_b: torch.Tensor, t: float) -> torch.Tensor:
    if t == 0:
        return z_a.clone()
    if t == 1:
        return z_b.clone()
    return (1 - t) * z_a + t * z_b


def interpolate_scene(a: SceneLatents, b: SceneLatents, t: float) -> SceneLatents:
    if t == 0:
        valid = a.valid.clone()
    elif t == 1:
        valid = b.valid.clone()
    else:
        valid = a.valid | b.valid
    return SceneLatents(
        interpolate_latents(a.z_bg, b.z_bg, t), interpolate_latents(a.z_fg, b.z_fg, t),
        interpolate_latents(a.p_img, b.p_img, t), valid, interpolate_latents(a.p_wd, b.p_wd, t),
    )
