"""Evaluation protocol and the desk-scale end-to-end experiment."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from pydantic import Field

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, SamplingConfig, StageConfig, _Strict, merge, parse_config
from .geometry import CameraBatch
from .lim import SceneLatents
from .losses import PerceptualNet
from .metrics import MetricsReport, SegmentationPair, ari, perceptual_distance, psnr, ssim
from .model import ObjectCentricModel, RenderOutput, build_model
from .scenegen import Dataset, SceneRecord, build_dataset, load_dataset
from .training import Flags, model_from_checkpoint, prior_transfer, train_stage

log = logging.getLogger(__name__)


def eval_flags(ckpt_meta: dict | None, cfg: RunConfig) -> Flags:
    """Sampling flags of the last training epoch (what the model was fitted under)."""
    f = (ckpt_meta or {}).get("final_flags")
    if f is None:
        last = cfg.train.epochs - 1
        oc = last >= cfg.train.object_centric_epoch
        return Flags(True, oc, not oc, False)
    return Flags(f["perceptual"], f["object_centric"], f["locality"], f["fine"])


def eval_sampling(cfg: RunConfig, flags: Flags) -> SamplingConfig:
    s = cfg.sampling.model_copy()
    s.object_centric_enabled = flags.object_centric
    s.jitter = False
    return s


class Renderer:
    """Deterministic inference + rendering for one trained model."""

    def __init__(self, model: ObjectCentricModel, flags: Flags):
        self.model = model.eval()
        self.cfg = model.cfg
        self.flags = flags
        self.sampling = eval_sampling(self.cfg, flags)

    def camera(self, pose) -> CameraBatch:
        return CameraBatch.from_poses([pose])

    @torch.no_grad()
    def infer(self, image: np.ndarray | torch.Tensor, pose) -> SceneLatents:
        img = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        return self.model.infer(img[None], self.camera(pose))

    @torch.no_grad()
    def render(self, lat: SceneLatents, input_pose, pose) -> RenderOutput:
        r_in = self.camera(input_pose).R[0].transpose(0, 1)
        return self.model.render_image(lat, r_in, self.camera(pose), self.sampling, self.flags.locality)


def evaluate(model: ObjectCentricModel, dataset: Dataset, flags: Flags, split: str = "test", input_view: int = 0,
             perc_net: PerceptualNet | None = None) -> MetricsReport:
    r = Renderer(model, flags)
    perc_net = perc_net or PerceptualNet(model.cfg.perceptual)
    report = MetricsReport(perc_label=perc_net.label)
    for rec in dataset.split(split):
        lat = r.infer(rec.rgb[input_view], rec.cameras[input_view])
        for v, pose in enumerate(rec.cameras):
            out = r.render(lat, rec.cameras[input_view], pose)
            pred = out.rgb.numpy()
            seg = out.seg.numpy()
            role = "input" if v == input_view else "novel"
            pair = SegmentationPair(seg, rec.masks[v], role)
            row = {"scene": rec.index, "view": v, "role": role, "PSNR": psnr(pred, rec.rgb[v]),
                   "SSIM": ssim(pred, rec.rgb[v]), "perc-dist": perceptual_distance(pred, rec.rgb[v], perc_net),
                   "ARI": float("nan"), "FG-ARI": float("nan"), "NV-ARI": float("nan")}
            if role == "input":
                row["ARI"] = ari(pair)
                row["FG-ARI"] = ari(pair, foreground_only=True)
            else:
                row["NV-ARI"] = ari(pair)
            report.add(**row)
    return report


# -- end-to-end experiment ---------------------------------------------------

class ExperimentConfig(_Strict):
    """Two-stage desk-scale run plus the no-prior ablation."""

    base: dict = Field(default_factory=dict)  # RunConfig overrides shared by both stages
    prior_train: dict = Field(default_factory=dict)  # StageConfig overrides for stage 1
    full_train: dict = Field(default_factory=dict)  # StageConfig overrides for stage 2
    n_prior_scenes: int = 64
    n_full_scenes: int = 128
    n_test: int = 16
    prior_seed: int = 1000
    full_seed: int = 5000
    ablation: bool = True

    def run_config(self, stage: str) -> RunConfig:
        doc = merge({}, self.base)
        gen = dict(doc.get("generator", {}))
        train = merge({}, self.prior_train if stage == "prior" else self.full_train)
        train["stage"] = stage
        if stage == "prior":
            gen.update(count_range=[1, 1], seed=self.prior_seed, n_test=0)
        else:
            gen.update(seed=self.full_seed, n_test=self.n_test)
        doc["generator"] = gen
        doc["train"] = merge(doc.get("train", {}), train)
        return parse_config(doc)

    def digest(self) -> str:
        text = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _progress(tag):
    def f(epoch, recon, elapsed):
        log.info("[%s] epoch %d recon %.5f (%.0fs)", tag, epoch, recon, elapsed)
    return f


def ensure_dataset(cfg: RunConfig, n: int, path: Path) -> Dataset:
    if not (path / "manifest.json").is_file():
        build_dataset(cfg.generator, n, path)
    return load_dataset(path)


def run_experiment(exp: ExperimentConfig, out_dir, reuse: bool = True) -> dict:
    """Train prior -> transfer -> full, plus the no-prior ablation; evaluate both on held-out scenes.

    Artifacts land in ``out_dir``; a finished run with the same config digest
    is reused when ``reuse`` is set.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary_path = out / "summary.json"
    if reuse and summary_path.is_file():
        prev = json.loads(summary_path.read_text())
        if prev.get("digest") == exp.digest():
            return prev
    (out / "experiment.json").write_text(json.dumps(exp.model_dump(mode="json"), sort_keys=True, indent=1))
    cfg_prior, cfg_full = exp.run_config("prior"), exp.run_config("full")
    torch.set_num_threads(cfg_full.num_threads)
    ds_prior = ensure_dataset(cfg_prior, exp.n_prior_scenes, out / "data_prior")
    ds_full = ensure_dataset(cfg_full, exp.n_full_scenes + exp.n_test, out / "data_full")
    timings = {}

    def stage(tag, model, cfg, ds):
        path = out / f"{tag}.ckpt"
        if reuse and path.is_file():
            ck = load_checkpoint(path)
            if ck.config == cfg.model_dump(mode="json") and ck.meta.get("complete"):
                return ck
        t0 = time.time()
        ck = train_stage(model, ds, cfg, log_path=out / f"{tag}.log.jsonl", out_dir=out / tag,
                         progress=_progress(tag))
        ck.meta["complete"] = True
        timings[tag] = time.time() - t0
        save_checkpoint(ck, path)
        return ck

    ck_prior = stage("prior", build_model(cfg_prior), cfg_prior, ds_prior)
    ck_full = stage("full", prior_transfer(ck_prior, cfg_full), cfg_full, ds_full)
    results = {"digest": exp.digest(), "timings": timings}
    runs = [("full", ck_full)]
    if exp.ablation:
        runs.append(("ablation", stage("ablation", build_model(cfg_full), cfg_full, ds_full)))
    for tag, ck in runs:
        model = model_from_checkpoint(ck)
        rep = evaluate(model, ds_full, eval_flags(ck.meta, cfg_full))
        (out / f"report_{tag}.tsv").write_text(rep.to_text())
        results[tag] = rep.summary()
    summary_path.write_text(json.dumps(results, sort_keys=True, indent=1))
    return results
