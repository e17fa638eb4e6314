"""Command-line entry point: ``objcentric <command> ...``.

Environment variables:
  OBJCENTRIC_OUT      overrides every ``--out`` argument
  OBJCENTRIC_THREADS  caps torch intra-op threads (default: config num_threads)
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .arrayio import write_array
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .geometry import CameraPose
from .metrics import EditSpec, apply_edit
from .model import build_model
from .pipeline import ExperimentConfig, Renderer, eval_flags, evaluate, run_experiment
from .scenegen import build_dataset, load_dataset
from .training import TrainingAborted, interpolate_scene, model_from_checkpoint, prior_transfer, test_time_optimize, train_stage

log = logging.getLogger("objcentric")


class CliError(RuntimeError):
    pass


def _out(path: str | None) -> Path:
    p = Path(os.environ.get("OBJCENTRIC_OUT") or path or ".")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _threads(cfg: RunConfig):
    cap = os.environ.get("OBJCENTRIC_THREADS")
    n = cfg.num_threads if cap is None else min(cfg.num_threads, int(cap))
    torch.set_num_threads(max(1, n))


def _overrides(items) -> dict:
    """``a.b=v`` pairs -> nested dict; values parsed as YAML scalars."""
    doc: dict = {}
    for item in items or []:
        key, _, val = item.partition("=")
        if not _:
            raise ConfigError(f"override {item!r} must look like key=value", [item])
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(val)
    return doc


def _config(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args.set))
    _threads(cfg)
    return cfg


def _save_png(path: Path, rgb) -> None:
    arr = rgb.detach().cpu().numpy() if isinstance(rgb, torch.Tensor) else np.asarray(rgb)
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def _load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _load_camera(path, index: int) -> CameraPose:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, list):
        doc = doc[index]
    return CameraPose.from_dict(doc)


def _load_model(path):
    ck = load_checkpoint(path)
    model = model_from_checkpoint(ck)
    _threads(model.cfg)
    return ck, model, Renderer(model, eval_flags(ck.meta, model.cfg))


def _write_render(out: Path, stem: str, res) -> None:
    _save_png(out / f"{stem}.png", res.rgb)
    write_array(out / f"{stem}_density.ocfa", res.field_maps.reshape(res.field_maps.shape[0], -1).numpy().astype(np.float32))
    Image.fromarray(res.seg.numpy().astype(np.uint8), mode="L").save(out / f"{stem}_seg.png")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


# -- commands ----------------------------------------------------------------

def cmd_gen(args):
    cfg = _config(args)
    out = _out(args.out)
    n = args.n_scenes
    manifest = build_dataset(cfg.generator, n, out, workers=args.workers)
    print(json.dumps({"scenes": len(manifest["scenes"]), "out": str(out)}))


def cmd_train(args):
    cfg = _config(args)
    cfg.train.stage = args.stage
    data = args.data or cfg.dataset
    if data is None:
        raise CliError("no dataset given (--data or config 'dataset')")
    ds = load_dataset(data)
    out = _out(args.out)
    if args.init:
        model = prior_transfer(load_checkpoint(args.init), cfg)
    else:
        if args.stage == "full":
            log.info("no --init: training the no-prior ablation from random initialization")
        model = build_model(cfg)
    try:
        ck = train_stage(model, ds, cfg, log_path=out / "train.log.jsonl", out_dir=out)
    except TrainingAborted as e:
        raise CliError(f"{e} (last good checkpoint: {e.checkpoint_path}; diagnostics {e.diagnostics})") from e
    ck.meta["complete"] = True
    ck.meta["init"] = str(args.init) if args.init else None
    save_checkpoint(ck, out / f"{args.stage}.ckpt")
    _write_json(out / "config.json", cfg.model_dump(mode="json"))
    print(json.dumps({"checkpoint": str(out / f"{args.stage}.ckpt"), "steps": ck.meta["step"]}))


def cmd_eval(args):
    ck, model, r = _load_model(args.ckpt)
    ds = load_dataset(args.data)
    rep = evaluate(model, ds, r.flags, split=args.split, input_view=args.input_view)
    text = rep.to_text()
    out = _out(args.out)
    (out / f"report_{args.split}.tsv").write_text(text)
    _write_json(out / f"summary_{args.split}.json", {"summary": rep.summary(), "config": ck.config})
    sys.stdout.write(text)


def cmd_render(args):
    ck, model, r = _load_model(args.ckpt)
    ds = load_dataset(args.data)
    recs = [x for x in ds.records if x.index == args.scene]
    if not recs:
        raise CliError(f"scene {args.scene} not in dataset")
    rec = recs[0]
    lat = r.infer(rec.rgb[args.input_view], rec.cameras[args.input_view])
    out = _out(args.out)
    if args.pose:
        poses = [("novel", _load_camera(args.pose, 0))]
    else:
        views = [args.view] if args.view is not None else range(len(rec.cameras))
        poses = [(f"view_{v}", rec.cameras[v]) for v in views]
    for stem, pose in poses:
        _write_render(out, stem, r.render(lat, rec.cameras[args.input_view], pose))
    _write_json(out / "config.json", ck.config)


def cmd_segment(args):
    ck, model, r = _load_model(args.ckpt)
    cam = _load_camera(args.camera, args.camera_index)
    lat = r.infer(_load_image(args.image), cam)
    res = r.render(lat, cam, cam)
    out = _out(args.out)
    _write_render(out, "input", res)
    print(json.dumps({"labels": sorted(int(v) for v in np.unique(res.seg.numpy())), "out": str(out)}))


def _edit_spec(args) -> EditSpec:
    if args.edit:
        doc = json.loads(Path(args.edit).read_text()) if Path(args.edit).is_file() else json.loads(args.edit)
        return EditSpec.from_dict(doc)
    return EditSpec(args.op, args.slot, tuple(args.delta or (0.0, 0.0, 0.0)))


def cmd_edit(args):
    ck, model, r = _load_model(args.ckpt)
    cam = _load_camera(args.camera, args.camera_index)
    spec = _edit_spec(args)
    lat = r.infer(_load_image(args.image), cam)
    edited = apply_edit(lat, spec)
    out = _out(args.out)
    _write_render(out, "original", r.render(lat, cam, cam))
    _write_render(out, "edited", r.render(edited, cam, cam))
    _write_json(out / "edit.json", spec.to_dict())


def cmd_tto(args):
    ck, model, r = _load_model(args.ckpt)
    cam_pose = _load_camera(args.camera, args.camera_index)
    cam = r.camera(cam_pose)
    img = torch.tensor(_load_image(args.image))
    steps = args.steps if args.steps is not None else model.cfg.tto.steps
    lr = args.lr if args.lr is not None else model.cfg.tto.lr
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(model.cfg.tto.seed)
        res = test_time_optimize(model, img, cam, steps, lr, tune_decoders=args.tune_decoders or model.cfg.tto.tune_decoders,
                                 object_centric=r.flags.object_centric)
    out = _out(args.out)
    rr = Renderer(res.model, r.flags)
    _write_render(out, "before", r.render(r.infer(img.numpy(), cam_pose), cam_pose, cam_pose))
    _write_render(out, "after", rr.render(res.latents, cam_pose, cam_pose))
    _write_json(out / "tto.json", {"steps": steps, "lr": lr, "recon": res.losses})
    print(json.dumps({"initial": res.losses[0] if res.losses else None, "final": res.losses[-1] if res.losses else None}))


def cmd_interp(args):
    ck, model, r = _load_model(args.ckpt)
    cam = _load_camera(args.camera, args.camera_index)
    la = r.infer(_load_image(args.image_a), cam)
    lb = r.infer(_load_image(args.image_b), cam)
    out = _out(args.out)
    n = args.n_frames
    for i in range(n):
        t = i / (n - 1) if n > 1 else 0.0
        _write_render(out, f"frame_{i:03d}", r.render(interpolate_scene(la, lb, t), cam, cam))


def cmd_experiment(args):
    doc = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    exp = ExperimentConfig.model_validate(doc or {})
    res = run_experiment(exp, _out(args.out), reuse=not args.no_reuse)
    print(json.dumps(res, sort_keys=True))


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="objcentric", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(fn=fn)
        s.add_argument("--out", help="output directory")
        return s

    def with_config(s):
        s.add_argument("--config", help="YAML run config")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")

    def with_camera(s):
        s.add_argument("--camera", required=True, help="camera JSON (a pose or a list of poses)")
        s.add_argument("--camera-index", type=int, default=0)

    s = cmd("gen", cmd_gen, "generate a procedural multi-view dataset")
    with_config(s)
    s.add_argument("--n-scenes", type=int, required=True)
    s.add_argument("--workers", type=int, default=1)

    s = cmd("train", cmd_train, "train one stage")
    with_config(s)
    s.add_argument("--stage", choices=["prior", "full"], required=True)
    s.add_argument("--init", help="prior-stage checkpoint to transfer from")
    s.add_argument("--data", help="dataset directory")

    s = cmd("eval", cmd_eval, "evaluate a checkpoint on a dataset split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--input-view", type=int, default=0)

    s = cmd("render", cmd_render, "render views of a dataset scene")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scene", type=int, required=True)
    s.add_argument("--input-view", type=int, default=0)
    s.add_argument("--view", type=int)
    s.add_argument("--pose", help="camera JSON for a novel pose")

    s = cmd("segment", cmd_segment, "segment a single image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    with_camera(s)

    s = cmd("edit", cmd_edit, "translate or remove an object")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    with_camera(s)
    s.add_argument("--edit", help="edit spec as JSON text or file")
    s.add_argument("--op", choices=["translate", "remove"], default="remove")
    s.add_argument("--slot", type=int, default=0)
    s.add_argument("--delta", type=float, nargs=3)

    s = cmd("tto", cmd_tto, "test-time optimization on one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    with_camera(s)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--tune-decoders", action="store_true")

    s = cmd("interp", cmd_interp, "interpolate the latents of two images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image-a", required=True)
    s.add_argument("--image-b", required=True)
    with_camera(s)
    s.add_argument("--n-frames", type=int, default=5)

    s = cmd("experiment", cmd_experiment, "run the two-stage experiment with its ablation")
    s.add_argument("--config", help="YAML experiment config")
    s.add_argument("--no-reuse", action="store_true")
    return p


def error_line(exc: BaseException) -> str:
    doc = {"error": type(exc).__name__, "message": str(exc).splitlines()[0] if str(exc) else ""}
    if isinstance(exc, ConfigError):
        doc["offending"] = exc.offending
    return json.dumps(doc, sort_keys=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (ConfigError, CheckpointError, CliError, OSError, ValueError, RuntimeError) as e:
        print(error_line(e), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
