"""Procedural multi-object scenes and an analytic oracle renderer.

Scenes are CLEVR-like primitives resting on a textured ground plane
(z = 0). The oracle ray-traces every pixel center exactly, so its instance
masks and depth maps are ground truth for the segmentation and
view-synthesis metrics. It shares no code with the learned renderer.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .arrayio import read_array, write_array
from .config import GeneratorConfig
from .geometry import CameraPose, GeometryError, look_at

log = logging.getLogger(__name__)

DATASET_FORMAT = 1
EPS = 1e-9

PALETTE = (
    (0.85, 0.15, 0.15),
    (0.15, 0.70, 0.20),
    (0.15, 0.30, 0.90),
    (0.90, 0.80, 0.10),
    (0.60, 0.20, 0.80),
    (0.10, 0.75, 0.80),
    (0.95, 0.50, 0.10),
    (0.92, 0.92, 0.92),
)

# (pattern, color_a, color_b, period)
GROUND_TEXTURES = (
    ("checker", (0.55, 0.50, 0.45), (0.35, 0.32, 0.30), 1.0),
    ("stripes_x", (0.45, 0.52, 0.45), (0.30, 0.36, 0.32), 1.0),
    ("stripes_y", (0.52, 0.45, 0.40), (0.40, 0.30, 0.28), 1.0),
    ("plain", (0.48, 0.48, 0.52), (0.48, 0.48, 0.52), 1.0),
    ("diagonal", (0.40, 0.42, 0.50), (0.28, 0.30, 0.38), 1.2),
    ("checker", (0.36, 0.40, 0.46), (0.50, 0.54, 0.58), 1.4),
)


class PlacementError(RuntimeError):
    pass


class DatasetIOError(RuntimeError):
    pass


@dataclass
class ObjectSpec:
    shape: Literal["sphere", "cube", "cylinder"]
    size: float
    albedo: tuple[float, float, float]
    position: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("object size must be positive")
        self.albedo = tuple(float(a) for a in self.albedo)
        self.position = tuple(float(p) for p in self.position)
        self.size = float(self.size)
        self.yaw = float(self.yaw)

    @property
    def bounding_radius(self) -> float:
        return self.size * {"sphere": 1.0, "cube": math.sqrt(3.0), "cylinder": math.sqrt(2.0)}[self.shape]


def resting_height(shape: str, size: float) -> float:
    # every primitive here is symmetric about its center with half-height == size
    return size


@dataclass
class SceneSpec:
    objects: list[ObjectSpec]
    ground_texture_id: int
    rng_seed: int
    scene_center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def without(self, index: int) -> "SceneSpec":
        objs = [o for i, o in enumerate(self.objects) if i != index]
        return SceneSpec(objs, self.ground_texture_id, self.rng_seed, self.scene_center)

    def translated(self, index: int, delta) -> "SceneSpec":
        objs = list(self.objects)
        o = objs[index]
        p = np.asarray(o.position) + np.asarray(delta, dtype=np.float64)
        objs[index] = ObjectSpec(o.shape, o.size, o.albedo, tuple(p), o.yaw)
        return SceneSpec(objs, self.ground_texture_id, self.rng_seed, self.scene_center)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene_center"] = list(self.scene_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        objs = [ObjectSpec(**o) for o in d["objects"]]
        return cls(objs, d["ground_texture_id"], d["rng_seed"], tuple(d["scene_center"]))


@dataclass
class OracleView:
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    instance_mask: np.ndarray  # (H, W) int, 0 = background
    depth: np.ndarray  # (H, W) ray distance
    camera: CameraPose


# -- sampling ----------------------------------------------------------------

def sample_scene(seed: int, cfg: GeneratorConfig) -> SceneSpec:
    rng = np.random.default_rng(seed)
    lo, hi = cfg.count_range
    n = int(rng.integers(lo, hi + 1))
    tex = int(rng.integers(0, cfg.n_ground_textures))
    cx, cy, _ = cfg.scene_center
    objects: list[ObjectSpec] = []
    for k in range(n):
        for _ in range(cfg.max_attempts):
            shape = cfg.shapes[int(rng.integers(0, len(cfg.shapes)))]
            size = float(rng.uniform(*cfg.size_range))
            albedo = PALETTE[int(rng.integers(0, len(PALETTE)))]
            x, y = rng.uniform(-cfg.placement_half_extent, cfg.placement_half_extent, size=2)
            yaw = float(rng.uniform(0, math.pi / 2))
            cand = ObjectSpec(shape, size, albedo, (cx + x, cy + y, resting_height(shape, size)), yaw)
            if all(_separated(cand, o, cfg.overlap_fraction) for o in objects):
                objects.append(cand)
                break
        else:
            raise PlacementError(f"seed {seed}: could not place object {k} in {cfg.max_attempts} attempts")
    return SceneSpec(objects, tex, seed, tuple(cfg.scene_center))


def _separated(a: ObjectSpec, b: ObjectSpec, overlap: float) -> bool:
    d = np.linalg.norm(np.subtract(a.position, b.position))
    return d >= (1.0 - overlap) * (a.bounding_radius + b.bounding_radius)


def camera_rig(center, n_views: int, radius: float, elevation: float, focal: float, width: int, height: int,
               principal: tuple[float, float] | None = None) -> list[CameraPose]:
    """Cameras at equal azimuth steps on a circle, all looking at ``center``."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if radius <= 0:
        raise GeometryError("camera radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    if principal is None:
        principal = (width / 2.0, height / 2.0)
    poses = []
    for j in range(n_views):
        az = 2 * math.pi * j / n_views
        eye = center + radius * np.array([
            math.cos(elevation) * math.cos(az),
            math.cos(elevation) * math.sin(az),
            math.sin(elevation),
        ])
        poses.append(CameraPose(look_at(eye, center), eye, focal, principal, width, height))
    return poses


def rig_for(cfg: GeneratorConfig, scene: SceneSpec | None = None) -> list[CameraPose]:
    center = scene.scene_center if scene is not None else cfg.scene_center
    return camera_rig(center, cfg.n_views, cfg.cam_radius, math.radians(cfg.cam_elevation_deg),
                      cfg.focal, cfg.image_size, cfg.image_size)


# -- analytic ray tracing ----------------------------------------------------

def camera_rays(camera: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Unit world-space rays through every pixel center, row-major: (H*W, 3) each."""
    u = np.arange(camera.width) + 0.5
    v = np.arange(camera.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - camera.principal[0]) / camera.focal,
                      (vv - camera.principal[1]) / camera.focal,
                      np.ones_like(uu)], -1).reshape(-1, 3)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def intersect_object(obj: ObjectSpec, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First-hit depth (inf on miss) and world normal for each ray."""
    c = np.asarray(obj.position)
    s = obj.size
    n_rays = o.shape[0]
    t = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        if obj.shape == "sphere":
            oc = o - c
            b = np.einsum("ij,ij->i", oc, d)
            cc = np.einsum("ij,ij->i", oc, oc) - s * s
            disc = b * b - cc
            hit = disc >= 0
            t0 = -b - np.sqrt(np.where(hit, disc, 0.0))
            hit &= t0 > EPS
            t[hit] = t0[hit]
            p = o + t[:, None] * d
            normal[hit] = (p[hit] - c) / s
        elif obj.shape == "cube":
            rot = _rot_z(obj.yaw)
            ol = (o - c) @ rot  # == rot^T (o - c)
            dl = d @ rot
            t1 = (-s - ol) / dl
            t2 = (s - ol) / dl
            tlo = np.minimum(t1, t2)
            thi = np.maximum(t1, t2)
            tmin = np.nanmax(tlo, axis=1)
            tmax = np.nanmin(thi, axis=1)
            hit = (tmax >= tmin) & (tmin > EPS)
            t[hit] = tmin[hit]
            axis = np.nanargmax(tlo, axis=1)
            nl = np.zeros((n_rays, 3))
            nl[np.arange(n_rays), axis] = -np.sign(dl[np.arange(n_rays), axis])
            normal[hit] = nl[hit] @ rot.T
        elif obj.shape == "cylinder":
            rel = o - np.array([c[0], c[1], 0.0])
            top = 2 * s
            a = d[:, 0] ** 2 + d[:, 1] ** 2
            b = rel[:, 0] * d[:, 0] + rel[:, 1] * d[:, 1]
            cc = rel[:, 0] ** 2 + rel[:, 1] ** 2 - s * s
            disc = b * b - a * cc
            ts = (-b - np.sqrt(np.where(disc >= 0, disc, 0.0))) / a
            zs = rel[:, 2] + ts * d[:, 2]
            side = (disc >= 0) & (a > 0) & (ts > EPS) & (zs >= 0) & (zs <= top)
            tc = (top - rel[:, 2]) / d[:, 2]
            pc = rel + tc[:, None] * d
            cap = (tc > EPS) & (pc[:, 0] ** 2 + pc[:, 1] ** 2 <= s * s)
            ts = np.where(side, ts, np.inf)
            tc = np.where(cap, tc, np.inf)
            use_cap = tc < ts
            t = np.minimum(ts, tc)
            hit = np.isfinite(t)
            p = rel + np.where(hit, t, 0.0)[:, None] * d
            ns = np.stack([p[:, 0] / s, p[:, 1] / s, np.zeros(n_rays)], -1)
            normal = np.where(use_cap[:, None], np.array([0.0, 0.0, 1.0]), ns)
            normal[~hit] = 0.0
        else:
            raise ValueError(f"unknown shape {obj.shape}")
    return t, normal


def ground_color(tex_id: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    pattern, ca, cb, period = GROUND_TEXTURES[tex_id % len(GROUND_TEXTURES)]
    ca, cb = np.asarray(ca), np.asarray(cb)
    if pattern == "checker":
        sel = (np.floor(x / period) + np.floor(y / period)) % 2 == 0
    elif pattern == "stripes_x":
        sel = np.floor(x / period) % 2 == 0
    elif pattern == "stripes_y":
        sel = np.floor(y / period) % 2 == 0
    elif pattern == "diagonal":
        sel = np.floor((x + y) / period) % 2 == 0
    else:
        sel = np.ones_like(x, dtype=bool)
    return np.where(sel[:, None], ca, cb)


def trace(scene: SceneSpec, o: np.ndarray, d: np.ndarray):
    """Nearest hit among objects and ground: (depth, label, normal)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(d[:, 2] < 0, -o[:, 2] / d[:, 2], np.inf)
    if not np.all(np.isfinite(t_ground) & (t_ground > 0)):
        raise GeometryError("every pixel ray must hit the ground plane; lower the camera horizon")
    depth = t_ground.copy()
    label = np.zeros(o.shape[0], dtype=np.int32)
    normal = np.tile(np.array([0.0, 0.0, 1.0]), (o.shape[0], 1))
    for k, obj in enumerate(scene.objects):
        tk, nk = intersect_object(obj, o, d)
        closer = tk < depth
        depth[closer] = tk[closer]
        label[closer] = k + 1
        normal[closer] = nk[closer]
    return depth, label, normal, t_ground


def render_oracle(scene: SceneSpec, camera: CameraPose, cfg: GeneratorConfig) -> OracleView:
    o, d = camera_rays(camera)
    depth, label, normal, _ = trace(scene, o, d)
    light = np.asarray(cfg.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    p = o + depth[:, None] * d
    lambert = np.clip(normal @ light, 0.0, None)
    if cfg.shadows:
        so = p + 1e-6 * normal
        sd = np.broadcast_to(light, so.shape).copy()
        blocked = np.zeros(len(p), dtype=bool)
        for obj in scene.objects:
            ts, _ = intersect_object(obj, so, sd)
            blocked |= np.isfinite(ts)
        lambert = np.where(blocked, 0.0, lambert)
    shade = cfg.ambient + cfg.diffuse * lambert
    albedo = ground_color(scene.ground_texture_id, p[:, 0], p[:, 1])
    for k, obj in enumerate(scene.objects):
        albedo[label == k + 1] = obj.albedo
    rgb = np.clip(albedo * shade[:, None], 0.0, 1.0)
    h, w = camera.height, camera.width
    return OracleView(rgb.reshape(h, w, 3), label.reshape(h, w), depth.reshape(h, w), camera)


# -- dataset files -------------------------------------------------------------

def _to_u8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def _write_scene(args) -> dict:
    idx, seed, split, cfg_json, root = args
    cfg = GeneratorConfig.model_validate_json(cfg_json)
    scene_dir = Path(root) / f"scene_{idx:05d}"
    try:
        scene = sample_scene(seed, cfg)
        scene_dir.mkdir(parents=True, exist_ok=True)
        cams = rig_for(cfg, scene)
        for j, cam in enumerate(cams):
            view = render_oracle(scene, cam, cfg)
            Image.fromarray(_to_u8(view.rgb)).save(scene_dir / f"view_{j}.png", optimize=False)
            Image.fromarray(view.instance_mask.astype(np.uint8), mode="L").save(scene_dir / f"mask_{j}.png")
            write_array(scene_dir / f"depth_{j}.ocfa", view.depth.astype(np.float32))
        (scene_dir / "cameras.json").write_text(json.dumps([c.to_dict() for c in cams], indent=1))
        (scene_dir / "scene.json").write_text(json.dumps(scene.to_dict(), indent=1))
    except OSError as e:
        raise DatasetIOError(f"scene {idx}: {e}") from e
    return {"index": idx, "dir": scene_dir.name, "seed": seed, "split": split,
            "object_count": len(scene.objects)}


def build_dataset(cfg: GeneratorConfig, n_scenes: int, out_path, workers: int = 1) -> dict:
    """Render ``n_scenes`` scenes under ``out_path`` and write the manifest.

    Scene ``i`` uses seed ``cfg.seed + i``; the last ``cfg.n_test`` scenes are
    tagged ``test``, the rest ``train``.
    """
    root = Path(out_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create {root}: {e}") from e
    cfg_json = cfg.model_dump_json()
    n_test = min(cfg.n_test, n_scenes)
    jobs = [(i, cfg.seed + i, "test" if i >= n_scenes - n_test else "train", cfg_json, str(root))
            for i in range(n_scenes)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            entries = list(ex.map(_write_scene, jobs))
    else:
        entries = [_write_scene(j) for j in jobs]
    manifest = {
        "format_version": DATASET_FORMAT,
        "generator": cfg.model_dump(mode="json"),
        "splits": {s: [e["index"] for e in entries if e["split"] == s] for s in ("train", "test")},
        "scenes": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


@dataclass
class SceneRecord:
    index: int
    split: str
    scene: SceneSpec
    cameras: list[CameraPose]
    rgb: np.ndarray  # (V, H, W, 3) float32
    masks: np.ndarray  # (V, H, W) int
    depth: np.ndarray  # (V, H, W) float32


@dataclass
class Dataset:
    root: Path
    generator: GeneratorConfig
    records: list[SceneRecord] = field(default_factory=list)

    def split(self, name: str) -> list[SceneRecord]:
        return [r for r in self.records if r.split == name]


def load_dataset(path, split: str | None = None) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError as e:
        raise DatasetIOError(f"cannot read manifest under {root}: {e}") from e
    if manifest.get("format_version") != DATASET_FORMAT:
        raise DatasetIOError(f"{root}: unsupported dataset format {manifest.get('format_version')}")
    gen = GeneratorConfig.model_validate(manifest["generator"])
    ds = Dataset(root, gen)
    for e in manifest["scenes"]:
        if split is not None and e["split"] != split:
            continue
        sd = root / e["dir"]
        cams = [CameraPose.from_dict(c) for c in json.loads((sd / "cameras.json").read_text())]
        scene = SceneSpec.from_dict(json.loads((sd / "scene.json").read_text()))
        rgb = np.stack([np.asarray(Image.open(sd / f"view_{j}.png"), dtype=np.float32) / 255.0
                        for j in range(len(cams))])
        masks = np.stack([np.asarray(Image.open(sd / f"mask_{j}.png"), dtype=np.int64) for j in range(len(cams))])
        depth = np.stack([read_array(sd / f"depth_{j}.ocfa") for j in range(len(cams))])
        ds.records.append(SceneRecord(e["index"], e["split"], scene, cams, rgb, masks, depth))
    return ds
