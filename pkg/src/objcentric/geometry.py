"""Camera and ray math, 2D-to-3D position lifting, and object-local frames.

Conventions: world is right-handed with the ground plane at z = 0 and +z up.
Cameras follow the OpenCV layout (x right, y down, z forward) and
``CameraPose.rotation`` maps camera axes to world axes. Normalized image
coordinates (u, v) live in [-1, 1]^2 with u along image columns and v along
rows; (-1, -1) is the top-left image corner.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class GeometryError(ValueError):
    pass


class GrazingRayError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


@dataclass
class CameraPose:
    rotation: np.ndarray  # 3x3 camera-to-world
    translation: np.ndarray  # camera center in world units
    focal: float
    principal: tuple[float, float]
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.principal = (float(self.principal[0]), float(self.principal[1]))
        self.focal = float(self.focal)
        if self.focal <= 0:
            raise GeometryError("focal length must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise GeometryError(f"rotation is not orthonormal (max err {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def world_to_camera(self) -> np.ndarray:
        return self.rotation.T

    def scaled(self, factor: float) -> "CameraPose":
        """Same pose with intrinsics resampled to ``factor`` times the resolution."""
        w, h = int(round(self.width * factor)), int(round(self.height * factor))
        return CameraPose(
            self.rotation.copy(),
            self.translation.copy(),
            self.focal * factor,
            (self.principal[0] * factor, self.principal[1] * factor),
            w,
            h,
        )

    def to_dict(self) -> dict:
        return {
            "R": self.rotation.tolist(),
            "t": self.translation.tolist(),
            "focal": self.focal,
            "principal": list(self.principal),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["R"]), np.array(d["t"]), d["focal"], tuple(d["principal"]), d["width"], d["height"])

    def params_vector(self) -> np.ndarray:
        """Flattened (R, t, focal) fed to the depth-lifting scale head."""
        return np.concatenate([self.rotation.reshape(-1), self.translation, [self.focal / self.width]])


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise GeometryError("zero ray direction")
        self.direction = d / n

    def at(self, t) -> np.ndarray:
        return self.origin + np.asarray(t, dtype=np.float64)[..., None] * self.direction


@dataclass
class GroundPlane:
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(self.offset)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        raise GeometryError("view direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def normalized_to_pixel(p_img, width: int, height: int):
    p = np.asarray(p_img, dtype=np.float64)
    return np.stack([(p[..., 0] + 1) * 0.5 * width, (p[..., 1] + 1) * 0.5 * height], -1)


def pixel_to_normalized(px, width: int, height: int):
    px = np.asarray(px, dtype=np.float64)
    return np.stack([2 * px[..., 0] / width - 1, 2 * px[..., 1] / height - 1], -1)


def pixel_to_ray(camera: CameraPose, p_img) -> Ray:
    px = normalized_to_pixel(p_img, camera.width, camera.height)
    d_cam = np.array([
        (px[0] - camera.principal[0]) / camera.focal,
        (px[1] - camera.principal[1]) / camera.focal,
        1.0,
    ])
    return Ray(camera.center.copy(), camera.rotation @ d_cam)


def project(camera: CameraPose, x) -> tuple[np.ndarray, np.ndarray]:
    """World points -> (normalized image coordinates, camera-frame depth z)."""
    x = np.asarray(x, dtype=np.float64)
    xc = (x - camera.center) @ camera.rotation  # rows: R^T (x - c)
    z = xc[..., 2]
    u = camera.focal * xc[..., 0] / z + camera.principal[0]
    v = camera.focal * xc[..., 1] / z + camera.principal[1]
    return pixel_to_normalized(np.stack([u, v], -1), camera.width, camera.height), z


def lift_plane(camera: CameraPose, p_img, plane: GroundPlane) -> np.ndarray:
    ray = pixel_to_ray(camera, p_img)
    return intersect_plane(ray, plane)


def intersect_plane(ray: Ray, plane: GroundPlane) -> np.ndarray:
    denom = float(plane.normal @ ray.direction)
    if abs(denom) < 1e-6:
        raise GrazingRayError("ray is parallel to the ground plane")
    t = (plane.offset - float(plane.normal @ ray.origin)) / denom
    if t <= 0:
        raise BehindCameraError(f"plane intersection behind the camera (t={t:.3g})")
    return ray.at(t)


def check_rotation(R, tol: float = 1e-4):
    if isinstance(R, torch.Tensor):
        eye = torch.eye(3, dtype=R.dtype, device=R.device)
        err = float((R.transpose(-1, -2) @ R - eye).abs().max())
    else:
        R = np.asarray(R, dtype=np.float64)
        err = float(np.abs(R.T @ R - np.eye(3)).max())
    if err > tol:
        raise GeometryError(f"non-orthonormal rotation (max err {err:.2e})")


def to_object_frame(x, R, p_wd):
    """x_local = R (x - p_wd). Works on numpy arrays or broadcastable tensors."""
    check_rotation(R)
    if isinstance(x, torch.Tensor):
        return torch.einsum("...ij,...j->...i", R, x - p_wd)
    x, R, p = (np.asarray(v, dtype=np.float64) for v in (x, R, p_wd))
    return (x - p) @ R.T


def from_object_frame(x_local, R, p_wd):
    if isinstance(x_local, torch.Tensor):
        return torch.einsum("...ji,...j->...i", R, x_local) + p_wd
    x_local, R, p = (np.asarray(v, dtype=np.float64) for v in (x_local, R, p_wd))
    return x_local @ R + p


# -- batched torch versions used inside the model -------------------------

@dataclass
class CameraBatch:
    """Stacked camera tensors: R (B,3,3) c2w, center (B,3), focal/cx/cy (B,), size."""

    R: torch.Tensor
    center: torch.Tensor
    focal: torch.Tensor
    cx: torch.Tensor
    cy: torch.Tensor
    width: int
    height: int

    @classmethod
    def from_poses(cls, poses: list[CameraPose], dtype=torch.float32) -> "CameraBatch":
        w, h = poses[0].width, poses[0].height
        if any(p.width != w or p.height != h for p in poses):
            raise GeometryError("all cameras in a batch must share a resolution")
        return cls(
            torch.tensor(np.stack([p.rotation for p in poses]), dtype=dtype),
            torch.tensor(np.stack([p.center for p in poses]), dtype=dtype),
            torch.tensor([p.focal for p in poses], dtype=dtype),
            torch.tensor([p.principal[0] for p in poses], dtype=dtype),
            torch.tensor([p.principal[1] for p in poses], dtype=dtype),
            w,
            h,
        )

    def params(self) -> torch.Tensor:
        return torch.cat([self.R.reshape(-1, 9), self.center, (self.focal / self.width)[:, None]], -1)

    def index(self, i) -> "CameraBatch":
        sl = slice(i, i + 1) if isinstance(i, int) else i
        return CameraBatch(self.R[sl], self.center[sl], self.focal[sl], self.cx[sl], self.cy[sl], self.width, self.height)


def ray_dirs(cams: CameraBatch, p_img: torch.Tensor) -> torch.Tensor:
    """Unit world directions for normalized coords p_img (B, M, 2) -> (B, M, 3)."""
    u = (p_img[..., 0] + 1) * 0.5 * cams.width
    v = (p_img[..., 1] + 1) * 0.5 * cams.height
    x = (u - cams.cx[:, None]) / cams.focal[:, None]
    y = (v - cams.cy[:, None]) / cams.focal[:, None]
    d_cam = torch.stack([x, y, torch.ones_like(x)], -1)
    d = torch.einsum("bij,bmj->bmi", cams.R, d_cam)
    return F.normalize(d, dim=-1)


def pixel_grid(width: int, height: int, dtype=torch.float32) -> torch.Tensor:
    """Normalized coordinates of pixel centers, row-major with x fastest: (H*W, 2)."""
    xs = (torch.arange(width, dtype=dtype) + 0.5) * 2 / width - 1
    ys = (torch.arange(height, dtype=dtype) + 0.5) * 2 / height - 1
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], -1).reshape(-1, 2)


def lift_plane_batch(cams: CameraBatch, p_img: torch.Tensor, normal, offset: float) -> torch.Tensor:
    """Ray-plane intersection for p_img (B, K, 2) -> (B, K, 3)."""
    d = ray_dirs(cams, p_img)
    n = torch.as_tensor(normal, dtype=d.dtype)
    denom = d @ n
    if bool((denom.abs() < 1e-6).any()):
        raise GrazingRayError("ray is parallel to the ground plane")
    t = (offset - cams.center @ n)[:, None] / denom
    if bool((t <= 0).any()):
        raise BehindCameraError("plane intersection behind the camera")
    return cams.center[:, None, :] + t[..., None] * d


def lift_depth_batch(cams: CameraBatch, p_img: torch.Tensor, scale: torch.Tensor, scene_center) -> torch.Tensor:
    """Extend pixel rays by d * s with d = |camera - scene center|; scale (B, K) > 0."""
    d = ray_dirs(cams, p_img)
    c = torch.as_tensor(scene_center, dtype=d.dtype)
    dist = (cams.center - c).norm(dim=-1)
    return cams.center[:, None, :] + (dist[:, None] * scale)[..., None] * d


def ray_sphere_interval(origins: torch.Tensor, dirs: torch.Tensor, centers: torch.Tensor, radius: float):
    """Entry/exit depths of unit rays (R,3) against spheres (R,J,3). Misses give (0, 0)."""
    oc = origins[:, None, :] - centers
    b = (oc * dirs[:, None, :]).sum(-1)
    c = (oc * oc).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    s = torch.sqrt(torch.clamp(disc, min=0.0))
    t0 = torch.where(hit, -b - s, torch.zeros_like(b))
    t1 = torch.where(hit, -b + s, torch.zeros_like(b))
    return t0, t1, hit
