"""Pinhole cameras, rays, two-view triangulation, and keypoint perturbation.

Conventions, fixed once for the whole package:

* camera-to-world pose: ``R`` (3x3, orthonormal, det +1) and ``t`` (the
  camera center in world units); a world point maps into the camera frame
  by ``R.T @ (X - t)``.
* camera frame: x right, y down, z forward; normalized image coordinates
  are ``(x/z, y/z, 1)``.
* pixel ``(u, v)`` is (column, row); the ray for an integer pixel passes
  through its center, i.e. image-plane coordinate ``(u + 0.5, v + 0.5)``.
* depth values attached to pixels are distances along the unit-norm ray,
  not z-depths.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GeometryError",
    "DegenerateGeometry",
    "Camera",
    "Ray",
    "SparseDepthPrior",
    "make_ray",
    "project",
    "relative_pose",
    "look_at",
    "triangulate",
    "perturb_keypoint",
    "save_cameras",
    "load_cameras",
    "save_priors",
    "load_priors",
]


class GeometryError(Exception):
    pass


class DegenerateGeometry(GeometryError):
    """Triangulation rays are (nearly) parallel."""


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # 3x3 camera-to-world rotation
    t: np.ndarray  # camera center, world units
    near: float
    far: float
    image_id: int = 0
    split: str = "train"

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0.0 < self.near < self.far):
            raise GeometryError(f"need 0 < near < far, got ({self.near}, {self.far})")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9):
            raise GeometryError("R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise GeometryError("R must have determinant +1")

    def to_dict(self) -> dict:
        c2w = np.concatenate([self.R, self.t[:, None]], axis=1)
        return {
            "image_id": self.image_id,
            "split": self.split,
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "c2w": c2w.tolist(),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        c2w = np.asarray(d["c2w"], dtype=np.float64).reshape(3, 4)
        return cls(
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=d["width"], height=d["height"],
            R=c2w[:, :3], t=c2w[:, 3],
            near=d["near"], far=d["far"],
            image_id=d.get("image_id", 0), split=d.get("split", "train"),
        )


@dataclass
class Ray:
    o: np.ndarray
    d: np.ndarray  # unit norm
    near: float
    far: float
    image_id: int = -1
    pixel: tuple[int, int] = (-1, -1)  # (u, v)


@dataclass
class SparseDepthPrior:
    image_id: int
    u: int
    v: int
    depth: float  # distance along the unit-norm ray
    weight: float = 1.0


def make_ray(camera: Camera, pixel) -> Ray:
    """Ray through the center of an integer pixel (u, v)."""
    u, v = pixel
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise GeometryError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    d_cam = np.array([
        (u + 0.5 - camera.cx) / camera.fx,
        (v + 0.5 - camera.cy) / camera.fy,
        1.0,
    ])
    d = camera.R @ d_cam
    d /= np.linalg.norm(d)
    return Ray(o=camera.t.copy(), d=d, near=camera.near, far=camera.far,
               image_id=camera.image_id, pixel=(int(u), int(v)))


def ray_grid(camera: Camera) -> np.ndarray:
    """Unit directions for every pixel, shape (H, W, 3), row = v, col = u."""
    u = np.arange(camera.width, dtype=np.float64) + 0.5
    v = np.arange(camera.height, dtype=np.float64) + 0.5
    x = (u[None, :] - camera.cx) / camera.fx
    y = (v[:, None] - camera.cy) / camera.fy
    dirs = np.stack([
        np.broadcast_to(x, (camera.height, camera.width)),
        np.broadcast_to(y, (camera.height, camera.width)),
        np.ones((camera.height, camera.width)),
    ], axis=-1)
    dirs = dirs @ camera.R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return dirs


def project(camera: Camera, point: np.ndarray):
    """World point -> (u, v, z): float pixel coords and camera-frame z.

    An integer pixel's center projects back to exactly (u, v); callers must
    check z > 0 (in front of the camera) and image bounds themselves.
    """
    p_cam = camera.R.T @ (np.asarray(point, dtype=np.float64) - camera.t)
    z = p_cam[2]
    if z <= 0:
        return np.nan, np.nan, z
    u = camera.fx * p_cam[0] / z + camera.cx - 0.5
    v = camera.fy * p_cam[1] / z + camera.cy - 0.5
    return u, v, z


def normalized_keypoint(camera: Camera, pixel) -> np.ndarray:
    """Normalized image coordinate (x, y, 1) of a pixel center."""
    u, v = pixel
    return np.array([
        (u + 0.5 - camera.cx) / camera.fx,
        (v + 0.5 - camera.cy) / camera.fy,
        1.0,
    ])


def relative_pose(cam1: Camera, cam2: Camera):
    """(R, t) taking camera-2 coordinates into camera-1 coordinates."""
    R = cam1.R.T @ cam2.R
    t = cam1.R.T @ (cam2.t - cam1.t)
    return R, t


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at eye looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise GeometryError("look_at: eye and target coincide")
    z = z / nz
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise GeometryError("look_at: viewing direction parallel to up")
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def triangulate(p1: np.ndarray, p2: np.ndarray, R: np.ndarray, t: np.ndarray):
    """Two-view depths from matched normalized keypoints.

    Solves the 3x2 system  s1 * p1 - s2 * (R @ p2) = t  in the least-squares
    sense and returns (s1, s2, P, residual) where P is the midpoint of the
    two closest ray points, expressed in camera-1 coordinates.
    """
    p1 = np.asarray(p1, dtype=np.float64).reshape(3)
    p2 = np.asarray(p2, dtype=np.float64).reshape(3)
    rp2 = np.asarray(R, dtype=np.float64) @ p2
    A = np.stack([p1, -rp2], axis=1)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[1] < 1e-15 or sv[0] / sv[1] > 1e8:
        raise DegenerateGeometry(
            f"triangulate: rays nearly parallel (condition {sv[0] / max(sv[1], 1e-300):.2e})")
    b = np.asarray(t, dtype=np.float64).reshape(3)
    s, _, _, _ = np.linalg.lstsq(A, b, rcond=None)
    s1, s2 = float(s[0]), float(s[1])
    x1 = s1 * p1
    x2 = s2 * rp2 + b
    midpoint = 0.5 * (x1 + x2)
    residual = float(np.linalg.norm(A @ s - b))
    return s1, s2, midpoint, residual


def perturb_keypoint(p: np.ndarray, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Shift a normalized keypoint by exactly delta in a random in-plane direction."""
    if delta < 0:
        raise GeometryError("perturb_keypoint: delta must be >= 0")
    p = np.asarray(p, dtype=np.float64).copy()
    theta = rng.uniform(0.0, 2.0 * np.pi)
    p[0] += delta * np.cos(theta)
    p[1] += delta * np.sin(theta)
    return p


# ---------------------------------------------------------------------------
# file formats


def save_cameras(path, cameras: list[Camera]) -> None:
    doc = {"cameras": [c.to_dict() for c in cameras]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_cameras(path) -> list[Camera]:
    with open(path) as f:
        doc = json.load(f)
    return [Camera.from_dict(d) for d in doc["cameras"]]


def save_priors(path, priors: list[SparseDepthPrior]) -> None:
    doc = [
        {"image_id": p.image_id, "u": p.u, "v": p.v,
         "depth": p.depth, "weight": p.weight}
        for p in priors
    ]
    with open(path, "w") as f:
        json.dump(doc, f, indent=0)
        f.write("\n")


def load_priors(path) -> list[SparseDepthPrior]:
    with open(path) as f:
        doc = json.load(f)
    return [SparseDepthPrior(image_id=d["image_id"], u=d["u"], v=d["v"],
                             depth=d["depth"], weight=d.get("weight", 1.0))
            for d in doc]
