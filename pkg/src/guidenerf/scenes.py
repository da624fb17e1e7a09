"""Procedural analytic scenes with exact ground-truth rendering.

Scenes are unions of constant-density spheres and axis-aligned boxes, so
the continuous transmittance integral has a closed form on every ray
segment: this is what makes the renderer usable as an independent oracle.
``render_ground_truth`` splits each ray at primitive boundaries, subdivides
to the requested quadrature granularity, and integrates each piece exactly.

Also generates complete datasets (images, depth maps, cameras, sparse
depth priors with a controllable keypoint-mismatch bias) in the on-disk
layout every other part of the package consumes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import evalio
from .geometry import (Camera, SparseDepthPrior, look_at, normalized_keypoint,
                       perturb_keypoint, project, ray_grid, relative_pose,
                       save_cameras, load_cameras, save_priors, load_priors,
                       triangulate, DegenerateGeometry)

__all__ = [
    "SceneError",
    "Sphere",
    "Box",
    "AnalyticScene",
    "SceneSpec",
    "make_scene",
    "render_ray_gt",
    "render_ground_truth",
    "generate_depth_prior",
    "make_ring_cameras",
    "generate_dataset",
    "SceneDataset",
    "load_dataset",
]


class SceneError(Exception):
    pass


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    density: float
    albedo: np.ndarray

    def intersect(self, o: np.ndarray, d: np.ndarray):
        oc = o - self.center
        b = oc @ d
        c = oc @ oc - self.radius ** 2
        disc = b * b - c
        if disc <= 0.0:
            return None
        s = math.sqrt(disc)
        return -b - s, -b + s


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    density: float
    albedo: np.ndarray

    def intersect(self, o: np.ndarray, d: np.ndarray):
        with np.errstate(divide="ignore"):
            inv = 1.0 / d
        t0 = (self.lo - o) * inv
        t1 = (self.hi - o) * inv
        near = np.minimum(t0, t1).max()
        far = np.maximum(t0, t1).min()
        if far <= near:
            return None
        return float(near), float(far)


@dataclass
class AnalyticScene:
    primitives: list
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    seed: int = 0


@dataclass
class SceneSpec:
    """Ranges the procedural generator draws from.

    floor_tiles > 0 adds a grid of flat box tiles with per-tile albedo at
    the bottom of the bounding box: a textured ground plane that fills
    every view with depth-bearing content instead of empty background.
    """
    n_primitives: tuple[int, int] = (4, 6)
    sphere_fraction: float = 0.6
    radius_range: tuple[float, float] = (0.25, 0.5)
    box_half_range: tuple[float, float] = (0.18, 0.42)
    density_range: tuple[float, float] = (9.0, 18.0)
    albedo_range: tuple[float, float] = (0.15, 0.95)
    placement_extent: float = 0.62   # primitive centers within +-this
    bbox_lo: tuple[float, float, float] = (-1.2, -1.2, -1.2)
    bbox_hi: tuple[float, float, float] = (1.2, 1.2, 1.2)
    floor_tiles: int = 0
    floor_thickness: float = 0.15
    floor_density: float = 40.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown scene spec keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def make_scene(spec: SceneSpec, seed: int) -> AnalyticScene:
    """Deterministic scene for (spec, seed)."""
    if spec.n_primitives[1] < 1 or spec.n_primitives[1] < spec.n_primitives[0]:
        raise SceneError("scene spec requests no primitives")
    rng = np.random.default_rng([seed, 23])
    n = int(rng.integers(spec.n_primitives[0], spec.n_primitives[1] + 1))
    prims = []
    for _ in range(n):
        center = rng.uniform(-spec.placement_extent, spec.placement_extent, size=3)
        density = float(rng.uniform(*spec.density_range))
        albedo = rng.uniform(*spec.albedo_range, size=3)
        if rng.random() < spec.sphere_fraction:
            prims.append(Sphere(center=center,
                                radius=float(rng.uniform(*spec.radius_range)),
                                density=density, albedo=albedo))
        else:
            half = rng.uniform(*spec.box_half_range, size=3)
            prims.append(Box(lo=center - half, hi=center + half,
                             density=density, albedo=albedo))
    lo = np.asarray(spec.bbox_lo, dtype=np.float64)
    hi = np.asarray(spec.bbox_hi, dtype=np.float64)
    if spec.floor_tiles > 0:
        k = spec.floor_tiles
        xs = np.linspace(lo[0], hi[0], k + 1)
        ys = np.linspace(lo[1], hi[1], k + 1)
        z0, z1 = lo[2], lo[2] + spec.floor_thickness
        for ix in range(k):
            for iy in range(k):
                prims.append(Box(
                    lo=np.array([xs[ix], ys[iy], z0]),
                    hi=np.array([xs[ix + 1], ys[iy + 1], z1]),
                    density=spec.floor_density,
                    albedo=rng.uniform(*spec.albedo_range, size=3)))
    return AnalyticScene(primitives=prims, bbox_lo=lo, bbox_hi=hi, seed=seed)


def _ray_segments(scene: AnalyticScene, o: np.ndarray, d: np.ndarray,
                  t_n: float, t_f: float):
    """(t0, t1, sigma, albedo) pieces covering the occupied parts of [t_n, t_f]."""
    hits = []
    for prim in scene.primitives:
        iv = prim.intersect(o, d)
        if iv is None:
            continue
        a, b = max(iv[0], t_n), min(iv[1], t_f)
        if b > a:
            hits.append((a, b, prim.density, prim.albedo))
    if not hits:
        return []
    edges = sorted({t for a, b, _, _ in hits for t in (a, b)})
    segs = []
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b)
        sigma = 0.0
        col = np.zeros(3)
        for ha, hb, dens, alb in hits:
            if ha <= mid < hb:
                sigma += dens
                col = col + dens * alb
        if sigma > 0.0:
            segs.append((a, b, sigma, col / sigma))
    return segs


def render_ray_gt(scene: AnalyticScene, o: np.ndarray, d: np.ndarray,
                  t_n: float, t_f: float, quadrature_n: int = 4096):
    """Exact transmittance integral along one ray.

    Returns (color, depth, opacity): depth is the un-normalized expected
    depth, the continuous analogue of the discrete compositing's
    sum_i w_i t_i. Each constant-density piece integrates in closed form;
    quadrature_n bounds the piece length at (t_f - t_n) / quadrature_n.
    """
    color = np.zeros(3)
    depth = 0.0
    trans = 1.0
    max_len = (t_f - t_n) / quadrature_n
    for a0, b0, sigma, albedo in _ray_segments(scene, o, d, t_n, t_f):
        m = max(1, math.ceil((b0 - a0) / max_len))
        step = (b0 - a0) / m
        for k in range(m):
            a = a0 + k * step
            tau = sigma * step
            et = math.exp(-tau)
            alpha = 1.0 - et
            color = color + trans * alpha * albedo
            depth += trans * ((a + 1.0 / sigma) * alpha - step * et)
            trans *= et
    return color, depth, 1.0 - trans


def render_ground_truth(scene: AnalyticScene, camera: Camera,
                        quadrature_n: int = 4096):
    """Per-pixel exact render: (image HxWx3, depth HxW, opacity HxW)."""
    if quadrature_n < 1024:
        raise SceneError("quadrature_n must be >= 1024")
    dirs = ray_grid(camera)
    h, w = camera.height, camera.width
    img = np.zeros((h, w, 3))
    dep = np.zeros((h, w))
    opa = np.zeros((h, w))
    for v in range(h):
        for u in range(w):
            c, d_, o_ = render_ray_gt(scene, camera.t, dirs[v, u],
                                      camera.near, camera.far, quadrature_n)
            img[v, u] = c
            dep[v, u] = d_
            opa[v, u] = o_
    return img, dep, opa


# ---------------------------------------------------------------------------
# simulated-SfM sparse depth priors


def generate_depth_prior(scene: AnalyticScene, cameras: list[Camera],
                         depth_maps: dict, opacity_maps: dict,
                         density_fraction: float, mismatch_delta: float,
                         rng: np.random.Generator) -> list[SparseDepthPrior]:
    """Triangulated per-pixel depths with a controllable matching error.

    For each train view: sample surface pixels, project the surface point
    into the nearest other view, perturb that second keypoint in the
    normalized image plane by mismatch_delta, triangulate the pair, and
    record the (possibly biased) depth at the first view's pixel.

    Visibility in the second view is decided by the scene itself: the
    point is kept only if the transmittance along the second camera's
    sight line, stopped just short of the point, stays above 0.5. Points
    occluded or out of frame are skipped, as SfM would never match them.
    """
    if not (0.0 < density_fraction <= 0.2):
        raise SceneError("density_fraction must be in (0, 0.2]")
    if mismatch_delta < 0.0:
        raise SceneError("mismatch_delta must be >= 0")
    priors: list[SparseDepthPrior] = []
    for cam in cameras:
        others = [c for c in cameras if c.image_id != cam.image_id]
        if not others:
            raise SceneError("need at least two cameras for triangulation")
        second = min(others, key=lambda c: np.linalg.norm(c.t - cam.t))
        depth1 = depth_maps[cam.image_id]
        opa1 = opacity_maps[cam.image_id]
        grid = ray_grid(cam)
        want = int(round(density_fraction * cam.width * cam.height))
        vs, us = np.nonzero(opa1 > 0.5)
        if vs.size == 0:
            continue
        take = min(want, vs.size)
        pick = rng.choice(vs.size, size=take, replace=False)
        R_rel, t_rel = relative_pose(cam, second)
        for idx in pick:
            v, u = int(vs[idx]), int(us[idx])
            t_surf = float(depth1[v, u])
            X = cam.t + t_surf * grid[v, u]
            u2, v2, z2 = project(second, X)
            if not (z2 > 0 and 0 <= u2 < second.width - 1 and 0 <= v2 < second.height - 1):
                continue
            dist2 = float(np.linalg.norm(X - second.t))
            sight = (X - second.t) / dist2
            _, _, occl = render_ray_gt(scene, second.t, sight,
                                       1e-6, 0.98 * dist2, 1024)
            if occl > 0.5:
                continue
            p1 = normalized_keypoint(cam, (u, v))
            x2_cam = second.R.T @ (X - second.t)
            p2 = x2_cam / x2_cam[2]
            p2 = perturb_keypoint(p2, mismatch_delta, rng)
            try:
                s1, _, _, _ = triangulate(p1, p2, R_rel, t_rel)
            except DegenerateGeometry:
                continue
            depth_along_ray = s1 * float(np.linalg.norm(p1))
            if depth_along_ray <= 0.0:
                continue
            priors.append(SparseDepthPrior(image_id=cam.image_id, u=u, v=v,
                                           depth=depth_along_ray, weight=1.0))
    return priors


# ---------------------------------------------------------------------------
# dataset generation and loading


def make_ring_cameras(n_train: int, n_test: int, image_size: int,
                      rng: np.random.Generator, *, radius: float = 4.2,
                      near: float = 2.0, far: float = 6.5,
                      fov_deg: float = 46.0, rig: str = "ring",
                      arc_deg: float = 16.0):
    """Inward-looking cameras, either spread on a jittered ring around the
    scene or clustered in a forward-facing arc (rig="arc"), the small-
    baseline regime where depth is weakly constrained by images alone."""
    focal = (image_size / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    cams = []

    def build(image_id, split, azimuth, elevation):
        eye = radius * np.array([
            math.cos(azimuth) * math.cos(elevation),
            math.sin(azimuth) * math.cos(elevation),
            math.sin(elevation),
        ])
        return Camera(fx=focal, fy=focal, cx=image_size / 2.0, cy=image_size / 2.0,
                      width=image_size, height=image_size,
                      R=look_at(eye, np.zeros(3)), t=eye, near=near, far=far,
                      image_id=image_id, split=split)

    if rig == "ring":
        for i in range(n_train):
            az = 2.0 * math.pi * i / n_train + rng.uniform(-0.1, 0.1)
            el = math.radians(rng.uniform(18.0, 36.0))
            cams.append(build(i, "train", az, el))
        for j in range(n_test):
            az = 2.0 * math.pi * (j + 0.5) / n_test + rng.uniform(-0.1, 0.1)
            el = math.radians(rng.uniform(12.0, 42.0))
            cams.append(build(n_train + j, "test", az, el))
    elif rig == "arc":
        # train views nearly coplanar in a tight arc (weak baselines), test
        # views spread over a wider arc and elevation range: novel views
        # demand extrapolation, so depth errors actually cost
        half = math.radians(arc_deg) / 2.0
        for i in range(n_train):
            frac = (i + 0.5) / n_train
            az = -half + 2.0 * half * frac + rng.uniform(-0.02, 0.02)
            el = math.radians(rng.uniform(24.0, 26.0))
            cams.append(build(i, "train", az, el))
        test_half = 2.5 * half
        for j in range(n_test):
            frac = (j + 0.5) / n_test
            az = -test_half + 2.0 * test_half * frac + rng.uniform(-0.02, 0.02)
            el = math.radians(rng.uniform(16.0, 34.0))
            cams.append(build(n_train + j, "test", az, el))
    else:
        raise SceneError(f"unknown camera rig {rig!r}")
    return cams


def generate_dataset(out_dir, scene_spec: SceneSpec, seed: int, *,
                     n_train: int = 3, n_test: int = 8, image_size: int = 64,
                     density_fraction: float = 0.01, mismatch_delta: float = 0.0,
                     quadrature_n: int = 4096, rig: str = "ring",
                     force: bool = False) -> "SceneDataset":
    """Render and write a full dataset directory; returns it loaded."""
    out = str(out_dir)
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise SceneError(f"{out} exists and is not empty (use force)")
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    os.makedirs(os.path.join(out, "depth"), exist_ok=True)

    scene = make_scene(scene_spec, seed)
    cam_rng = np.random.default_rng([seed, 31])
    cameras = make_ring_cameras(n_train, n_test, image_size, cam_rng, rig=rig)

    depth_maps, opacity_maps = {}, {}
    for cam in cameras:
        img, dep, opa = render_ground_truth(scene, cam, quadrature_n)
        name = f"{cam.split}_{cam.image_id:03d}"
        evalio.write_png(os.path.join(out, "images", f"{name}.png"), img)
        evalio.write_pfm(os.path.join(out, "depth", f"{name}.pfm"), dep)
        depth_maps[cam.image_id] = dep
        opacity_maps[cam.image_id] = opa

    prior_rng = np.random.default_rng([seed, 37])
    train_cams = [c for c in cameras if c.split == "train"]
    priors = generate_depth_prior(scene, train_cams, depth_maps, opacity_maps,
                                  density_fraction, mismatch_delta, prior_rng)

    save_cameras(os.path.join(out, "cameras.json"), cameras)
    save_priors(os.path.join(out, "priors.json"), priors)
    meta = {
        "scene_spec": scene_spec.to_dict(),
        "seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "image_size": image_size,
        "density_fraction": density_fraction,
        "mismatch_delta": mismatch_delta,
        "quadrature_n": quadrature_n,
        "rig": rig,
        "bbox_lo": list(scene.bbox_lo),
        "bbox_hi": list(scene.bbox_hi),
    }
    with open(os.path.join(out, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
        f.write("\n")
    return load_dataset(out)


@dataclass
class SceneDataset:
    root: str
    cameras: list[Camera]
    images: dict
    depths: dict
    priors: list
    meta: dict
    prior_depth_maps: dict = field(default_factory=dict)

    @property
    def train_cameras(self):
        return [c for c in self.cameras if c.split == "train"]

    @property
    def test_cameras(self):
        return [c for c in self.cameras if c.split == "test"]

    @property
    def bbox(self):
        return np.asarray(self.meta["bbox_lo"]), np.asarray(self.meta["bbox_hi"])

    def camera(self, image_id: int) -> Camera:
        for c in self.cameras:
            if c.image_id == image_id:
                return c
        raise SceneError(f"no camera with image_id {image_id}")

    def with_prior_fill(self, radius: int, color_tol: float = 0.12) -> "SceneDataset":
        """Copy of the dataset whose per-pixel prior maps are dilated: a
        pixel with no prior of its own borrows the depth of the nearest
        prior within a Chebyshev radius, but only when its training-image
        color is within color_tol of the prior pixel's color. The affinity
        gate keeps keypoint depths from leaking across silhouettes onto
        background rays. Off (radius 0) leaves the sparse maps untouched;
        only the sampling-window maps widen, the prior list is unchanged."""
        if radius <= 0:
            return self
        filled = {}
        for image_id, pm in self.prior_depth_maps.items():
            img = self.images[image_id]
            h, w = pm.shape
            out = pm.copy()
            best = np.where(np.isfinite(pm), 0.0, np.inf)
            vs, us = np.nonzero(np.isfinite(pm))
            for v, u in zip(vs, us):
                v0, v1 = max(0, v - radius), min(h, v + radius + 1)
                u0, u1 = max(0, u - radius), min(w, u + radius + 1)
                vv, uu = np.meshgrid(np.arange(v0, v1), np.arange(u0, u1),
                                     indexing="ij")
                dist = np.maximum(np.abs(vv - v), np.abs(uu - u)).astype(float)
                alike = np.abs(img[v0:v1, u0:u1] - img[v, u]).max(axis=2) <= color_tol
                dist[~alike] = np.inf
                patch = best[v0:v1, u0:u1]
                closer = dist < patch
                patch[closer] = dist[closer]
                out[v0:v1, u0:u1][closer] = pm[v, u]
            filled[image_id] = out
        return SceneDataset(root=self.root, cameras=self.cameras, images=self.images,
                            depths=self.depths, priors=self.priors, meta=self.meta,
                            prior_depth_maps=filled)


def load_dataset(root) -> SceneDataset:
    root = str(root)
    cameras = load_cameras(os.path.join(root, "cameras.json"))
    priors = load_priors(os.path.join(root, "priors.json"))
    with open(os.path.join(root, "meta.json")) as f:
        meta = json.load(f)
    images, depths = {}, {}
    for cam in cameras:
        name = f"{cam.split}_{cam.image_id:03d}"
        images[cam.image_id] = evalio.read_png(os.path.join(root, "images", f"{name}.png"))
        depths[cam.image_id] = evalio.read_pfm(os.path.join(root, "depth", f"{name}.pfm"))
    ds = SceneDataset(root=root, cameras=cameras, images=images, depths=depths,
                      priors=priors, meta=meta)
    # per-image dense lookup: NaN where a pixel carries no prior
    for cam in cameras:
        if cam.split == "train":
            pm = np.full((cam.height, cam.width), np.nan)
            ds.prior_depth_maps[cam.image_id] = pm
    for p in priors:
        if p.image_id in ds.prior_depth_maps:
            ds.prior_depth_maps[p.image_id][p.v, p.u] = p.depth
    return ds
