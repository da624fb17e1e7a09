"""Volume compositing of field queries into pixel color and expected depth.

The discrete transmittance model: with samples t_1 <= ... <= t_N and
intervals delta_i = t_{i+1} - t_i (the final interval runs to the window's
far bound by default),

    T_i   = exp(-sum_{j<i} sigma_j * delta_j)
    w_i   = T_i * (1 - exp(-sigma_i * delta_i))
    color = sum_i w_i * c_i        depth = sum_i w_i * t_i  (un-normalized)

``composite`` records the tape so losses differentiate w.r.t. colors and
densities; ``composite_np`` is its bit-identical gradient-free twin used by
evaluation renders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import sampling as smp
from .field import RadianceField
from .geometry import Ray

__all__ = [
    "RenderingError",
    "RenderResult",
    "RenderBatch",
    "composite",
    "composite_np",
    "render_depth",
    "render_batch",
    "render_ray",
    "render_image_np",
]

HUGE_DELTA = 1e10


class RenderingError(Exception):
    pass


@dataclass
class RenderResult:
    """Detached per-ray compositing output."""
    color: np.ndarray       # (3,) in [0, 1]
    depth: float            # world units, un-normalized expected depth
    weights: np.ndarray     # (N,)
    trans_end: float        # residual transmittance past the last sample
    opacity: float          # sum of weights
    ts: np.ndarray          # (N,)


@dataclass
class RenderBatch:
    """Differentiable batched compositing output."""
    color: dc.Tensor        # (B, 3)
    depth: dc.Tensor        # (B,)
    weights: dc.Tensor      # (B, N)
    trans_end: np.ndarray   # (B,)
    opacity: np.ndarray     # (B,)
    ts: np.ndarray          # (B, N)

    def detach(self, idx: int = 0) -> RenderResult:
        return RenderResult(
            color=self.color.data[idx].copy(),
            depth=float(self.depth.data[idx]),
            weights=self.weights.data[idx].copy(),
            trans_end=float(self.trans_end[idx]),
            opacity=float(self.opacity[idx]),
            ts=self.ts[idx].copy(),
        )


def _deltas(ts: np.ndarray, t_far: np.ndarray, final_delta_mode: str) -> np.ndarray:
    if np.any(np.diff(ts, axis=-1) < 0):
        raise RenderingError("composite: sample locations must be sorted ascending")
    if final_delta_mode == "t_far":
        last = np.maximum(t_far[:, None] - ts[:, -1:], 0.0)
    elif final_delta_mode == "huge":
        last = np.full((ts.shape[0], 1), HUGE_DELTA)
    else:
        raise RenderingError(f"unknown final_delta_mode {final_delta_mode!r}")
    return np.concatenate([np.diff(ts, axis=-1), last], axis=-1)


def composite(colors, sigmas, ts: np.ndarray, t_far, *,
              final_delta_mode: str = "t_far") -> RenderBatch:
    """Composite per-sample colors/densities along each ray.

    colors: (B, N, 3) tensor or array; sigmas: (B, N); ts: (B, N) plain
    array (sample placement is not differentiated); t_far: (B,) or scalar.
    Single-ray inputs (N, 3)/(N,) are promoted to a batch of one.
    """
    squeeze = np.asarray(ts).ndim == 1
    c = colors if isinstance(colors, dc.Tensor) else dc.Tensor(colors)
    s = sigmas if isinstance(sigmas, dc.Tensor) else dc.Tensor(sigmas)
    if squeeze:
        c = dc.reshape(c, (1,) + c.shape)
        s = dc.reshape(s, (1,) + s.shape)
        ts = np.asarray(ts, dtype=np.float64)[None, :]
    else:
        ts = np.asarray(ts, dtype=np.float64)
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (ts.shape[0],))
    if c.shape != ts.shape + (3,) or s.shape != ts.shape:
        raise RenderingError(
            f"composite: incongruent shapes colors={c.shape} sigmas={s.shape} ts={ts.shape}")
    if np.any(s.data < 0):
        raise RenderingError("composite: negative density violates the field contract")

    deltas = _deltas(ts, t_far, final_delta_mode)
    sd = dc.mul(s, dc.Tensor(deltas))
    excl = dc.sub(dc.cumsum(sd, axis=-1), sd)      # sum_{j<i} sigma_j delta_j
    trans = dc.exp(dc.neg(excl))
    alpha = dc.sub(dc.Tensor(1.0), dc.exp(dc.neg(sd)))
    w = dc.mul(trans, alpha)
    color = dc.sum_reduce(dc.mul(dc.reshape(w, w.shape + (1,)), c), axis=1)
    depth = dc.sum_reduce(dc.mul(w, dc.Tensor(ts)), axis=-1)
    trans_end = np.exp(-(s.data * deltas).sum(axis=-1))
    opacity = w.data.sum(axis=-1)
    return RenderBatch(color=color, depth=depth, weights=w,
                       trans_end=trans_end, opacity=opacity, ts=ts)


def composite_np(colors: np.ndarray, sigmas: np.ndarray, ts: np.ndarray, t_far, *,
                 final_delta_mode: str = "t_far"):
    """Gradient-free composite; returns (color, depth, weights, trans_end, opacity)."""
    colors = np.asarray(colors, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64)
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (ts.shape[0],))
    if np.any(sigmas < 0):
        raise RenderingError("composite: negative density violates the field contract")
    deltas = _deltas(ts, t_far, final_delta_mode)
    sd = sigmas * deltas
    excl = np.cumsum(sd, axis=-1) - sd
    trans = np.exp(-excl)
    alpha = 1.0 - np.exp(-sd)
    w = trans * alpha
    color = (w[..., None] * colors).sum(axis=1)
    depth = (w * ts).sum(axis=-1)
    trans_end = np.exp(-sd.sum(axis=-1))
    return color, depth, w, trans_end, w.sum(axis=-1)


def render_depth(weights: np.ndarray, ts: np.ndarray):
    """Un-normalized expected ray depth: sum_i w_i t_i."""
    w = np.asarray(weights, dtype=np.float64)
    t = np.asarray(ts, dtype=np.float64)
    if w.shape != t.shape:
        raise RenderingError(f"render_depth: shapes {w.shape} vs {t.shape}")
    out = (w * t).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def render_batch(field_c: RadianceField, field_f: RadianceField,
                 origins: np.ndarray, dirs: np.ndarray,
                 near: float, far: float,
                 prior_depth: np.ndarray, gamma: float,
                 n_coarse: int, n_fine: int,
                 rng_coarse: np.random.Generator, rng_fine: np.random.Generator,
                 *, grad: bool = True, coarse_grad: bool = True,
                 final_delta_mode: str = "t_far"):
    """Full coarse-to-fine pipeline for a batch of rays.

    prior_depth is per-ray, NaN where the pixel carries no depth prior; the
    window anneal factor gamma has already been evaluated for the current
    iteration. Returns (coarse, fine) as RenderBatch when grad else plain
    tuples from composite_np.

    The window restricts where samples are placed; the ray itself still
    ends at the scene far bound, so the final compositing interval runs
    from the last sample to `far`. At gamma = 1 the window is the full
    bounds and this is indistinguishable from no windowing at all.
    """
    lo, hi = smp.hgg_window_batch(prior_depth, near, far, gamma)
    ts_c = smp.stratified_batch(lo, hi, n_coarse, rng_coarse)
    far_b = np.full(lo.shape[0], far)

    b = origins.shape[0]
    xs = origins[:, None, :] + ts_c[:, :, None] * dirs[:, None, :]
    if grad and coarse_grad:
        col_c, sig_c = field_c.query(xs.reshape(-1, 3), dirs, dir_repeat=n_coarse)
        col_c = dc.reshape(col_c, (b, n_coarse, 3))
        sig_c = dc.reshape(sig_c, (b, n_coarse))
        res_c = composite(col_c, sig_c, ts_c, far_b, final_delta_mode=final_delta_mode)
        w_c = res_c.weights.data
    else:
        cn, sn = field_c.query_np(xs.reshape(-1, 3), dirs, dir_repeat=n_coarse)
        res_c = composite_np(cn.reshape(b, n_coarse, 3), sn.reshape(b, n_coarse),
                             ts_c, far_b, final_delta_mode=final_delta_mode)
        w_c = res_c[2]

    edges = np.concatenate([ts_c, hi[:, None]], axis=1)
    win_deg = (hi - lo) < smp.DEGENERATE_WIDTH
    if win_deg.any():
        # collapsed windows: every fine sample lands on the collapsed point
        ts_f = np.empty((b, n_fine))
        ts_f[win_deg] = np.repeat(ts_c[win_deg][:, :1], n_fine, axis=1)
        live = ~win_deg
        if live.any():
            ts_f[live] = smp.inverse_transform_batch(
                edges[live], w_c[live], n_fine, rng_fine)
    else:
        ts_f = smp.inverse_transform_batch(edges, w_c, n_fine, rng_fine)
    ts_u = np.sort(np.concatenate([ts_c, ts_f], axis=1), axis=1)

    n_u = ts_u.shape[1]
    xs_f = origins[:, None, :] + ts_u[:, :, None] * dirs[:, None, :]
    if grad:
        col_f, sig_f = field_f.query(xs_f.reshape(-1, 3), dirs, dir_repeat=n_u)
        col_f = dc.reshape(col_f, (b, n_u, 3))
        sig_f = dc.reshape(sig_f, (b, n_u))
        res_f = composite(col_f, sig_f, ts_u, far_b, final_delta_mode=final_delta_mode)
    else:
        cn, sn = field_f.query_np(xs_f.reshape(-1, 3), dirs, dir_repeat=n_u)
        res_f = composite_np(cn.reshape(b, n_u, 3), sn.reshape(b, n_u),
                             ts_u, far_b, final_delta_mode=final_delta_mode)
    return res_c, res_f


def render_ray(field_c: RadianceField, field_f: RadianceField, ray: Ray,
               prior_depth: float | None, schedule: smp.HggSchedule, i: int,
               rng_coarse: np.random.Generator, rng_fine: np.random.Generator,
               n_coarse: int = 64, n_fine: int = 128, *,
               hgg: bool = True, final_delta_mode: str = "t_far"):
    """Single-ray contract over render_batch; returns detached results."""
    gamma = smp.hgg_gamma(i, schedule) if hgg else 1.0
    pd = np.array([np.nan if (prior_depth is None or not hgg) else prior_depth])
    res_c, res_f = render_batch(
        field_c, field_f, ray.o[None, :], ray.d[None, :], ray.near, ray.far,
        pd, gamma, n_coarse, n_fine, rng_coarse, rng_fine,
        grad=True, final_delta_mode=final_delta_mode)
    return res_c.detach(0), res_f.detach(0)


def render_image_np(field_c: RadianceField, field_f: RadianceField, camera,
                    n_coarse: int, n_fine: int, rng: np.random.Generator,
                    chunk: int = 2048, final_delta_mode: str = "t_far"):
    """Evaluation render of a whole view at full scene bounds (no window).

    Returns (image HxWx3, depth HxW, opacity HxW).
    """
    from .geometry import ray_grid
    dirs = ray_grid(camera).reshape(-1, 3)
    n = dirs.shape[0]
    origins = np.broadcast_to(camera.t, (n, 3))
    img = np.empty((n, 3))
    dep = np.empty(n)
    opa = np.empty(n)
    no_prior = np.full(chunk, np.nan)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        _, fine = render_batch(
            field_c, field_f, origins[s:e], dirs[s:e], camera.near, camera.far,
            no_prior[: e - s], 1.0, n_coarse, n_fine, rng, rng,
            grad=False, final_delta_mode=final_delta_mode)
        color, depth, _, _, opacity = fine
        img[s:e] = color
        dep[s:e] = depth
        opa[s:e] = opacity
    h, w = camera.height, camera.width
    return img.reshape(h, w, 3), dep.reshape(h, w), opa.reshape(h, w)
