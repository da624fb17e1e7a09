"""Volume-sample placement along rays.

Three pieces: the iteration-indexed local-to-global window around a ray's
depth prior (an annealed cosine ramp), stratified coarse sampling inside a
window, and inverse-transform fine sampling from coarse compositing weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SamplingError",
    "HggSchedule",
    "SampleSet",
    "hgg_gamma",
    "hgg_window",
    "hgg_window_batch",
    "stratified_samples",
    "stratified_batch",
    "inverse_transform_samples",
    "inverse_transform_batch",
]

DEGENERATE_WIDTH = 1e-12


class SamplingError(Exception):
    pass


@dataclass
class HggSchedule:
    n_hgg: int        # iterations until the window reaches full bounds
    epsilon: float    # minimum adjusting rate

    def __post_init__(self):
        if self.n_hgg < 1:
            raise SamplingError("n_hgg must be >= 1")
        if not (0.0 < self.epsilon <= 1.0):
            raise SamplingError("epsilon must be in (0, 1]")


@dataclass
class SampleSet:
    ts: np.ndarray      # sorted ascending
    kind: str           # "coarse" | "fine"
    window: tuple[float, float]
    degenerate: bool = False


def _half_one_minus_cos_pi(x: float) -> float:
    # (1 - cos(x*pi)) / 2 with exact values at the schedule anchors, where
    # the floating-point representation of pi would otherwise miss them.
    if x <= 0.0:
        return 0.0
    if x == 0.5:
        return 0.5
    if x >= 1.0:
        return 1.0
    return (1.0 - np.cos(x * np.pi)) / 2.0


def hgg_gamma(i: int, schedule: HggSchedule) -> float:
    """Window adjustment rate at iteration i: cosine ramp from the minimum
    rate up to 1, reached at n_hgg and held."""
    if i < 0:
        raise SamplingError("iteration must be >= 0")
    x = min(max(i / schedule.n_hgg, schedule.epsilon), 1.0)
    return _half_one_minus_cos_pi(x)


def hgg_window(t_depth: float, t_n: float, t_f: float, gamma: float):
    """Per-ray sampling window anchored at the depth prior.

    Interpolates both ends from t_depth out to the scene bounds; gamma=1
    returns the full bounds bit-exactly. t_depth is clamped into bounds
    before use, so the returned window always contains it.
    """
    if not t_n < t_f:
        raise SamplingError(f"need t_n < t_f, got ({t_n}, {t_f})")
    td = min(max(t_depth, t_n), t_f)
    if gamma >= 1.0:
        return t_n, t_f
    lo = td + (t_n - td) * gamma
    hi = td + (t_f - td) * gamma
    lo = min(max(lo, t_n), td)
    hi = max(min(hi, t_f), td)
    return lo, hi


def hgg_window_batch(t_depth: np.ndarray, t_n: float, t_f: float, gamma: float):
    """Vectorized hgg_window; NaN depth means "no prior" -> full bounds."""
    b = t_depth.shape[0]
    lo = np.full(b, t_n)
    hi = np.full(b, t_f)
    has = np.isfinite(t_depth)
    if gamma >= 1.0 or not has.any():
        return lo, hi
    td = np.clip(t_depth[has], t_n, t_f)
    wlo = np.clip(td + (t_n - td) * gamma, t_n, td)
    whi = np.clip(td + (t_f - td) * gamma, td, t_f)
    lo[has] = wlo
    hi[has] = whi
    return lo, hi


def stratified_samples(t_n_i: float, t_f_i: float, n: int,
                       rng: np.random.Generator) -> SampleSet:
    """One uniform draw per equal-width bin of the window, sorted."""
    if n < 1:
        raise SamplingError("n must be >= 1")
    if t_f_i < t_n_i:
        raise SamplingError("window is inverted")
    width = t_f_i - t_n_i
    if width < DEGENERATE_WIDTH:
        mid = 0.5 * (t_n_i + t_f_i)
        return SampleSet(ts=np.full(n, mid), kind="coarse",
                         window=(t_n_i, t_f_i), degenerate=True)
    u = rng.random(n)
    ts = t_n_i + width * (np.arange(n) + u) / n
    return SampleSet(ts=ts, kind="coarse", window=(t_n_i, t_f_i))


def stratified_batch(lo: np.ndarray, hi: np.ndarray, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Stratified samples for a batch of windows, shape (B, n), sorted per row.

    Degenerate windows collapse every sample onto the midpoint, matching the
    scalar op's fallback.
    """
    width = hi - lo
    u = rng.random((lo.shape[0], n))
    ts = lo[:, None] + width[:, None] * (np.arange(n)[None, :] + u) / n
    deg = width < DEGENERATE_WIDTH
    if deg.any():
        mid = 0.5 * (lo[deg] + hi[deg])
        ts[deg] = mid[:, None]
    return ts


def inverse_transform_samples(bin_edges: np.ndarray, weights: np.ndarray, n: int,
                              rng: np.random.Generator) -> SampleSet:
    """Draws from the piecewise-constant density proportional to weights.

    All-zero weights fall back to uniform over the whole window, flagged
    degenerate rather than raising: zero coarse opacity is a legitimate
    early-training state.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if edges.ndim != 1 or w.ndim != 1 or edges.shape[0] != w.shape[0] + 1:
        raise SamplingError("need len(bin_edges) == len(weights) + 1")
    if np.any(np.diff(edges) <= 0):
        raise SamplingError("bin_edges must be strictly increasing")
    if np.any(w < 0):
        raise SamplingError("weights must be >= 0")
    degenerate = False
    total = w.sum()
    if total <= 0.0:
        w = np.diff(edges)  # uniform in t over the whole window
        total = w.sum()
        degenerate = True
    ts = _invert_cdf(edges, w / total, rng.random(n))
    ts.sort()
    return SampleSet(ts=ts, kind="fine", window=(float(edges[0]), float(edges[-1])),
                     degenerate=degenerate)


def _invert_cdf(edges: np.ndarray, pdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.concatenate([[0.0], np.cumsum(pdf)])
    cdf[-1] = 1.0
    idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, pdf.shape[0] - 1)
    seg = cdf[idx + 1] - cdf[idx]
    frac = np.where(seg > 0, (u - cdf[idx]) / np.where(seg > 0, seg, 1.0), 0.0)
    return edges[idx] + frac * (edges[idx + 1] - edges[idx])


def inverse_transform_batch(edges: np.ndarray, weights: np.ndarray, n: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Row-wise inverse-transform sampling: edges (B, N+1), weights (B, N).

    Returns (B, n), sorted per row. Rows with zero total weight fall back
    to uniform, as in the scalar op.
    """
    b = weights.shape[0]
    u = rng.random((b, n))
    out = np.empty((b, n))
    totals = weights.sum(axis=1)
    for r in range(b):
        w = weights[r] if totals[r] > 0 else np.diff(edges[r])
        out[r] = _invert_cdf(edges[r], w / w.sum(), u[r])
    out.sort(axis=1)
    return out
