"""Coarse-to-fine semantic consistency supervision.

A grid of pixels at stride s_i (annealed from s_max down to 1) is rendered
through the fine model and compared, in a learned-feature space, against
the same grid sampled from the ground-truth image. The image encoder is a
plug-in: the built-in default resizes the grid image to a fixed patch by
area averaging, applies a fixed seeded random linear projection, and
normalizes, which keeps the whole loss differentiable end-to-end without
any pretrained network. An external-embedding variant exists for
evaluation flows only; it cannot provide gradients.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import rendering as rnd
from .sampling import _half_one_minus_cos_pi

__all__ = [
    "SemanticsError",
    "HsgSchedule",
    "GridImage",
    "hsg_stride",
    "grid_pixels",
    "grid_image_from",
    "ToyLinearEncoder",
    "ExternalEmbeddingEncoder",
    "make_encoder",
    "hsg_loss",
    "hsg_pair",
    "HsgPair",
]

log = logging.getLogger("guidenerf.semantics")


class SemanticsError(Exception):
    pass


@dataclass
class HsgSchedule:
    n_hsg: int      # iterations until every pixel is sampled
    s_max: float    # maximum sampling stride

    def __post_init__(self):
        if self.n_hsg < 1:
            raise SemanticsError("n_hsg must be >= 1")
        if self.s_max <= 0:
            raise SemanticsError("s_max must be positive")


def hsg_stride(i: int, schedule: HsgSchedule) -> int:
    """Sampling stride at iteration i: cosine decay from ceil(s_max) to 1."""
    if i < 0:
        raise SemanticsError("iteration must be >= 0")
    x = min(i / schedule.n_hsg, 1.0)
    ramp = 1.0 - _half_one_minus_cos_pi(x)   # (1 + cos(x*pi)) / 2
    return max(math.ceil(schedule.s_max * ramp), 1)


def grid_pixels(h: int, w: int, s: int) -> np.ndarray:
    """All (row, col) pairs with both coordinates multiples of s, row-major.

    Cardinality is ceil(h/s) * ceil(w/s); pixel (0, 0) is always included.
    """
    if s < 1:
        raise SemanticsError("stride must be >= 1")
    rows = np.arange(0, h, s)
    cols = np.arange(0, w, s)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)


@dataclass
class GridImage:
    pixels: np.ndarray   # (ceil(H/s), ceil(W/s), 3)
    stride: int


def grid_image_from(image: np.ndarray, s: int) -> GridImage:
    """Subsample a (H, W, 3) image at stride s into a GridImage."""
    rows = np.arange(0, image.shape[0], s)
    cols = np.arange(0, image.shape[1], s)
    return GridImage(pixels=image[np.ix_(rows, cols)].copy(), stride=s)


# ---------------------------------------------------------------------------
# encoders


def _area_overlap_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows sum to 1; entry (a, i) is the fractional overlap of output cell a
    with input cell i when both grids span the same unit interval."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for a in range(n_out):
        lo, hi = a * scale, (a + 1) * scale
        i0, i1 = int(math.floor(lo)), int(math.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            m[a, i] = (min(hi, i + 1) - max(lo, i)) / scale
    return m


class ToyLinearEncoder:
    """Differentiable stand-in for a pretrained image encoder.

    Area-resizes any grid image to patch x patch, flattens, projects with a
    fixed seeded random matrix, and L2-normalizes. Deterministic given its
    seed; gradients flow to the input pixels.
    """

    name = "toy-linear"

    def __init__(self, dim: int = 128, patch: int = 16, seed: int = 0):
        self.dim = dim
        self.patch = patch
        self.seed = seed
        rng = np.random.default_rng([seed, 211])
        n_flat = patch * patch * 3
        self.projection = rng.normal(size=(n_flat, dim)) / math.sqrt(n_flat)
        self._resize_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def _resize_mats(self, h: int, w: int):
        key = (h, w)
        if key not in self._resize_cache:
            self._resize_cache[key] = (_area_overlap_matrix(self.patch, h),
                                       _area_overlap_matrix(self.patch, w))
        return self._resize_cache[key]

    def encode(self, image, key: str | None = None) -> dc.Tensor:
        x = image if isinstance(image, dc.Tensor) else dc.Tensor(image)
        if x.data.ndim != 3 or x.data.shape[2] != 3 or x.data.shape[0] < 1 or x.data.shape[1] < 1:
            raise SemanticsError(f"encode: expected a (H, W, 3) image, got {x.shape}")
        h, w, _ = x.shape
        kh, kw = self._resize_mats(h, w)
        p = self.patch
        # rows: (p, W*3) <- (p, H) @ (H, W*3)
        z = dc.matmul(dc.Tensor(kh), dc.reshape(x, (h, w * 3)))
        # cols: regroup channels, contract W
        z = dc.transpose(dc.reshape(z, (p, w, 3)), (0, 2, 1))      # (p, 3, W)
        z = dc.matmul(dc.reshape(z, (p * 3, w)), dc.Tensor(kw.T))  # (p*3, p)
        z = dc.transpose(dc.reshape(z, (p, 3, p)), (0, 2, 1))      # (p, p, 3)
        flat = dc.reshape(z, (p * p * 3,))
        v = dc.matmul(flat, dc.Tensor(self.projection))
        norm_sq = dc.sum_reduce(dc.mul(v, v))
        return dc.mul(v, dc.power(norm_sq, -0.5))


class ExternalEmbeddingEncoder:
    """Looks up precomputed embeddings by key; evaluation-only (no gradients)."""

    name = "external"

    def __init__(self, path):
        with open(path) as f:
            table = json.load(f)
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def encode(self, image, key: str | None = None) -> dc.Tensor:
        if key is None or key not in self.table:
            raise SemanticsError(f"external encoder has no embedding for key {key!r}")
        v = self.table[key]
        n = np.linalg.norm(v)
        if n <= 0:
            raise SemanticsError(f"embedding {key!r} has zero norm")
        return dc.Tensor(v / n)


def make_encoder(kind: str, *, dim: int = 128, patch: int = 16, seed: int = 0,
                 embeddings_path=None):
    if kind == "toy-linear":
        return ToyLinearEncoder(dim=dim, patch=patch, seed=seed)
    if kind == "external":
        if embeddings_path is None:
            raise SemanticsError("encoder 'external' needs an embeddings path")
        return ExternalEmbeddingEncoder(embeddings_path)
    raise SemanticsError(f"unknown encoder {kind!r}")


# ---------------------------------------------------------------------------
# loss and pairing


def hsg_loss(phi_sem: dc.Tensor, phi_i: dc.Tensor) -> dc.Tensor:
    """Negated cosine similarity, so that minimizing the total objective
    pulls the two feature vectors together."""
    a = phi_sem if isinstance(phi_sem, dc.Tensor) else dc.Tensor(phi_sem)
    b = phi_i if isinstance(phi_i, dc.Tensor) else dc.Tensor(phi_i)
    for name, t in (("phi_sem", a), ("phi_i", b)):
        n = float(np.linalg.norm(t.data))
        if abs(n - 1.0) > 1e-6:
            log.warning("hsg_loss: %s has norm %.6f, renormalizing", name, n)
            t = dc.mul(t, dc.power(dc.sum_reduce(dc.mul(t, t)), -0.5))
            if name == "phi_sem":
                a = t
            else:
                b = t
    return dc.neg(dc.sum_reduce(dc.mul(a, b)))


@dataclass
class HsgPair:
    phi_sem: dc.Tensor   # rendered-image features (differentiable)
    phi_i: dc.Tensor     # ground-truth-image features (constant)
    view_id: int
    stride: int
    rendered: dc.Tensor  # grid image tensor, for diagnostics/tests


def hsg_pair(i: int, dataset, field_c, field_f, schedule: HsgSchedule,
             encoder, rng: np.random.Generator, *, n_coarse: int, n_fine: int,
             gamma: float = 1.0, use_window: bool = True,
             mode: str = "same-view", final_delta_mode: str = "t_far") -> HsgPair:
    """Render one view's pixel grid at the current stride and encode both it
    and the matching ground-truth grid.

    mode "same-view" renders the very view the ground truth comes from;
    "cross-view" renders a held-out pose and pairs it with a random
    training image. Only the fine model receives gradient from this path;
    the coarse pass acts purely as a sampler.
    """
    from .geometry import ray_grid

    train_cams = dataset.train_cameras
    view = train_cams[int(rng.integers(len(train_cams)))]
    if mode == "same-view":
        render_cam = view
    elif mode == "cross-view":
        test_cams = dataset.test_cameras
        if not test_cams:
            raise SemanticsError("cross-view pairing needs held-out cameras")
        render_cam = test_cams[int(rng.integers(len(test_cams)))]
    else:
        raise SemanticsError(f"unknown pairing mode {mode!r}")

    stride = hsg_stride(i, schedule)
    pix = grid_pixels(render_cam.height, render_cam.width, stride)
    rows, cols = pix[:, 0], pix[:, 1]
    hg = int(np.ceil(render_cam.height / stride))
    wg = int(np.ceil(render_cam.width / stride))

    dirs = ray_grid(render_cam)[rows, cols]
    origins = np.broadcast_to(render_cam.t, dirs.shape)
    if use_window and render_cam.image_id in dataset.prior_depth_maps:
        prior = dataset.prior_depth_maps[render_cam.image_id][rows, cols]
    else:
        prior = np.full(dirs.shape[0], np.nan)

    _, fine = rnd.render_batch(
        field_c, field_f, origins, dirs, render_cam.near, render_cam.far,
        prior, gamma, n_coarse, n_fine, rng, rng,
        grad=True, coarse_grad=False, final_delta_mode=final_delta_mode)
    rendered = dc.reshape(fine.color, (hg, wg, 3))

    gt = grid_image_from(dataset.images[view.image_id], stride)
    phi_sem = encoder.encode(rendered, key=f"render_{render_cam.image_id}_s{stride}")
    phi_i = encoder.encode(gt.pixels, key=f"train_{view.image_id}_s{stride}")
    return HsgPair(phi_sem=phi_sem, phi_i=phi_i, view_id=view.image_id,
                   stride=stride, rendered=rendered)
