"""The radiance field: a positional-encoded MLP mapping (position, view
direction) to (RGB color, volume density).

Two independent instances of this network act as the coarse and fine
models. Density comes off the trunk before the view direction is
concatenated, so it is direction-invariant by construction; softplus keeps
it nonnegative and sigmoid keeps colors in [0, 1].

Sample positions are treated as constants of the tape (sample placement is
not differentiated through), so encodings are computed in plain numpy and
only the network weights carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

__all__ = ["FieldConfig", "RadianceField", "positional_encoding"]


def positional_encoding(v: np.ndarray, L: int) -> np.ndarray:
    """[v, sin(2^k pi v), cos(2^k pi v) for k in 0..L-1], length d*(2L+1).

    Works on a single vector or a batch (..., d).
    """
    v = np.asarray(v, dtype=np.float64)
    if L == 0:
        return v.copy()
    freqs = (2.0 ** np.arange(L)) * np.pi
    arg = v[..., None, :] * freqs[:, None]                  # (..., L, d)
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-2)     # (..., L, 2, d)
    d = v.shape[-1]
    return np.concatenate([v, enc.reshape(v.shape[:-1] + (2 * L * d,))], axis=-1)


@dataclass
class FieldConfig:
    trunk_layers: int = 4
    trunk_width: int = 64
    color_width: int = 32
    l_pos: int = 6
    l_dir: int = 2
    sigma_bias: float = 0.0   # initial density-head bias; negative starts near-empty

    def pos_dim(self) -> int:
        return 3 * (2 * self.l_pos + 1)

    def dir_dim(self) -> int:
        return 3 * (2 * self.l_dir + 1)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class RadianceField:
    """One MLP with named parameter tensors and a scene-box normalizer."""

    def __init__(self, config: FieldConfig, bbox_lo, bbox_hi, seed: int = 0,
                 params: dict[str, dc.Tensor] | None = None):
        self.config = config
        self.bbox_lo = np.asarray(bbox_lo, dtype=np.float64)
        self.bbox_hi = np.asarray(bbox_hi, dtype=np.float64)
        self._center = 0.5 * (self.bbox_lo + self.bbox_hi)
        self._half = np.maximum(0.5 * (self.bbox_hi - self.bbox_lo), 1e-9)
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> dict[str, dc.Tensor]:
        cfg = self.config
        rng = np.random.default_rng([seed, 101])
        p: dict[str, dc.Tensor] = {}
        dims = [cfg.pos_dim()] + [cfg.trunk_width] * cfg.trunk_layers
        for i in range(cfg.trunk_layers):
            p[f"w{i}"] = dc.Tensor(_glorot(rng, dims[i], dims[i + 1]), requires_grad=True)
            p[f"b{i}"] = dc.Tensor(np.zeros(dims[i + 1]), requires_grad=True)
        p["w_sigma"] = dc.Tensor(_glorot(rng, cfg.trunk_width, 1), requires_grad=True)
        p["b_sigma"] = dc.Tensor(np.full(1, cfg.sigma_bias), requires_grad=True)
        cin = cfg.trunk_width + cfg.dir_dim()
        p["w_col0"] = dc.Tensor(_glorot(rng, cin, cfg.color_width), requires_grad=True)
        p["b_col0"] = dc.Tensor(np.zeros(cfg.color_width), requires_grad=True)
        p["w_col1"] = dc.Tensor(_glorot(rng, cfg.color_width, 3), requires_grad=True)
        p["b_col1"] = dc.Tensor(np.zeros(3), requires_grad=True)
        return p

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self._center) / self._half

    def encode_inputs(self, x: np.ndarray, d: np.ndarray, dir_repeat: int = 1):
        ex = positional_encoding(self.normalize(x), self.config.l_pos)
        ed = positional_encoding(d, self.config.l_dir)
        if dir_repeat > 1:
            ed = np.repeat(ed, dir_repeat, axis=0)
        return ex, ed

    def query(self, x: np.ndarray, d: np.ndarray, dir_repeat: int = 1):
        """Differentiable batched evaluation: (N,3),(N,3) -> color (N,3), sigma (N,).

        When every consecutive block of dir_repeat positions shares one
        viewing direction (samples along a ray), d holds one row per block.
        Raises on non-finite inputs; outputs carry the tape for backward.
        """
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(d))):
            raise dc.DiffcoreError("query: non-finite field input")
        ex, ed = self.encode_inputs(x, d, dir_repeat)
        p = self.params
        h = dc.Tensor(ex)
        for i in range(self.config.trunk_layers):
            h = dc.relu(dc.affine(h, p[f"w{i}"], p[f"b{i}"]))
        sigma = dc.softplus(dc.affine(h, p["w_sigma"], p["b_sigma"]))
        sigma = dc.reshape(sigma, (x.shape[0],))
        col_in = dc.concatenate([h, dc.Tensor(ed)], axis=1)
        ch = dc.relu(dc.affine(col_in, p["w_col0"], p["b_col0"]))
        color = dc.sigmoid(dc.affine(ch, p["w_col1"], p["b_col1"]))
        return color, sigma

    def query_np(self, x: np.ndarray, d: np.ndarray, dir_repeat: int = 1):
        """Gradient-free twin of query; bit-identical outputs."""
        ex, ed = self.encode_inputs(x, d, dir_repeat)
        p = self.params
        h = ex
        for i in range(self.config.trunk_layers):
            h = np.maximum(h @ p[f"w{i}"].data + p[f"b{i}"].data, 0.0)
        sigma = np.logaddexp(0.0, h @ p["w_sigma"].data + p["b_sigma"].data).reshape(x.shape[0])
        col_in = np.concatenate([h, ed], axis=1)
        ch = np.maximum(col_in @ p["w_col0"].data + p["b_col0"].data, 0.0)
        color = 1.0 / (1.0 + np.exp(-(ch @ p["w_col1"].data + p["b_col1"].data)))
        return color, sigma

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # checkpoint interop -----------------------------------------------------

    def to_blocks(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}/{k}": t.data for k, t in self.params.items()}

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray], prefix: str,
                    config: FieldConfig, bbox_lo, bbox_hi) -> "RadianceField":
        want = f"{prefix}/"
        params = {k[len(want):]: dc.Tensor(v.copy(), requires_grad=True)
                  for k, v in blocks.items() if k.startswith(want)}
        if not params:
            raise dc.DiffcoreError(f"no parameter blocks under {prefix!r}")
        return cls(config, bbox_lo, bbox_hi, params=params)
