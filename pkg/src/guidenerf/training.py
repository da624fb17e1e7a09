"""Loss assembly and the training loop.

One iteration: draw a pixel batch uniformly over all train pixels, render
it coarse-to-fine with the depth-prior window annealed for the current
iteration, add the photometric term (and, when scheduled, the semantic
term; optionally the direct depth-supervision baseline term), backprop,
and take one Adam step at the decayed learning rate.

Everything random is drawn from per-iteration, per-purpose substreams of
the config seed, so runs are bit-reproducible; the metrics log carries no
timestamps for the same reason (wall-clock goes to summary.json).
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import evalio
from . import rendering as rnd
from . import sampling as smp
from . import semantics as sem
from .field import FieldConfig, RadianceField
from .geometry import ray_grid

__all__ = [
    "TrainingError",
    "TrainingDiverged",
    "TrainConfig",
    "TrainState",
    "hpg_loss",
    "direct_depth_loss",
    "total_loss",
    "train",
    "evaluate",
    "load_fields",
]

log = logging.getLogger("guidenerf.training")

# substream tags, fixed forever for reproducibility
_S_BATCH, _S_COARSE, _S_FINE, _S_HSG, _S_DDEPTH, _S_EVAL = 11, 12, 13, 14, 15, 99


class TrainingError(Exception):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    total_iterations: int = 20000
    rays_per_batch: int = 1024
    n_coarse: int = 64
    n_fine: int = 128
    n_hgg: int | None = None        # default: 10% of total iterations
    n_hsg: int | None = None        # default: 50% of total iterations
    epsilon_hgg: float = 0.2
    hsg_weight: float = 0.2
    s_max: float | None = None      # default: 0.1 * min(H, W)
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    hsg_every: int = 1
    seed: int = 0
    hgg: bool = True
    hsg: bool = True
    direct_depth_baseline: bool = False
    direct_depth_weight: float = 0.1
    hsg_mode: str = "same-view"
    encoder: str = "toy-linear"
    encoder_dim: int = 128
    encoder_patch: int = 16
    encoder_seed: int = 0
    embeddings_path: str | None = None
    trunk_layers: int = 4
    trunk_width: int = 64
    color_width: int = 32
    l_pos: int = 6
    l_dir: int = 2
    sigma_bias: float = 0.0
    prior_fill_radius: int = 0
    final_delta_mode: str = "t_far"
    checkpoint_every: int = 5000
    metrics_every: int = 100
    eval_chunk: int = 1024

    def __post_init__(self):
        if self.total_iterations < 0 or self.rays_per_batch < 1:
            raise TrainingError("iterations must be >= 0 and batch size >= 1")
        if self.n_coarse < 1 or self.n_fine < 0:
            raise TrainingError("need n_coarse >= 1 and n_fine >= 0")
        if self.hsg_every < 1:
            raise TrainingError("hsg_every must be >= 1")
        for name in ("n_hgg", "n_hsg"):
            v = getattr(self, name)
            if v is not None and not (1 <= v <= max(self.total_iterations, 1)):
                raise TrainingError(f"{name} must be in [1, total_iterations]")

    def resolved(self, height: int, width: int) -> "TrainConfig":
        """Fill the derived schedule defaults against an image size."""
        out = TrainConfig(**asdict(self))
        total = max(self.total_iterations, 1)
        if out.n_hgg is None:
            out.n_hgg = max(1, round(0.10 * total))
        if out.n_hsg is None:
            out.n_hsg = max(1, round(0.50 * total))
        if out.s_max is None:
            out.s_max = 0.1 * min(height, width)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise TrainingError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def field_config(self) -> FieldConfig:
        return FieldConfig(trunk_layers=self.trunk_layers, trunk_width=self.trunk_width,
                           color_width=self.color_width, l_pos=self.l_pos,
                           l_dir=self.l_dir, sigma_bias=self.sigma_bias)


@dataclass
class TrainState:
    iteration: int
    field_c: RadianceField
    field_f: RadianceField
    opt: dc.OptimizerState
    config: TrainConfig
    metrics: list = field(default_factory=list)
    counters: dict = field(default_factory=lambda: {
        "hgg_windows_narrowed": 0, "hsg_applications": 0, "ddepth_applications": 0})


# ---------------------------------------------------------------------------
# losses


def hpg_loss(gt_colors: np.ndarray, color_c: dc.Tensor, color_f: dc.Tensor) -> dc.Tensor:
    """Batch mean of per-ray squared color error, coarse plus fine.

    Per ray the error is the squared L2 norm over RGB, so a uniform fine
    offset of 0.1 on one channel with a perfect coarse pass costs 0.01.
    """
    b = gt_colors.shape[0]
    gt = dc.Tensor(gt_colors)
    dc_err = dc.sub(gt, color_c)
    df_err = dc.sub(gt, color_f)
    total = dc.add(dc.sum_reduce(dc.mul(dc_err, dc_err)),
                   dc.sum_reduce(dc.mul(df_err, df_err)))
    return dc.mul(total, dc.Tensor(1.0 / b))


def direct_depth_loss(depth_c: dc.Tensor, depth_f: dc.Tensor,
                      prior_depth: np.ndarray) -> dc.Tensor:
    """Mean squared error of rendered depth against the sparse prior, for
    both models: the depth-supervision comparator that inherits whatever
    bias the prior carries."""
    b = prior_depth.shape[0]
    t = dc.Tensor(prior_depth)
    ec = dc.sub(depth_c, t)
    ef = dc.sub(depth_f, t)
    total = dc.add(dc.sum_reduce(dc.mul(ec, ec)), dc.sum_reduce(dc.mul(ef, ef)))
    return dc.mul(total, dc.Tensor(1.0 / b))


def total_loss(hpg: dc.Tensor, hsg: dc.Tensor | None, weight: float) -> dc.Tensor:
    """hpg + weight * hsg; the semantic term is already sign-corrected."""
    if hsg is None:
        return hpg
    return dc.add(hpg, dc.mul(dc.Tensor(weight), hsg))


# ---------------------------------------------------------------------------
# training loop


def _rng(seed: int, tag: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, i])


class _TrainData:
    """Flat per-pixel views of the training images for fast batch gathers."""

    def __init__(self, dataset):
        cams = dataset.train_cameras
        if not cams:
            raise TrainingError("dataset has no training views")
        self.cams = cams
        self.height, self.width = cams[0].height, cams[0].width
        self.near, self.far = cams[0].near, cams[0].far
        for c in cams:
            if (c.height, c.width) != (self.height, self.width) \
                    or (c.near, c.far) != (self.near, self.far):
                raise TrainingError("training cameras must share size and bounds")
        hw = self.height * self.width
        self.origins = np.stack([c.t for c in cams])
        self.dirs = np.stack([ray_grid(c).reshape(hw, 3) for c in cams])
        self.gt = np.stack([dataset.images[c.image_id].reshape(hw, 3) for c in cams])
        self.prior = np.stack([
            dataset.prior_depth_maps[c.image_id].reshape(hw) for c in cams])
        self.n_pixels = len(cams) * hw
        # prior-ray table for the depth-supervision baseline: the true
        # sparse priors only, never the fill-widened window map
        row_of = {c.image_id: k for k, c in enumerate(cams)}
        img_idx, pix_idx, depths = [], [], []
        for p in dataset.priors:
            if p.image_id in row_of:
                img_idx.append(row_of[p.image_id])
                pix_idx.append(p.v * self.width + p.u)
                depths.append(p.depth)
        self.prior_rays = (np.asarray(img_idx, dtype=int),
                           np.asarray(pix_idx, dtype=int),
                           np.asarray(depths, dtype=np.float64))

    def gather(self, flat_idx: np.ndarray):
        hw = self.height * self.width
        img = flat_idx // hw
        pix = flat_idx % hw
        return (self.origins[img], self.dirs[img, pix],
                self.gt[img, pix], self.prior[img, pix])


def _save_fields(path, field_c: RadianceField, field_f: RadianceField) -> None:
    blocks = {}
    blocks.update(field_c.to_blocks("coarse"))
    blocks.update(field_f.to_blocks("fine"))
    dc.save_checkpoint(path, blocks)


def load_fields(path, config: TrainConfig, bbox_lo, bbox_hi):
    blocks = dc.load_checkpoint(path)
    fc = RadianceField.from_blocks(blocks, "coarse", config.field_config(), bbox_lo, bbox_hi)
    ff = RadianceField.from_blocks(blocks, "fine", config.field_config(), bbox_lo, bbox_hi)
    return fc, ff


def train(dataset, config: TrainConfig, out_dir=None) -> TrainState:
    """Run the full optimization; returns the final state.

    With out_dir set, writes metrics.ndjson, periodic + final checkpoints,
    and summary.json (wall-clock and counters live there, keeping the
    metrics log free of nondeterminism).
    """
    t_start = time.perf_counter()
    cam0 = dataset.train_cameras[0] if dataset.train_cameras else None
    if cam0 is None:
        raise TrainingError("dataset has no training views")
    cfg = config.resolved(cam0.height, cam0.width)
    if cfg.prior_fill_radius > 0:
        dataset = dataset.with_prior_fill(cfg.prior_fill_radius)
    data = _TrainData(dataset)
    bbox_lo, bbox_hi = dataset.bbox

    field_c = RadianceField(cfg.field_config(), bbox_lo, bbox_hi, seed=cfg.seed)
    field_f = RadianceField(cfg.field_config(), bbox_lo, bbox_hi, seed=cfg.seed + 7919)
    params = {f"coarse/{k}": t for k, t in field_c.params.items()}
    params.update({f"fine/{k}": t for k, t in field_f.params.items()})
    opt = dc.OptimizerState(params, total_steps=max(cfg.total_iterations, 1),
                            lr_start=cfg.lr_start, lr_end=cfg.lr_end)
    state = TrainState(iteration=0, field_c=field_c, field_f=field_f,
                       opt=opt, config=cfg)

    hgg_sched = smp.HggSchedule(n_hgg=cfg.n_hgg, epsilon=cfg.epsilon_hgg)
    hsg_sched = sem.HsgSchedule(n_hsg=cfg.n_hsg, s_max=max(cfg.s_max, 1.0))

    hsg_active = cfg.hsg
    encoder = None
    if hsg_active:
        encoder = sem.make_encoder(cfg.encoder, dim=cfg.encoder_dim,
                                   patch=cfg.encoder_patch, seed=cfg.encoder_seed,
                                   embeddings_path=cfg.embeddings_path)
        if cfg.encoder == "external":
            log.warning("encoder 'external' cannot provide gradients; "
                        "semantic guidance disabled for this run")
            hsg_active = False

    metrics_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_file = open(os.path.join(out_dir, "metrics.ndjson"), "w")

    def emit_checkpoint(tag):
        if out_dir is not None:
            _save_fields(os.path.join(out_dir, f"ckpt_{tag}.ckpt"), field_c, field_f)

    try:
        for i in range(cfg.total_iterations):
            for t in params.values():
                t.zero_grad()

            gamma = smp.hgg_gamma(i, hgg_sched) if cfg.hgg else 1.0
            flat = _rng(cfg.seed, _S_BATCH, i).integers(0, data.n_pixels,
                                                        size=cfg.rays_per_batch)
            origins, dirs, gt, prior = data.gather(flat)
            if not cfg.hgg:
                prior = np.full_like(prior, np.nan)
            elif gamma < 1.0:
                state.counters["hgg_windows_narrowed"] += int(np.isfinite(prior).sum())

            res_c, res_f = rnd.render_batch(
                field_c, field_f, origins, dirs, data.near, data.far,
                prior, gamma, cfg.n_coarse, cfg.n_fine,
                _rng(cfg.seed, _S_COARSE, i), _rng(cfg.seed, _S_FINE, i),
                grad=True, final_delta_mode=cfg.final_delta_mode)
            loss_hpg = hpg_loss(gt, res_c.color, res_f.color)

            loss_hsg = None
            stride_i = sem.hsg_stride(i, hsg_sched) if cfg.hsg else None
            if hsg_active and i % cfg.hsg_every == 0:
                pair = sem.hsg_pair(
                    i, dataset, field_c, field_f, hsg_sched, encoder,
                    _rng(cfg.seed, _S_HSG, i), n_coarse=cfg.n_coarse,
                    n_fine=cfg.n_fine, gamma=gamma, use_window=cfg.hgg,
                    mode=cfg.hsg_mode, final_delta_mode=cfg.final_delta_mode)
                loss_hsg = sem.hsg_loss(pair.phi_sem, pair.phi_i)
                state.counters["hsg_applications"] += 1

            loss = total_loss(loss_hpg, loss_hsg, cfg.hsg_weight)

            if cfg.direct_depth_baseline and data.prior_rays[0].size > 0:
                img_idx, pix_idx, pdepth = data.prior_rays
                take = min(pdepth.size, max(1, cfg.rays_per_batch // 4))
                sel = _rng(cfg.seed, _S_DDEPTH, i).choice(pdepth.size, size=take,
                                                          replace=False)
                dd_c, dd_f = rnd.render_batch(
                    field_c, field_f, data.origins[img_idx[sel]],
                    data.dirs[img_idx[sel], pix_idx[sel]], data.near, data.far,
                    np.full(take, np.nan), 1.0, cfg.n_coarse, cfg.n_fine,
                    _rng(cfg.seed, _S_DDEPTH, i + 10 ** 9),
                    _rng(cfg.seed, _S_DDEPTH, i + 2 * 10 ** 9),
                    grad=True, final_delta_mode=cfg.final_delta_mode)
                loss_dd = direct_depth_loss(dd_c.depth, dd_f.depth, pdepth[sel])
                loss = dc.add(loss, dc.mul(dc.Tensor(cfg.direct_depth_weight), loss_dd))
                state.counters["ddepth_applications"] += 1

            if not np.isfinite(loss.data):
                dump_path = None
                if out_dir is not None:
                    dump_path = os.path.join(out_dir, "diverged.npz")
                    np.savez(dump_path, iteration=i, flat_idx=flat,
                             hpg=loss_hpg.data,
                             hsg=np.nan if loss_hsg is None else loss_hsg.data)
                raise TrainingDiverged(f"non-finite loss at iteration {i}", dump_path)

            dc.backward(loss)
            dc.adam_step(opt, params)
            state.iteration = i + 1

            if i % cfg.metrics_every == 0 or i == cfg.total_iterations - 1:
                mse = float(np.mean((res_f.color.data - gt) ** 2))
                entry = {
                    "iter": i,
                    "lr": dc.lr_at(i, opt.total_steps, cfg.lr_start, cfg.lr_end),
                    "gamma": gamma,
                    "stride": stride_i,
                    "hpg": float(loss_hpg.data),
                    "hsg": None if loss_hsg is None else float(loss_hsg.data),
                    "total": float(loss.data),
                    "psnr_train": evalio.PSNR_CAP if mse < 1e-10 else
                                  min(evalio.PSNR_CAP, float(10.0 * np.log10(1.0 / mse))),
                }
                state.metrics.append(entry)
                if metrics_file is not None:
                    metrics_file.write(json.dumps(entry, sort_keys=True) + "\n")
                    metrics_file.flush()
                log.info("iter %d loss %.5f psnr %.2f gamma %.3f stride %s",
                         i, entry["total"], entry["psnr_train"], gamma, stride_i)

            if cfg.checkpoint_every > 0 and i > 0 and i % cfg.checkpoint_every == 0:
                emit_checkpoint(f"{i:06d}")
    finally:
        if metrics_file is not None:
            metrics_file.close()

    emit_checkpoint("final")
    if out_dir is not None:
        summary = {
            "iterations": state.iteration,
            "elapsed_seconds": time.perf_counter() - t_start,
            "counters": state.counters,
            "final_metrics": state.metrics[-1] if state.metrics else None,
        }
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=1, sort_keys=True)
            f.write("\n")
    return state


# ---------------------------------------------------------------------------
# evaluation


def evaluate(dataset, field_c: RadianceField, field_f: RadianceField,
             config: TrainConfig, split: str = "test", out_dir=None) -> dict:
    """Render a split and score it: mean PSNR/SSIM against the stored
    images, depth RMSE against the stored depth maps over pixels the model
    itself considers opaque (accumulated weight above 0.5)."""
    cams = [c for c in dataset.cameras if c.split == split]
    if not cams:
        raise TrainingError(f"split {split!r} is empty")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    per_view = []
    for cam in cams:
        rng = _rng(config.seed, _S_EVAL, cam.image_id)
        img, dep, opa = rnd.render_image_np(
            field_c, field_f, cam, config.n_coarse, config.n_fine, rng,
            chunk=config.eval_chunk, final_delta_mode=config.final_delta_mode)
        gt_img = dataset.images[cam.image_id]
        gt_dep = dataset.depths[cam.image_id].astype(np.float64)
        mask = opa > 0.5
        entry = {
            "image_id": cam.image_id,
            "psnr": evalio.psnr(img, gt_img),
            "ssim": evalio.ssim(img, gt_img),
            "depth_rmse": evalio.depth_rmse(dep, gt_dep, mask) if mask.any() else None,
            "opaque_fraction": float(mask.mean()),
        }
        per_view.append(entry)
        if out_dir is not None:
            name = f"{cam.split}_{cam.image_id:03d}"
            evalio.write_png(os.path.join(out_dir, f"{name}.png"), img)
            evalio.write_pfm(os.path.join(out_dir, f"{name}.pfm"), dep)
    rmses = [e["depth_rmse"] for e in per_view if e["depth_rmse"] is not None]
    result = {
        "split": split,
        "n_views": len(cams),
        "psnr": float(np.mean([e["psnr"] for e in per_view])),
        "ssim": float(np.mean([e["ssim"] for e in per_view])),
        "depth_rmse": float(np.mean(rmses)) if rmses else None,
        "per_view": per_view,
    }
    if out_dir is not None:
        with open(os.path.join(out_dir, "eval.json"), "w") as f:
            json.dump(result, f, indent=1, sort_keys=True)
            f.write("\n")
    return result
