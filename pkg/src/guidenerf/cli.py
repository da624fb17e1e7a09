"""Command-line entry point.

Subcommands:
  gen     render a synthetic dataset (images, depth maps, cameras, priors)
  train   optimize the radiance fields from a JSON run config
  render  render a split from a checkpoint
  eval    render a split and score PSNR / SSIM / depth RMSE
  ablate  run the guidance on/off grid plus the depth-supervision baseline

A run config is a single JSON document: {"dataset": path, "out": path,
"train": {...}}. Unknown keys are rejected everywhere; every run writes
its fully resolved config next to its outputs so the exact run can be
repeated from the artifacts alone.

The HG3_LOG environment variable ({error|info|debug}) sets log verbosity;
--threads pins the BLAS worker-pool size so runs are reproducible.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("guidenerf.cli")


class CliError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("HG3_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        print(f"warning: HG3_LOG={level!r} not in {{error|info|debug}}, using error",
              file=sys.stderr)
        level = "error"
    logging.basicConfig(level=levels[level],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _pin_threads(n):
    if n is None:
        return None
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _check_out_dir(path, force: bool):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise CliError(f"{path} exists and is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


def _load_run_config(path):
    from .training import TrainConfig, TrainingError
    with open(path) as f:
        doc = json.load(f)
    known = {"dataset", "out", "train"}
    unknown = set(doc) - known
    if unknown:
        raise CliError(f"unknown run config keys: {sorted(unknown)}")
    for key in ("dataset", "out"):
        if key not in doc:
            raise CliError(f"run config is missing {key!r}")
    try:
        train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    except TrainingError as e:
        raise CliError(str(e)) from e
    return doc["dataset"], doc["out"], train_cfg


def _write_resolved(out_dir, dataset_path, cfg):
    doc = {"dataset": str(dataset_path), "out": str(out_dir), "train": cfg.to_dict()}
    with open(os.path.join(out_dir, "config.resolved.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    from .scenes import SceneSpec, generate_dataset, SceneError
    if args.scene_spec:
        with open(args.scene_spec) as f:
            spec = SceneSpec.from_dict(json.load(f))
    else:
        spec = SceneSpec()
    _check_out_dir(args.out, args.force)
    try:
        ds = generate_dataset(
            args.out, spec, args.seed, n_train=args.views, n_test=args.tests,
            image_size=args.image_size, density_fraction=args.density_fraction,
            mismatch_delta=args.mismatch, quadrature_n=args.quadrature,
            rig=args.rig, force=True)
    except SceneError as e:
        raise CliError(str(e)) from e
    print(f"dataset written to {args.out}: {len(ds.train_cameras)} train views, "
          f"{len(ds.test_cameras)} test views, {len(ds.priors)} depth priors")
    return 0


def cmd_train(args) -> int:
    from .scenes import load_dataset
    from .training import TrainingDiverged, train
    dataset_path, out_dir, cfg = _load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    _check_out_dir(out_dir, args.force)
    dataset = load_dataset(dataset_path)
    cam = dataset.train_cameras[0]
    resolved = cfg.resolved(cam.height, cam.width)
    _write_resolved(out_dir, dataset_path, resolved)
    try:
        state = train(dataset, resolved, out_dir=out_dir)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        if e.dump_path:
            print(f"diagnostic batch dump: {e.dump_path}", file=sys.stderr)
        return 2
    print(f"trained {state.iteration} iterations -> {out_dir}")
    return 0


def _load_for_inference(checkpoint, dataset_path, train_cfg=None):
    from .scenes import load_dataset
    from .training import TrainConfig, load_fields
    dataset = load_dataset(dataset_path)
    cfg = train_cfg
    if cfg is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(checkpoint)),
                               "config.resolved.json")
        if os.path.exists(sibling):
            with open(sibling) as f:
                cfg = TrainConfig.from_dict(json.load(f)["train"])
        else:
            cfg = TrainConfig()
    cam = dataset.train_cameras[0]
    cfg = cfg.resolved(cam.height, cam.width)
    lo, hi = dataset.bbox
    fc, ff = load_fields(checkpoint, cfg, lo, hi)
    return dataset, cfg, fc, ff


def cmd_render(args) -> int:
    from . import rendering as rnd
    from . import evalio
    import numpy as np
    dataset, cfg, fc, ff = _load_for_inference(args.checkpoint, args.dataset)
    _check_out_dir(args.out, args.force)
    cams = [c for c in dataset.cameras if c.split == args.split]
    if not cams:
        raise CliError(f"split {args.split!r} is empty")
    for cam in cams:
        rng = np.random.default_rng([cfg.seed, 99, cam.image_id])
        img, dep, _ = rnd.render_image_np(fc, ff, cam, cfg.n_coarse, cfg.n_fine,
                                          rng, chunk=cfg.eval_chunk,
                                          final_delta_mode=cfg.final_delta_mode)
        name = f"{cam.split}_{cam.image_id:03d}"
        evalio.write_png(os.path.join(args.out, f"{name}.png"), img)
        evalio.write_pfm(os.path.join(args.out, f"{name}.pfm"), dep)
    print(f"rendered {len(cams)} {args.split} views -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, TrainingError
    dataset, cfg, fc, ff = _load_for_inference(args.checkpoint, args.dataset)
    _check_out_dir(args.out, args.force)
    try:
        result = evaluate(dataset, fc, ff, cfg, split=args.split, out_dir=args.out)
    except TrainingError as e:
        raise CliError(str(e)) from e
    rmse = result["depth_rmse"]
    print(f"split={args.split} views={result['n_views']} "
          f"psnr={result['psnr']:.2f} ssim={result['ssim']:.4f} "
          f"depth_rmse={'n/a' if rmse is None else f'{rmse:.4f}'}")
    return 0


ABLATION_ROWS = (
    ("hgg+hsg", dict(hgg=True, hsg=True, direct_depth_baseline=False)),
    ("hgg", dict(hgg=True, hsg=False, direct_depth_baseline=False)),
    ("hsg", dict(hgg=False, hsg=True, direct_depth_baseline=False)),
    ("none", dict(hgg=False, hsg=False, direct_depth_baseline=False)),
    ("direct-depth", dict(hgg=False, hsg=False, direct_depth_baseline=True)),
)


def cmd_ablate(args) -> int:
    from .scenes import load_dataset
    from .training import TrainConfig, train, evaluate
    if args.config:
        _, _, base = _load_run_config(args.config)
    else:
        base = TrainConfig()
    if args.seed is not None:
        base.seed = args.seed
    _check_out_dir(args.out, args.force)
    dataset = load_dataset(args.dataset)
    cam = dataset.train_cameras[0]

    rows = []
    for label, flags in ABLATION_ROWS:
        cfg_d = base.to_dict()
        cfg_d.update(flags)
        cfg = TrainConfig.from_dict(cfg_d).resolved(cam.height, cam.width)
        row_dir = os.path.join(args.out, f"row_{label.replace('+', '_')}")
        os.makedirs(row_dir, exist_ok=True)
        _write_resolved(row_dir, args.dataset, cfg)
        log.info("ablation row %s starting", label)
        state = train(dataset, cfg, out_dir=row_dir)
        result = evaluate(dataset, state.field_c, state.field_f, cfg, split="test")
        rows.append({"label": label, "psnr": result["psnr"], "ssim": result["ssim"],
                     "depth_rmse": result["depth_rmse"]})

    table_path = os.path.join(args.out, "table.json")
    with open(table_path, "w") as f:
        json.dump({"rows": rows}, f, indent=1, sort_keys=True)
        f.write("\n")
    header = f"{'config':<14} {'psnr':>8} {'ssim':>8} {'depth_rmse':>11}"
    lines = [header, "-" * len(header)]
    for r in rows:
        rmse = "n/a" if r["depth_rmse"] is None else f"{r['depth_rmse']:.4f}"
        lines.append(f"{r['label']:<14} {r['psnr']:>8.2f} {r['ssim']:>8.4f} {rmse:>11}")
    text = "\n".join(lines)
    with open(os.path.join(args.out, "table.txt"), "w") as f:
        f.write(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guidenerf", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scene-spec", default=None, help="JSON scene spec (defaults built in)")
    g.add_argument("--views", type=int, default=3, choices=(3, 6, 9))
    g.add_argument("--tests", type=int, default=8)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mismatch", type=float, default=0.0,
                   help="keypoint mismatch magnitude in normalized coords")
    g.add_argument("--density-fraction", type=float, default=0.01)
    g.add_argument("--quadrature", type=int, default=4096)
    g.add_argument("--rig", default="ring", choices=("ring", "arc"),
                   help="camera layout: surrounding ring or forward-facing arc")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a split from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--threads", type=int, default=None)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="render and score a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--threads", type=int, default=None)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="guidance on/off grid plus depth-supervision baseline")
    a.add_argument("--dataset", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", default=None, help="run config supplying the base train block")
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--threads", type=int, default=None)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    limiter = _pin_threads(getattr(args, "threads", None))
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
