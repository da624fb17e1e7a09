"""Pilot: floor-tile scene, prior fill radius on/off."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from guidenerf.scenes import SceneSpec, generate_dataset, load_dataset
from guidenerf.training import TrainConfig, train, evaluate

FLOOR = SceneSpec(n_primitives=(10, 13), sphere_fraction=0.55,
                  radius_range=(0.12, 0.38), box_half_range=(0.1, 0.3),
                  density_range=(12.0, 30.0), placement_extent=0.8,
                  floor_tiles=8)


def main(seed=7, iters=3000):
    ds_dir = f".acceptance/pilot_floor_s{seed}"
    try:
        ds = load_dataset(ds_dir)
    except FileNotFoundError:
        t0 = time.perf_counter()
        ds = generate_dataset(ds_dir, FLOOR, seed=seed, n_train=3, n_test=4,
                              image_size=64, density_fraction=0.01,
                              quadrature_n=1024, force=True)
        print(f"gen: {time.perf_counter()-t0:.0f}s", flush=True)
    print(f"[floor seed={seed}] priors={len(ds.priors)}", flush=True)
    cover = np.mean([np.isfinite(m).mean() for m in ds.with_prior_fill(3).prior_depth_maps.values()])
    print(f"prior coverage at fill 3: {cover:.3f}", flush=True)

    results = {}
    for fill in (0, 3):
        for name, hgg in (("hgg", True), ("none", False)):
            if not hgg and fill > 0:
                continue  # fill only matters with hgg
            cfg = TrainConfig(total_iterations=iters, rays_per_batch=16, hsg=False,
                              hgg=hgg, prior_fill_radius=fill,
                              metrics_every=2000, checkpoint_every=0, seed=0)
            t0 = time.perf_counter()
            state = train(ds, cfg)
            ev = evaluate(ds, state.field_c, state.field_f, cfg, split="test")
            key = f"{name}-fill{fill}" if hgg else name
            results[key] = ev
            print(f"  {key}: {(time.perf_counter()-t0)/60:.1f}min "
                  f"psnr={ev['psnr']:.2f} depth_rmse={ev['depth_rmse']:.3f} "
                  f"opaque={np.mean([v['opaque_fraction'] for v in ev['per_view']]):.3f}",
                  flush=True)
    base = results["none"]["psnr"]
    for k, ev in results.items():
        print(f"  {k}: gap {ev['psnr']-base:+.2f} dB depth {ev['depth_rmse']:.3f}", flush=True)


if __name__ == "__main__":
    main(seed=int(sys.argv[1]) if len(sys.argv) > 1 else 7)
