import json
import os

import numpy as np
import pytest

from guidenerf import cli
from guidenerf import evalio
from guidenerf.geometry import load_priors


def run_cli(*argv):
    return cli.main(list(argv))


def gen_args(out, **kw):
    args = ["gen", "--out", str(out), "--views", "3", "--tests", "2",
            "--image-size", "12", "--quadrature", "1024",
            "--density-fraction", "0.05", "--seed", "5"]
    for k, v in kw.items():
        args += [f"--{k.replace('_', '-')}", str(v)]
    return args


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert run_cli(*gen_args(out)) == 0
    return out


def write_config(path, dataset, out, **train_kw):
    train = dict(total_iterations=8, rays_per_batch=8, n_coarse=8, n_fine=8,
                 trunk_layers=2, trunk_width=16, color_width=8, l_pos=3, l_dir=1,
                 encoder_dim=16, encoder_patch=4, hsg_every=4,
                 metrics_every=4, checkpoint_every=0, seed=1)
    train.update(train_kw)
    doc = {"dataset": str(dataset), "out": str(out), "train": train}
    path.write_text(json.dumps(doc))
    return path


def test_gen_creates_layout(dataset_dir):
    for rel in ("cameras.json", "priors.json", "meta.json",
                "images/train_000.png", "images/test_004.png",
                "depth/train_000.pfm"):
        assert (dataset_dir / rel).exists(), rel


def test_gen_refuses_overwrite_without_force(dataset_dir, capsys):
    assert run_cli(*gen_args(dataset_dir)) == 1
    assert "force" in capsys.readouterr().err


def test_gen_is_deterministic(tmp_path, dataset_dir):
    other = tmp_path / "ds2"
    assert run_cli(*gen_args(other)) == 0
    for rel in ("cameras.json", "priors.json", "images/train_001.png"):
        assert (other / rel).read_bytes() == (dataset_dir / rel).read_bytes()


def test_gen_views_flag_controls_train_count(tmp_path):
    out = tmp_path / "v6"
    assert run_cli(*gen_args(out, views=6)) == 0
    cams = json.loads((out / "cameras.json").read_text())["cameras"]
    assert sum(1 for c in cams if c["split"] == "train") == 6


def test_gen_mismatch_biases_priors(tmp_path):
    clean = tmp_path / "clean"
    biased = tmp_path / "biased"
    assert run_cli(*gen_args(clean)) == 0
    assert run_cli(*gen_args(biased, mismatch=0.01)) == 0

    def mean_bias(root):
        priors = load_priors(root / "priors.json")
        depths = {}
        errs = []
        for p in priors:
            if p.image_id not in depths:
                depths[p.image_id] = evalio.read_pfm(
                    root / "depth" / f"train_{p.image_id:03d}.pfm")
            errs.append(abs(p.depth - float(depths[p.image_id][p.v, p.u])))
        return np.mean(errs)

    assert mean_bias(clean) < 1e-5
    assert mean_bias(biased) > 1e-3


def test_train_eval_render_cycle(dataset_dir, tmp_path, capsys):
    cfg_path = write_config(tmp_path / "run.json", dataset_dir, tmp_path / "run")
    assert run_cli("train", "--config", str(cfg_path)) == 0
    out = tmp_path / "run"
    assert (out / "ckpt_final.ckpt").exists()
    assert (out / "metrics.ndjson").exists()
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["n_hgg"] is not None

    # refuses rerun without --force, and reproduces bit-identically with it
    assert run_cli("train", "--config", str(cfg_path)) == 1
    before = (out / "metrics.ndjson").read_bytes()
    assert run_cli("train", "--config", str(cfg_path), "--force") == 0
    assert (out / "metrics.ndjson").read_bytes() == before

    assert run_cli("eval", "--checkpoint", str(out / "ckpt_final.ckpt"),
                   "--dataset", str(dataset_dir),
                   "--out", str(tmp_path / "ev"), "--split", "test") == 0
    printed = capsys.readouterr().out
    assert "psnr=" in printed and "depth_rmse=" in printed
    eval_doc = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert set(eval_doc) >= {"psnr", "ssim", "depth_rmse", "per_view"}
    # metrics recompute from the emitted PNG within quantization error
    pv = eval_doc["per_view"][0]
    render = evalio.read_png(tmp_path / "ev" / f"test_{pv['image_id']:03d}.png")
    gt = evalio.read_png(dataset_dir / "images" / f"test_{pv['image_id']:03d}.png")
    assert evalio.psnr(render, gt) == pytest.approx(pv["psnr"], abs=0.2)

    assert run_cli("render", "--checkpoint", str(out / "ckpt_final.ckpt"),
                   "--dataset", str(dataset_dir),
                   "--out", str(tmp_path / "rn"), "--split", "train") == 0
    assert (tmp_path / "rn" / "train_000.png").exists()
    assert (tmp_path / "rn" / "train_000.pfm").exists()


def test_train_rejects_unknown_config_keys(dataset_dir, tmp_path, capsys):
    doc = {"dataset": str(dataset_dir), "out": str(tmp_path / "x"),
           "train": {"not_a_key": 1}}
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert run_cli("train", "--config", str(p)) == 1
    assert "unknown" in capsys.readouterr().err
    doc2 = {"dataset": str(dataset_dir), "out": str(tmp_path / "x"), "extra": {}}
    p.write_text(json.dumps(doc2))
    assert run_cli("train", "--config", str(p)) == 1


def test_train_zero_iterations(dataset_dir, tmp_path):
    cfg_path = write_config(tmp_path / "z.json", dataset_dir, tmp_path / "z",
                            total_iterations=0)
    assert run_cli("train", "--config", str(cfg_path)) == 0
    assert (tmp_path / "z" / "ckpt_final.ckpt").exists()


def test_train_divergence_exit_code(dataset_dir, tmp_path, monkeypatch, capsys):
    from guidenerf import training, diffcore

    real = training.hpg_loss

    def poisoned(gt, cc, cf):
        out = real(gt, cc, cf)
        out.data = np.array(np.nan)
        return out

    monkeypatch.setattr(training, "hpg_loss", poisoned)
    cfg_path = write_config(tmp_path / "d.json", dataset_dir, tmp_path / "d")
    assert run_cli("train", "--config", str(cfg_path)) == 2
    err = capsys.readouterr().err
    assert "diverged" in err
    assert (tmp_path / "d" / "diverged.npz").exists()


def test_ablate_table_structure(dataset_dir, tmp_path, capsys):
    cfg_path = write_config(tmp_path / "ab.json", dataset_dir, tmp_path / "unused",
                            total_iterations=4, metrics_every=2)
    assert run_cli("ablate", "--dataset", str(dataset_dir),
                   "--out", str(tmp_path / "ab"),
                   "--config", str(cfg_path), "--seed", "2") == 0
    table = json.loads((tmp_path / "ab" / "table.json").read_text())
    labels = [r["label"] for r in table["rows"]]
    assert labels == ["hgg+hsg", "hgg", "hsg", "none", "direct-depth"]
    for r in table["rows"]:
        assert set(r) == {"label", "psnr", "ssim", "depth_rmse"}
        assert np.isfinite(r["psnr"])
    txt = (tmp_path / "ab" / "table.txt").read_text()
    assert "direct-depth" in txt
    assert (tmp_path / "ab" / "row_hgg_hsg" / "ckpt_final.ckpt").exists()


def test_threads_flag_roundtrip(dataset_dir, tmp_path):
    cfg_path = write_config(tmp_path / "t.json", dataset_dir, tmp_path / "t",
                            total_iterations=2)
    assert run_cli("train", "--config", str(cfg_path), "--threads", "1") == 0


def test_hg3_log_env_sets_level(monkeypatch, capsys):
    monkeypatch.setenv("HG3_LOG", "bogus")
    cli._setup_logging()
    assert "HG3_LOG" in capsys.readouterr().err
