import csv
import json
import math

import numpy as np
import pytest

from dfm.cli import main
from dfm.data import write_synthetic_idx_dir
from dfm.dynamics import SOFTMAX_HEADER, TRAJECTORY_HEADER
from dfm.harness import (POWERLAW_HEADER, RESULTS_HEADER, ExperimentConfig, load_model,
                         monotone_powerlaw, read_results, run_experiment)

TINY_TRAIN = {"epochs": 1, "T": 2, "batch_size": 32}


@pytest.fixture(scope="module")
def idx_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("idx")
    write_synthetic_idx_dir(root, n_train=64, n_test=20, seed=0)
    return root


def tiny_cfg(idx_dir, out, mode, **kw):
    base = dict(mode=mode, dataset=str(idx_dir), seeds=[0], train=dict(TINY_TRAIN), output=str(out),
                test_size=20)
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def header(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh))


def test_mutual_exclusivity_guard():
    with pytest.raises(ValueError, match="mutually exclusive"):
        ExperimentConfig(mode="noise_sweep", sigma=[0.0, 0.5], D=[4])
    ExperimentConfig(mode="fewshot_sweep", sigma=[0.0], D=[1, 2])
    ExperimentConfig(mode="noise_sweep", sigma=[0.5], D=[None])


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(mode="unknown")
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"mode": "noise_sweep", "extra": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(mode="noise_sweep", models=["cnn"])
    with pytest.raises(ValueError):
        ExperimentConfig(mode="fewshot_sweep", D=[None])
    with pytest.raises(ValueError):
        ExperimentConfig(mode="corruption_eval", corruptions=["fog:1"])


def test_noise_sweep_row_accounting(idx_dir, tmp_path):
    cfg = tiny_cfg(idx_dir, tmp_path, "noise_sweep", sigma=[0.0], models=["dfm", "ff"])
    rows = read_results(run_experiment(cfg))
    assert header(tmp_path / "results.csv") == RESULTS_HEADER
    for metric in ("top1", "top5"):
        assert len([r for r in rows if r["metric"] == metric]) == 2
    assert {r["model"] for r in rows} == {"dfm", "ff"}
    assert (tmp_path / "metric_vs_sigma.svg").read_text().startswith("<?xml")
    assert header(tmp_path / "logs" / "noise_sweep_dfm_s0.0_Dall_seed0.csv")[-1] == "q_ortho_residual"


def test_fewshot_outputs(idx_dir, tmp_path):
    cfg = tiny_cfg(idx_dir, tmp_path, "fewshot_sweep", D=[1, 2, 4], models=["ff"])
    rows = read_results(run_experiment(cfg))
    assert sorted({r["D"] for r in rows}) == ["1", "2", "4"]
    assert header(tmp_path / "powerlaw.csv") == POWERLAW_HEADER
    assert (tmp_path / "metric_vs_D.svg").exists()


def test_monotone_region():
    fit, dmax = monotone_powerlaw([1, 2, 4, 8, 16], [0.1, 0.14, 0.2, 0.28, 0.25])
    assert dmax == 8 and fit.n == 4
    fit, dmax = monotone_powerlaw([1, 2, 4], [0.3, 0.2, 0.4])
    assert fit is None


def test_diverged_run_recorded(idx_dir, tmp_path):
    train = dict(TINY_TRAIN, lr_initial=1e10, lr_max=1e12, epochs=4)
    cfg = tiny_cfg(idx_dir, tmp_path, "noise_sweep", models=["ff"], train=train, plots=False)
    rows = read_results(run_experiment(cfg))
    assert rows and all(math.isnan(float(r["value"])) for r in rows)
    assert all(r["reason"].startswith("diverged") for r in rows)


def test_cost_report_identity(idx_dir, tmp_path):
    cfg = tiny_cfg(idx_dir, tmp_path, "cost_report", models=["dfm", "dfm-masked", "ff"],
                   train=dict(TINY_TRAIN, T=5))
    rows = read_results(run_experiment(cfg))
    get = {(r["model"], r["metric"]): int(r["value"]) for r in rows}
    assert get[("dfm", "flops")] == 5 * get[("dfm", "flops_T1")]
    assert get[("dfm", "parameters")] == get[("dfm-masked", "parameters")]
    assert get[("dfm", "flops")] == get[("dfm-masked", "flops")]
    assert header(tmp_path / "timing.csv")[-1] == "seconds"


def test_trajectory_export(idx_dir, tmp_path):
    cfg = tiny_cfg(idx_dir, tmp_path, "trajectory_export", models=["dfm"], traj_instances=3)
    run_experiment(cfg)
    assert header(tmp_path / "trajectory_dfm-seed0.csv") == TRAJECTORY_HEADER
    assert header(tmp_path / "softmax_dfm-seed0.csv") == SOFTMAX_HEADER
    rows = read_results(tmp_path / "trajectory_dfm-seed0.csv")
    assert len(rows) == 3 * 3  # instances x (T + 1)
    assert (tmp_path / "pca_dfm-seed0.svg").exists()
    model, meta = load_model(tmp_path / "dfm-seed0.dfm")
    assert meta["config"]["model"] == "dfm"


def test_ablation_rows(idx_dir, tmp_path):
    cfg = tiny_cfg(idx_dir, tmp_path, "ablation", plots=False)
    rows = read_results(run_experiment(cfg))
    assert {r["model"] for r in rows} == {"dfm", "dfm-no-decay", "dfm-no-ortho", "dfm-conv"}


def test_corruption_rows(idx_dir, tmp_path):
    cfg = tiny_cfg(idx_dir, tmp_path, "corruption_eval", models=["ff"], corruptions=["defocus_blur:0.5"])
    rows = read_results(run_experiment(cfg))
    assert {r["metric"] for r in rows} == {"top1", "top5", "top1@defocus_blur:0.5", "top5@defocus_blur:0.5"}


def test_run_twice_byte_identical(idx_dir, tmp_path):
    cfgs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(dict(mode="noise_sweep", dataset=str(idx_dir), sigma=[0.25], seeds=[1],
                                        models=["dfm"], train=TINY_TRAIN, output=str(tmp_path / name),
                                        test_size=20)))
        cfgs.append(path)
    for path in cfgs:
        assert main(["run", "--config", str(path)]) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    assert (tmp_path / "a" / "metric_vs_sigma.svg").read_bytes() == (tmp_path / "b" / "metric_vs_sigma.svg").read_bytes()


def test_cli_train_eval_traj_cost(idx_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(idx_dir), "--model", "dfm", "--T", "2", "--epochs", "1",
                 "--seed", "2", "--out", str(out), "--test-size", "20"]) == 0
    assert header(out / "results.csv") == RESULTS_HEADER
    assert (out / "model.dfm").read_bytes()[:4] == b"DFM1"
    assert main(["eval", "--checkpoint", str(out / "model.dfm"), "--corruption", "pixelate:0.34",
                 "--out", str(tmp_path / "eval.csv")]) == 0
    assert "top1@pixelate:0.34" in (tmp_path / "eval.csv").read_text()
    assert main(["traj", "--checkpoint", str(out / "model.dfm"), "--out", str(tmp_path / "t.csv"),
                 "--softmax", str(tmp_path / "s.csv"), "--plot", str(tmp_path / "p.svg"),
                 "--instances", "4"]) == 0
    assert header(tmp_path / "t.csv") == TRAJECTORY_HEADER
    assert main(["cost", "--no-timing", "--out", str(tmp_path / "cost.csv")]) == 0
    printed = capsys.readouterr().out
    assert "dfm-masked" in printed


def test_cli_rejects_noise_with_shots(idx_dir, tmp_path):
    with pytest.raises(SystemExit):
        main(["train", "--dataset", str(idx_dir), "--sigma", "0.5", "--shots", "2", "--out", str(tmp_path)])


def test_cli_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"mode": "noise_sweep", "sigma": [0.5], "D": [2]}))
    assert main(["run", "--config", str(path)]) == 2
    assert "mutually exclusive" in capsys.readouterr().err


def test_seed_independence(idx_dir, tmp_path):
    a = tiny_cfg(idx_dir, tmp_path / "a", "noise_sweep", models=["ff"], seeds=[0, 1], plots=False)
    rows = read_results(run_experiment(a))
    logs = sorted((tmp_path / "a" / "logs").iterdir())
    assert len(logs) == 2
    assert logs[0].read_bytes() != logs[1].read_bytes()
    assert np.isfinite([float(r["value"]) for r in rows]).all()
