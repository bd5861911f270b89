"""Command-line entry point: ``dfm {run,train,eval,traj,cost,make-data}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import Corruption, few_shot_sample, write_synthetic_idx_dir
from .dynamics import write_trajectory_csv
from .harness import (RESULTS_HEADER, ExperimentConfig, fmt, load_dataset, load_model,
                      run_experiment, save_model, score, task_of, trajectory_records, write_results)
from .nn import count_cost
from .training import TrainConfig, TrainingDiverged, build_model, evaluate_logits, fit


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.out:
        cfg = replace(cfg, output=args.out)
    path = run_experiment(cfg)
    print(path)
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_dataset(args.dataset, args.resolution, args.train_size, args.test_size)
    tcfg = TrainConfig(epochs=args.epochs, T=args.T, tau=args.tau, sigma=args.sigma, seed=args.seed,
                       batch_size=args.batch_size)
    if args.sigma > 0 and args.shots is not None:
        raise SystemExit("error: --sigma > 0 and --shots are mutually exclusive")
    ds = train if args.shots is None else few_shot_sample(train, args.shots, args.seed)
    model = build_model(args.model, train.images.shape[1], train.num_classes, tcfg,
                        resolution=train.images.shape[-2:], task=task_of(train))
    base = [("train", args.model, fmt(args.sigma), fmt(args.shots), args.seed)]
    try:
        fit(model, ds, tcfg, out / "train_log.csv")
    except TrainingDiverged as exc:
        write_results(out / "results.csv", [list(base[0]) + ["top1", "nan", f"diverged: {exc}"]])
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    res = score(evaluate_logits(model, test, sigma=args.sigma, seed=args.seed), test)
    write_results(out / "results.csv", [list(base[0]) + [m, fmt(v), ""] for m, v in res.items()])
    save_model(model, out / "model.dfm", {"dataset": args.dataset, "resolution": args.resolution,
                                          "test_size": args.test_size, "train": tcfg.to_dict()})
    for m, v in res.items():
        print(f"{m} {v:.4f}")
    return 0


def _test_set(args, meta):
    dataset = args.dataset or meta.get("dataset", "synthetic-digits")
    resolution = meta.get("resolution", 32)
    test_size = args.test_size if args.test_size is not None else meta.get("test_size")
    return load_dataset(dataset, resolution, train_size=1, test_size=test_size)[1]


def cmd_eval(args) -> int:
    model, meta = load_model(args.checkpoint)
    test = _test_set(args, meta)
    corruption = Corruption.parse(args.corruption) if args.corruption else None
    res = score(evaluate_logits(model, test, seed=args.seed, corruption=corruption), test)
    tag = f"@{corruption.kind}:{fmt(corruption.severity)}" if corruption else ""
    rows = [["eval", meta["config"]["model"], "0.0", "all", args.seed, m + tag, fmt(v), ""]
            for m, v in res.items()]
    if args.out:
        write_results(args.out, rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    w.writerows(rows)
    return 0


def cmd_traj(args) -> int:
    model, meta = load_model(args.checkpoint)
    test = _test_set(args, meta)
    run_id = Path(args.checkpoint).stem
    rows, srows, probs, nll, sub = trajectory_records(model, test, run_id, args.seed, args.instances,
                                                      state_seed=args.seed)
    write_trajectory_csv(args.out, rows, args.softmax, srows)
    if args.plot:
        from .metrics import pca_trajectories
        from .plotting import plot_pca_paths
        proj = pca_trajectories(probs)
        labels = sub.labels if not sub.is_segmentation else np.zeros(len(sub), int)
        plot_pca_paths(proj.paths, labels, nll, args.plot)
    return 0


def cmd_cost(args) -> int:
    tcfg = TrainConfig(T=args.T, seed=args.seed)
    shape = (args.batch_size, args.channels, args.resolution, args.resolution)
    rows, timing = [], []
    for kind in args.models:
        model = build_model(kind, args.channels, args.classes, tcfg, resolution=(args.resolution,) * 2)
        rep = count_cost(model, shape, time_it=not args.no_timing)
        rows.append([kind, rep.parameter_count, rep.flops_per_forward])
        timing.append(rep.mean_batch_seconds)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["model", "parameters", "flops", "mean_batch_seconds"])
    for r, s in zip(rows, timing):
        w.writerow(r + [f"{s:.6f}"])
    if args.out:
        write_results(args.out, [["cost_report", k, "0.0", "all", args.seed, m, str(v), ""]
                                 for k, p, f in rows for m, v in (("parameters", p), ("flops", f))])
    return 0


def cmd_make_data(args) -> int:
    print(write_synthetic_idx_dir(args.out, args.n_train, args.n_test, args.seed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfm", description="Deep feedback model experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="override the config's output directory")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("train", help="train one model and save a checkpoint")
    t.add_argument("--dataset", default="synthetic-digits")
    t.add_argument("--model", choices=["dfm", "ff", "dfm-masked"], default="dfm")
    t.add_argument("--sigma", type=float, default=0.0)
    t.add_argument("--shots", type=int, default=None)
    t.add_argument("--T", type=int, default=5)
    t.add_argument("--tau", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--resolution", type=int, default=32)
    t.add_argument("--train-size", type=int, default=None)
    t.add_argument("--test-size", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint, optionally under a corruption")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corruption", help="kind:severity, e.g. defocus_blur:0.5")
    e.add_argument("--dataset")
    e.add_argument("--test-size", type=int, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    j = sub.add_parser("traj", help="export per-step trajectories of a DFM checkpoint")
    j.add_argument("--checkpoint", required=True)
    j.add_argument("--out", required=True)
    j.add_argument("--softmax", help="also write per-class probabilities here")
    j.add_argument("--plot", help="SVG path for the PCA projection")
    j.add_argument("--instances", type=int, default=32)
    j.add_argument("--dataset")
    j.add_argument("--test-size", type=int, default=None)
    j.add_argument("--seed", type=int, default=0)
    j.set_defaults(func=cmd_traj)

    c = sub.add_parser("cost", help="parameter and FLOP table")
    c.add_argument("--models", nargs="+", default=["dfm", "dfm-masked", "ff"])
    c.add_argument("--T", type=int, default=5)
    c.add_argument("--channels", type=int, default=1)
    c.add_argument("--classes", type=int, default=10)
    c.add_argument("--resolution", type=int, default=32)
    c.add_argument("--batch-size", type=int, default=32)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--no-timing", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_cost)

    m = sub.add_parser("make-data", help="write a synthetic 10-class IDX digit set")
    m.add_argument("--out", required=True)
    m.add_argument("--n-train", type=int, default=1000)
    m.add_argument("--n-test", type=int, default=500)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
