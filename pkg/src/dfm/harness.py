"""Experiment configs, the sweep runner and its CSV / SVG outputs."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (Corruption, Dataset, few_shot_sample, load_idx_dir, make_synthetic_digits,
                   make_synthetic_seg, resize_nearest)
from .dynamics import DFM, write_trajectory_csv
from .metrics import miou, pca_trajectories, powerlaw_fit, topk_accuracy
from .nn import FeedforwardModel, Module, count_cost, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .training import TrainConfig, TrainingDiverged, build_model, evaluate_logits, fit

logger = logging.getLogger(__name__)

RESULTS_HEADER = ["mode", "model", "sigma", "D", "seed", "metric", "value", "reason"]
TIMING_HEADER = ["mode", "model", "sigma", "D", "seed", "seconds"]
POWERLAW_HEADER = ["model", "slope", "intercept", "r2", "p_value", "stderr", "n", "D_max"]
MODES = ("noise_sweep", "fewshot_sweep", "ablation", "corruption_eval", "trajectory_export",
         "cost_report")
MODEL_KINDS = ("dfm", "ff", "dfm-masked")

# name -> TrainConfig overrides; the first row is the full model
ABLATIONS = {
    "dfm": {},
    "dfm-no-decay": {"exp_decay": False},
    "dfm-no-ortho": {"orthogonality": False},
    "dfm-conv": {"conv_decay": True},
}


@dataclass
class ExperimentConfig:
    mode: str
    dataset: str = "synthetic-digits"
    sigma: list = field(default_factory=lambda: [0.0])
    D: list = field(default_factory=lambda: [None])  # None means the full training set
    seeds: list = field(default_factory=lambda: [0])
    models: list = field(default_factory=lambda: ["dfm", "ff"])
    train: TrainConfig = field(default_factory=TrainConfig)
    output: str = "results"
    resolution: int = 32
    train_size: int | None = None
    test_size: int | None = None
    corruptions: list = field(default_factory=list)
    traj_instances: int = 32
    arch: dict = field(default_factory=dict)
    plots: bool = True

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.seeds:
            raise ValueError("seeds list is empty")
        if not self.sigma or any(s < 0 for s in self.sigma):
            raise ValueError("sigma list must be non-empty and >= 0")
        if not self.D or any(d is not None and int(d) < 1 for d in self.D):
            raise ValueError("D entries must be positive integers or null")
        if any(s > 0 for s in self.sigma) and any(d is not None for d in self.D):
            raise ValueError("noise (sigma > 0) and few-shot sampling (D < |D|/L) are mutually exclusive")
        if self.mode != "ablation":
            bad = [m for m in self.models if m not in MODEL_KINDS]
            if bad:
                raise ValueError(f"unknown model kinds {bad}")
        if self.mode == "fewshot_sweep" and None in self.D:
            raise ValueError("fewshot_sweep needs explicit D values")
        for c in self.corruptions:
            Corruption.parse(c)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown ExperimentConfig fields: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# datasets

def load_dataset(spec: str, resolution: int = 32, train_size: int | None = None,
                 test_size: int | None = None, seed: int = 0) -> tuple[Dataset, Dataset]:
    """``synthetic-digits``, ``synthetic-seg`` or a directory of IDX files."""
    if spec == "synthetic-digits":
        tr = make_synthetic_digits(train_size or 1000, seed)
        te = make_synthetic_digits(test_size or 500, seed + 1)
        tr = replace(tr, images=resize_nearest(tr.images, (resolution, resolution)), split="train")
        te = replace(te, images=resize_nearest(te.images, (resolution, resolution)), split="test")
    elif spec == "synthetic-seg":
        tr = make_synthetic_seg(train_size or 200, resolution, resolution, 4, seed)
        te = replace(make_synthetic_seg(test_size or 100, resolution, resolution, 4, seed + 1),
                     split="test")
    else:
        path = Path(spec)
        if not path.is_dir():
            raise FileNotFoundError(f"dataset {spec!r} is neither a known generator nor a directory")
        tr, te = load_idx_dir(path, resolution)
    if train_size is not None:
        tr = tr.subset(np.arange(min(train_size, len(tr))))
    if test_size is not None:
        te = te.subset(np.arange(min(test_size, len(te))))
    return tr, te


def task_of(ds: Dataset) -> str:
    return "segmenter" if ds.is_segmentation else "classifier"


# --------------------------------------------------------------------------
# evaluation helpers

def score(logits: np.ndarray, ds: Dataset) -> dict[str, float]:
    if ds.is_segmentation:
        pred = logits.argmax(axis=1)
        return {"miou": miou(pred, ds.labels, ds.num_classes),
                "pixel_acc": float(np.mean(pred == ds.labels))}
    out = {"top1": topk_accuracy(logits, ds.labels, 1)}
    if ds.num_classes >= 5:
        out["top5"] = topk_accuracy(logits, ds.labels, 5)
    return out


def metric_names(ds: Dataset) -> list[str]:
    if ds.is_segmentation:
        return ["miou", "pixel_acc"]
    return ["top1", "top5"] if ds.num_classes >= 5 else ["top1"]


def fmt(v) -> str:
    if v is None:
        return "all"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def model_from_config(config: dict) -> Module:
    """Rebuild an untrained model from the ``config`` dict a model carries."""
    cfg = dict(config)
    kind = cfg.pop("model")
    if kind == "ff":
        return FeedforwardModel(**cfg)
    if kind in ("dfm", "dfm-masked"):
        return DFM(**cfg)
    raise ValueError(f"unknown model kind {kind!r} in checkpoint config")


def save_model(model: Module, path, extra: dict | None = None) -> None:
    """Binary parameters plus a ``.json`` sidecar holding the architecture."""
    path = Path(path)
    save_checkpoint(model, path)
    meta = {"config": model.config, **(extra or {})}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_model(path) -> tuple[Module, dict]:
    path = Path(path)
    side = Path(str(path) + ".json")
    if not side.exists():
        raise FileNotFoundError(f"missing architecture sidecar {side}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    model = model_from_config(meta["config"])
    model.load_state_dict(load_checkpoint(path))
    return model, meta


def trajectory_records(model: DFM, ds: Dataset, run_id: str, seed: int, n: int | None = None,
                       state_seed: int = 0):
    """Trajectory rows, softmax rows, per-step probability vectors and per-step losses."""
    if not getattr(model, "recurrent", False):
        raise ValueError("trajectories need a recurrent model")
    sub = ds if n is None else ds.subset(np.arange(min(n, len(ds))))
    with T.no_grad():
        _, traj = model.unroll(Tensor._wrap(sub.images), state_seed=state_seed)
    logits = np.stack(traj.logits, axis=1)  # (n, T+1, L[, H, W])
    shifted = logits - logits.max(axis=2, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=2, keepdims=True)
    nll_all = -(shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True)))
    if sub.is_segmentation:
        lab = sub.labels[:, None, None, :, :]
        nll = np.take_along_axis(nll_all, np.broadcast_to(lab, (len(sub), logits.shape[1], 1) + lab.shape[-2:]),
                                 axis=2)[:, :, 0].mean(axis=(-2, -1))
        probs = probs.mean(axis=(-2, -1))
    else:
        nll = nll_all[np.arange(len(sub)), :, sub.labels]
    steps = logits.shape[1]
    rows, srows = [], []
    for i in range(len(sub)):
        for t in range(steps):
            step = traj.norm_step[t - 1][i] if t > 0 else float("nan")
            rows.append([f"{run_id}-{i}", seed, t, fmt(nll[i, t]), fmt(traj.norm_h[t][i]), fmt(step),
                         int(probs[i, t].argmax())])
            for c in range(probs.shape[-1]):
                srows.append([f"{run_id}-{i}", seed, t, c, fmt(probs[i, t, c])])
    return rows, srows, probs, nll, sub


# --------------------------------------------------------------------------
# runner

@dataclass
class Cell:
    model: str
    sigma: float
    D: int | None
    seed: int


class Runner:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "logs").mkdir(exist_ok=True)
        self.rows: list[list] = []
        self.timing: list[list] = []
        self._data = None

    @property
    def data(self) -> tuple[Dataset, Dataset]:
        if self._data is None:
            c = self.cfg
            self._data = load_dataset(c.dataset, c.resolution, c.train_size, c.test_size)
        return self._data

    def add(self, cell: Cell, metric: str, value, reason: str = "") -> None:
        self.rows.append([self.cfg.mode, cell.model, fmt(cell.sigma), fmt(cell.D), cell.seed, metric,
                          fmt(value), reason])

    def train_cell(self, cell: Cell, overrides: dict | None = None):
        """Train one model; returns it, or ``None`` after recording NaN rows on divergence."""
        train, test = self.data
        tcfg = replace(self.cfg.train, sigma=cell.sigma, seed=cell.seed, **(overrides or {}))
        ds = train if cell.D is None else few_shot_sample(train, int(cell.D), cell.seed)
        kind = "dfm" if cell.model in ABLATIONS and cell.model != "dfm" else cell.model
        model = build_model(kind, train.images.shape[1], train.num_classes, tcfg,
                            resolution=train.images.shape[-2:], task=task_of(train), **self.cfg.arch)
        log = self.out / "logs" / f"{self.cfg.mode}_{cell.model}_s{fmt(cell.sigma)}_D{fmt(cell.D)}_seed{cell.seed}.csv"
        t0 = time.perf_counter()
        try:
            fit(model, ds, tcfg, log)
        except TrainingDiverged as exc:
            logger.warning("run %s diverged: %s", cell, exc)
            for m in metric_names(test):
                self.add(cell, m, float("nan"), f"diverged: {exc}")
            return None
        finally:
            self.timing.append([self.cfg.mode, cell.model, fmt(cell.sigma), fmt(cell.D), cell.seed,
                                f"{time.perf_counter() - t0:.3f}"])
        return model

    def evaluate(self, model, cell: Cell, sigma: float = 0.0, corruption=None) -> dict[str, float]:
        _, test = self.data
        logits = evaluate_logits(model, test, sigma=sigma, seed=cell.seed, corruption=corruption)
        if not np.isfinite(logits).all():
            raise TrainingDiverged("non-finite logits at evaluation")
        return score(logits, test)

    def train_and_score(self, cell: Cell, overrides: dict | None = None) -> dict | None:
        model = self.train_cell(cell, overrides)
        if model is None:
            return None
        try:
            res = self.evaluate(model, cell, sigma=cell.sigma)
        except (FloatingPointError, OverflowError) as exc:
            for m in metric_names(self.data[1]):
                self.add(cell, m, float("nan"), f"diverged: {exc}")
            return None
        for m, v in res.items():
            self.add(cell, m, v)
        return res

    # -- modes -------------------------------------------------------------

    def noise_sweep(self):
        for sigma in self.cfg.sigma:
            for seed in self.cfg.seeds:
                for model in self.cfg.models:
                    self.train_and_score(Cell(model, float(sigma), None, int(seed)))
        if self.cfg.plots:
            from .plotting import plot_metric_vs_sigma
            m = metric_names(self.data[1])[0]
            plot_metric_vs_sigma(self.curves("sigma", m), self.out / "metric_vs_sigma.svg", m)

    def fewshot_sweep(self):
        for D in self.cfg.D:
            for seed in self.cfg.seeds:
                for model in self.cfg.models:
                    self.train_and_score(Cell(model, 0.0, int(D), int(seed)))
        m = metric_names(self.data[1])[0]
        curves = self.curves("D", m)
        fits = {}
        with open(self.out / "powerlaw.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(POWERLAW_HEADER)
            for model, (xs, mean, _) in sorted(curves.items()):
                fit_, dmax = monotone_powerlaw(xs, mean)
                if fit_ is None:
                    w.writerow([model] + ["nan"] * 5 + [0, fmt(dmax)])
                    continue
                fits[model] = fit_
                w.writerow([model, fmt(fit_.slope), fmt(fit_.intercept), fmt(fit_.r2), fmt(fit_.p_value),
                            fmt(fit_.stderr), fit_.n, fmt(dmax)])
        if self.cfg.plots:
            from .plotting import plot_fewshot
            chance = None if self.data[1].is_segmentation else 1.0 / self.data[1].num_classes
            plot_fewshot(curves, fits, self.out / "metric_vs_D.svg", m, chance)

    def ablation(self):
        sigma = float(self.cfg.sigma[0])
        D = self.cfg.D[0]
        for seed in self.cfg.seeds:
            for name, overrides in ABLATIONS.items():
                self.train_and_score(Cell(name, sigma, D, int(seed)), overrides)

    def corruption_eval(self):
        corruptions = [Corruption.parse(c) for c in self.cfg.corruptions]
        for seed in self.cfg.seeds:
            for model_kind in self.cfg.models:
                cell = Cell(model_kind, 0.0, None, int(seed))
                model = self.train_cell(cell)
                if model is None:
                    continue
                for m, v in self.evaluate(model, cell).items():
                    self.add(cell, m, v)
                for c in corruptions:
                    for m, v in self.evaluate(model, cell, corruption=c).items():
                        self.add(cell, f"{m}@{c.kind}:{fmt(c.severity)}", v)

    def trajectory_export(self):
        from .plotting import plot_pca_paths
        for seed in self.cfg.seeds:
            for model_kind in self.cfg.models:
                if model_kind == "ff":
                    continue
                cell = Cell(model_kind, float(self.cfg.sigma[0]), None, int(seed))
                model = self.train_cell(cell)
                if model is None:
                    continue
                for m, v in self.evaluate(model, cell, sigma=cell.sigma).items():
                    self.add(cell, m, v)
                run_id = f"{model_kind}-seed{seed}"
                rows, srows, probs, nll, sub = trajectory_records(
                    model, self.data[1], run_id, int(seed), self.cfg.traj_instances)
                write_trajectory_csv(self.out / f"trajectory_{run_id}.csv", rows,
                                     self.out / f"softmax_{run_id}.csv", srows)
                save_model(model, self.out / f"{run_id}.dfm")
                if self.cfg.plots and len(sub) >= 2:
                    proj = pca_trajectories(probs)
                    labels = sub.labels if not sub.is_segmentation else np.zeros(len(sub), int)
                    plot_pca_paths(proj.paths, labels, nll, self.out / f"pca_{run_id}.svg")

    def cost_report(self):
        train, _ = self.data
        shape = (self.cfg.train.batch_size,) + train.images.shape[1:]
        seed = int(self.cfg.seeds[0])
        tcfg = replace(self.cfg.train, seed=seed)
        for kind in self.cfg.models:
            model = build_model(kind, train.images.shape[1], train.num_classes, tcfg,
                                resolution=train.images.shape[-2:], task=task_of(train), **self.cfg.arch)
            rep = count_cost(model, shape)
            cell = Cell(kind, 0.0, None, seed)
            self.add(cell, "parameters", rep.parameter_count)
            self.add(cell, "flops", rep.flops_per_forward)
            if getattr(model, "recurrent", False):
                self.add(cell, "flops_T1", count_cost(model, shape, T_steps=1, time_it=False).flops_per_forward)
            self.timing.append([self.cfg.mode, kind, "0.0", "all", seed, f"{rep.mean_batch_seconds:.6f}"])

    # -- aggregation ---------------------------------------------------------

    def curves(self, axis: str, metric: str) -> dict:
        """``{model: (xs, mean, std)}`` over seeds, skipping NaN runs."""
        col = RESULTS_HEADER.index(axis)
        acc: dict = {}
        for r in self.rows:
            if r[5] != metric:
                continue
            v = float(r[6])
            if math.isnan(v):
                continue
            acc.setdefault(r[1], {}).setdefault(float(r[col]), []).append(v)
        out = {}
        for model, d in acc.items():
            xs = sorted(d)
            out[model] = (np.array(xs), np.array([np.mean(d[x]) for x in xs]),
                          np.array([np.std(d[x]) for x in xs]))
        return out

    def run(self) -> Path:
        getattr(self, self.cfg.mode)()
        write_results(self.out / "results.csv", self.rows)
        with open(self.out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMING_HEADER)
            w.writerows(self.timing)
        return self.out / "results.csv"


def monotone_powerlaw(xs, mean):
    """Fit on the longest non-decreasing prefix of the curve; ``(fit or None, last D used)``."""
    xs, mean = np.asarray(xs, float), np.asarray(mean, float)
    k = 1
    while k < len(mean) and mean[k] >= mean[k - 1]:
        k += 1
    if k < 3 or (mean[:k] <= 0).any():
        return None, xs[k - 1] if len(xs) else float("nan")
    return powerlaw_fit(xs[:k], mean[:k]), xs[k - 1]


def write_results(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        w.writerows(rows)


def read_results(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Run every cell of ``cfg`` and write results, timing, logs and plots under ``cfg.output``."""
    return Runner(cfg).run()
