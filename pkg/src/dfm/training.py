"""Loss, one-cycle SGD (optional momentum), orthogonality correction and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import linalg
from . import tensor as T
from .data import Dataset, add_gaussian_noise, rng_for
from .dynamics import DFM, DecayOperator
from .metrics import miou, topk_accuracy
from .nn import FeedforwardModel, Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["epoch", "step", "lr", "loss", "metric", "q_ortho_residual"]


class TrainingDiverged(FloatingPointError):
    """Loss, gradient or state became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr_initial: float = 0.05
    lr_max: float = 1.0
    lr_final: float = 5e-5
    warmup_frac: float = 0.3
    momentum: float = 0.0
    label_smoothing: float = 0.1
    T: int = 5
    tau: float = 1.0
    sigma: float = 0.0
    seed: int = 0
    exp_decay: bool = True
    orthogonality: bool = True
    conv_decay: bool = False
    mask_feedback: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if min(self.lr_initial, self.lr_max, self.lr_final) <= 0:
            raise ValueError("learning rates must be positive")
        if self.T < 1:
            raise ValueError("training needs T >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in (0, 1)")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown TrainConfig fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def smoothed_cross_entropy(logits: Tensor, target, L: int, smoothing: float = 0.0) -> Tensor:
    """Mean of ``-sum_c q_c log softmax(logits)_c`` with ``q = (1-s) onehot + s/L``.

    ``logits`` is ``(L,)``, ``(n, L)`` or ``(n, L, H, W)``; segmentation losses
    are averaged over pixels as well.
    """
    target = np.asarray(target, dtype=np.int64)
    if target.size and (target.min() < 0 or target.max() >= L):
        raise ValueError(f"target out of range [0, {L})")
    if logits.ndim == 1:
        class_axis = 0
    else:
        class_axis = 1
    if logits.shape[class_axis] != L:
        raise T.ShapeError(f"logits have {logits.shape[class_axis]} classes, expected {L}")
    onehot = np.moveaxis(np.eye(L)[target], -1, class_axis)
    q = (1 - smoothing) * onehot + smoothing / L
    logp = T.log_softmax(logits, axis=class_axis)
    per = T.tsum(T.mul(logp, q), axis=class_axis)
    return T.scale(T.tmean(per), -1.0)


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine warm-up to ``lr_max`` over ``warmup_frac`` of the steps, cosine anneal after."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return cfg.lr_initial
    peak = cfg.warmup_frac * total_steps
    if step <= peak:
        p = step / peak
        return cfg.lr_max + (cfg.lr_initial - cfg.lr_max) * (1 + math.cos(math.pi * p)) / 2
    p = (step - peak) / (total_steps - peak)
    return cfg.lr_final + (cfg.lr_max - cfg.lr_final) * (1 + math.cos(math.pi * p)) / 2


@dataclass
class OptimizerState:
    total_steps: int
    momentum: float = 0.0
    step: int = 0
    lr: float = 0.0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(named_params, opt: OptimizerState, lr: float | None = None) -> None:
    """Momentum SGD: ``v <- m v + g``, ``theta <- theta - lr v``.

    All gradients are checked before any parameter moves.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    opt.lr = opt.lr if lr is None else lr
    for name, p in named_params:
        if p.grad is None:
            continue
        buf = opt.buffers.get(name)
        buf = p.grad.copy() if buf is None else opt.momentum * buf + p.grad
        opt.buffers[name] = buf
        p.data = p.data - opt.lr * buf
    opt.step += 1


def orthogonal_correction(q_updated: np.ndarray, previous: np.ndarray | None = None) -> np.ndarray:
    """Q factor of the Gram-Schmidt QR of the updated matrix.

    A rank-deficient update is reported and ``previous`` is kept.
    """
    try:
        q, _ = linalg.gram_schmidt_qr(q_updated)
    except (linalg.RankDeficientError, ValueError) as exc:
        if previous is None:
            raise
        logger.warning("orthogonal correction skipped: %s", exc)
        return previous
    return q


def build_model(kind: str, input_channels: int, num_classes: int, cfg: TrainConfig,
                resolution=(32, 32), task: str = "classifier", **arch) -> Module:
    """``kind`` is one of ``dfm``, ``ff`` or ``dfm-masked``."""
    if kind == "ff":
        return FeedforwardModel(input_channels, num_classes, input_resolution=resolution,
                                kind=task, seed=cfg.seed, **arch)
    if kind in ("dfm", "dfm-masked"):
        return DFM(input_channels, num_classes, input_resolution=resolution, kind=task, T=cfg.T,
                   tau=cfg.tau, decay="conv" if cfg.conv_decay else "spectral",
                   exp_decay=cfg.exp_decay, mask_feedback=cfg.mask_feedback or kind == "dfm-masked",
                   seed=cfg.seed, **arch)
    raise ValueError(f"unknown model kind {kind!r}")


def predict(model: Module, x: np.ndarray, state_seed: int = 0) -> Tensor:
    if getattr(model, "recurrent", False):
        return model(Tensor._wrap(x), state_seed=state_seed)
    return model(Tensor._wrap(x))


def batch_metric(logits: np.ndarray, labels: np.ndarray, L: int) -> float:
    if labels.ndim == 1:
        return topk_accuracy(logits, labels, 1)
    return miou(logits.argmax(axis=1), labels, L)


def _q_residual(model) -> float:
    dec = getattr(model, "decay", None)
    return dec.ortho_residual() if isinstance(dec, DecayOperator) else float("nan")


def train_epoch(model: Module, ds: Dataset, cfg: TrainConfig, opt: OptimizerState, epoch: int,
                log_rows: list | None = None) -> dict:
    """One pass over ``ds`` in shuffled mini-batches; returns ``{loss, metric}``."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(ds))
    named = list(model.named_parameters())
    q_param = model.decay.Q if isinstance(getattr(model, "decay", None), DecayOperator) else None
    losses, metrics, weights = [], [], []
    for b0 in range(0, len(ds), cfg.batch_size):
        idx = order[b0:b0 + cfg.batch_size]
        x = ds.images[idx]
        if cfg.sigma > 0:
            x = add_gaussian_noise(x, cfg.sigma, cfg.seed, opt.step)
        lr = onecycle_lr(min(opt.step, opt.total_steps), opt.total_steps, cfg)
        try:
            if getattr(model, "recurrent", False):
                logits = model(Tensor._wrap(x), state_seed=int(rng_for(cfg.seed, "state", opt.step).integers(2**31)))
            else:
                logits = model(Tensor._wrap(x))
            loss = smoothed_cross_entropy(logits, ds.labels[idx], ds.num_classes, cfg.label_smoothing)
            if not np.isfinite(loss.data).all():
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, instances {idx[:4]}...")
            model.zero_grad()
            T.backward(loss)
            prev_q = q_param.data.copy() if q_param is not None else None
            sgd_step(named, opt, lr)
        except (FloatingPointError, OverflowError) as exc:
            T.get_tape().reset()
            raise TrainingDiverged(f"epoch {epoch}, batch starting at instance {b0}: {exc}") from exc
        if q_param is not None and cfg.orthogonality:
            q_param.data = orthogonal_correction(q_param.data, prev_q)
        metric = batch_metric(logits.data, ds.labels[idx], ds.num_classes)
        losses.append(float(loss.data))
        metrics.append(metric)
        weights.append(len(idx))
        if log_rows is not None:
            log_rows.append([epoch, opt.step, lr, float(loss.data), metric, _q_residual(model)])
    w = np.asarray(weights, dtype=float)
    return {"loss": float(np.dot(losses, w) / w.sum()), "metric": float(np.dot(metrics, w) / w.sum())}


def fit(model: Module, ds: Dataset, cfg: TrainConfig, log_path=None) -> list[dict]:
    steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
    opt = OptimizerState(total_steps=steps_per_epoch * cfg.epochs, momentum=cfg.momentum)
    rows: list = []
    history = []
    try:
        for epoch in range(cfg.epochs):
            history.append(train_epoch(model, ds, cfg, opt, epoch, rows))
            logger.info("epoch %d loss %.4f metric %.4f", epoch, history[-1]["loss"], history[-1]["metric"])
    finally:
        if log_path is not None:
            write_train_log(log_path, rows)
    return history


def write_train_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAIN_LOG_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3])), repr(float(r[4])), repr(float(r[5]))])


def evaluate_logits(model: Module, ds: Dataset, batch_size: int = 100, sigma: float = 0.0,
                    seed: int = 0, corruption=None) -> np.ndarray:
    """Logits for every instance of ``ds`` (optionally noised or corrupted first)."""
    from .data import corrupt

    outs = []
    with T.no_grad():
        for i, b0 in enumerate(range(0, len(ds), batch_size)):
            x = ds.images[b0:b0 + batch_size]
            if corruption is not None:
                x = corrupt(x, corruption, seed, i)
            if sigma > 0:
                x = add_gaussian_noise(x, sigma, seed + 7919, i)
            outs.append(predict(model, x, state_seed=int(rng_for(seed, "eval-state", i).integers(2**31))).data)
    return np.concatenate(outs)
