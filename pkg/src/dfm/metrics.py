"""Evaluation metrics and the statistical analyses used by the experiment runner."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats


def topk_accuracy(logits, targets, k: int = 1) -> float:
    """Fraction of rows whose target is among the k largest logits.

    Ties are broken in favour of the lower class index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    n, L = logits.shape
    if k > L:
        raise ValueError(f"k={k} exceeds the number of classes {L}")
    tv = logits[np.arange(n), targets][:, None]
    cls = np.arange(L)[None, :]
    ahead = (logits > tv) | ((logits == tv) & (cls < targets[:, None]))
    return float(np.mean(ahead.sum(axis=1) < k)) if n else float("nan")


def miou(pred, true, L: int) -> float:
    """Mean IoU over the classes present in the ground truth."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    ious = []
    for c in range(L):
        t = true == c
        if not t.any():
            continue
        p = pred == c
        ious.append((p & t).sum() / (p | t).sum())
    return float(np.mean(ious)) if ious else float("nan")


def auc(scores, labels) -> float:
    """P(random positive scores above random negative), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = stats.rankdata(scores)  # midranks handle ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_ovr(scores, targets) -> float:
    """Macro one-vs-rest AUC over the classes that occur in ``targets``."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    vals = [auc(scores[:, c], targets == c) for c in range(scores.shape[1])
            if 0 < (targets == c).sum() < len(targets)]
    if not vals:
        raise ValueError("AUC needs at least two classes present")
    return float(np.mean(vals))


@dataclass
class PowerLawFit:
    slope: float
    intercept: float
    r2: float
    p_value: float
    stderr: float
    n: int


def powerlaw_fit(D, acc) -> PowerLawFit:
    """OLS of log(acc) on log(D); two-sided t-test on the slope."""
    D = np.asarray(D, dtype=np.float64)
    acc = np.asarray(acc, dtype=np.float64)
    keep = (D > 0) & (acc > 0)
    if not keep.all():
        warnings.warn(f"powerlaw_fit: dropped {int((~keep).sum())} non-positive points")
    x, y = np.log(D[keep]), np.log(acc[keep])
    n = len(x)
    if n < 3:
        raise ValueError("powerlaw_fit needs at least 3 positive points")
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise ValueError("all D values are equal")
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((y - ym) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    se = float(np.sqrt(ss_res / (n - 2) / sxx))
    if se > 0:
        p = float(2 * stats.t.sf(abs(slope) / se, n - 2))
    else:
        p = 0.0 if slope != 0 else float("nan")
    return PowerLawFit(float(slope), float(intercept), r2, p, se, n)


@dataclass
class PCAProjection:
    paths: np.ndarray  # (instances, steps, 2)
    components: np.ndarray  # (2, dim)
    explained_variance: np.ndarray  # (2,)
    mean: np.ndarray


def pca_trajectories(vectors) -> PCAProjection:
    """Project every (instance, step) vector onto the top-2 directions of the pooled set."""
    vecs = np.asarray(vectors, dtype=np.float64)
    if vecs.ndim != 3 or vecs.shape[0] < 2 or vecs.shape[1] < 2:
        raise ValueError("need an (instances >= 2, steps >= 2, dim) array")
    pool = vecs.reshape(-1, vecs.shape[-1])
    mean = pool.mean(axis=0)
    centered = pool - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s ** 2 / (len(pool) - 1)
    if var[0] <= 0:
        raise ValueError("zero-variance pool")
    comps = vt[:2].copy()
    if len(comps) < 2:
        comps = np.vstack([comps, np.zeros_like(comps[0])])
        var = np.append(var, 0.0)
    # sign convention: largest-magnitude loading positive
    for i in range(2):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    paths = (vecs - mean) @ comps.T
    return PCAProjection(paths, comps, var[:2].copy(), mean)
