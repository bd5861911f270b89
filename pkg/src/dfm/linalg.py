"""Small dense linear algebra: Gram-Schmidt QR, eigenpairs and matrix exponentials.

Complex arithmetic stays inside this module; everything returned to callers
is real.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

MAX_ORDER = 64


class RankDeficientError(np.linalg.LinAlgError):
    pass


class EigenConvergenceError(np.linalg.LinAlgError):
    pass


@dataclass
class EigenPair:
    values: np.ndarray  # (n,) complex
    vectors: np.ndarray  # (n, n) complex, eigenvectors in columns


def _check_matrix(a: np.ndarray, square: bool = True) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or (square and a.shape[0] != a.shape[1]):
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] > MAX_ORDER:
        raise ValueError(f"matrix order {a.shape[0]} exceeds {MAX_ORDER}")
    if not np.isfinite(a).all():
        raise ValueError("matrix has non-finite entries")
    return a


def gram_schmidt_qr(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Modified Gram-Schmidt QR with a positive diagonal in R.

    Works column by column; each new column is immediately removed from the
    columns to its right.  Raises :class:`RankDeficientError` when a pivot
    norm drops below ``1e-12 * ||U||``.
    """
    u = _check_matrix(u, square=False)
    m, n = u.shape
    if n > m:
        raise ValueError(f"need at least as many rows as columns, got {u.shape}")
    scale = np.linalg.norm(u)
    q = u.copy()
    r = np.zeros((n, n))
    for k in range(n):
        pivot = np.linalg.norm(q[:, k])
        if pivot < 1e-12 * scale or pivot == 0.0:
            raise RankDeficientError(f"column {k} is (numerically) dependent: pivot {pivot:.3e}")
        r[k, k] = pivot
        q[:, k] /= pivot
        if k + 1 < n:
            r[k, k + 1:] = q[:, k] @ q[:, k + 1:]
            q[:, k + 1:] -= np.outer(q[:, k], r[k, k + 1:])
    return q, r


def _sort_eigs(values: np.ndarray, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # descending real part; conjugate partners share a real part, +imag first
    order = np.lexsort((-values.imag, -np.round(values.real, 12)))
    return values[order], vectors[:, order]


def eig_small(a: np.ndarray) -> EigenPair:
    a = _check_matrix(a)
    try:
        w, v = np.linalg.eig(a)
    except np.linalg.LinAlgError as exc:
        raise EigenConvergenceError(str(exc)) from exc
    w, v = _sort_eigs(w.astype(complex), v.astype(complex))
    return EigenPair(w, v)


def expm_series(a: np.ndarray, terms: int = 30) -> np.ndarray:
    """Scaling-and-squaring Taylor exponential, batched over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    flat = a.reshape(-1, n, n)
    out = np.empty_like(flat)
    norm = np.abs(flat).sum(axis=-2).max(axis=-1) if flat.size else np.zeros(len(flat))
    sq = np.maximum(0, np.ceil(np.log2(np.maximum(norm, 1e-300) / 0.5))).astype(int)
    eye = np.eye(n)
    for s in np.unique(sq):
        idx = np.nonzero(sq == s)[0]
        x = flat[idx] / (2.0 ** s)
        term = np.broadcast_to(eye, x.shape).copy()
        acc = term.copy()
        for k in range(1, terms + 1):
            term = term @ x / k
            acc += term
        for _ in range(s):
            acc = acc @ acc
        out[idx] = acc
    return out.reshape(a.shape)


def _eigen_exp(a: np.ndarray, scale: float):
    """Eigen-path exponentials for a stack of matrices plus a per-matrix ok mask."""
    n = a.shape[-1]
    w, v = np.linalg.eig(a)
    norm_a = np.abs(a).sum(axis=-1).max(axis=-1)
    resid = np.abs(a @ v - v * w[..., None, :]).max(axis=(-2, -1))
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(v)
    ok = (resid <= 1e-8 * np.maximum(norm_a, 1e-300)) & (cond < 1e6)
    out = np.zeros(a.shape)
    if ok.any():
        vo = v[ok]
        with np.errstate(all="ignore"):
            ez = (vo * np.exp(scale * w[ok])[..., None, :]) @ np.linalg.inv(vo)
        real = ez.real
        imag = np.abs(ez.imag).max(axis=(-2, -1))
        mag = np.maximum(np.abs(real).max(axis=(-2, -1)), 1e-300)
        good = np.isfinite(real).all(axis=(-2, -1)) & (imag <= 1e-9 * mag)
        out[np.nonzero(ok)[0][good]] = real[good]
        ok[np.nonzero(ok)[0][~good]] = False
    return out, ok


def matrix_exp_batch(a: np.ndarray, scale: float = 1.0, method: str = "auto") -> np.ndarray:
    """``exp(scale * A)`` for every trailing square matrix of ``a``.

    With ``method="auto"`` diagonalizable matrices go through the eigen path
    and the rest (defective or ill-conditioned eigenbases) fall back to
    scaling-and-squaring.  ``"eigen"`` raises instead of falling back;
    ``"series"`` skips the eigen path.
    """
    if method not in ("auto", "eigen", "series"):
        raise ValueError(f"unknown method {method!r}")
    a = np.asarray(a, dtype=np.float64)
    if scale < 0:
        raise ValueError("scale must be non-negative")
    if not np.isfinite(a).all():
        raise ValueError("matrix has non-finite entries")
    n = a.shape[-1]
    flat = a.reshape(-1, n, n)
    if scale == 0.0:
        return np.broadcast_to(np.eye(n), a.shape).copy()
    if method == "series":
        return expm_series(scale * a)
    out, ok = _eigen_exp(flat, scale)
    if not ok.all() and method == "eigen":
        raise EigenConvergenceError(f"{int((~ok).sum())} matrices failed the eigen-path checks")
    if not ok.all():
        logger.info("matrix_exp: %d of %d matrices fell back to the series path",
                    int((~ok).sum()), ok.size)
        out[~ok] = expm_series(scale * flat[~ok])
    if not np.isfinite(out).all():
        raise OverflowError("matrix exponential overflowed")
    return out.reshape(a.shape)


def matrix_exp(a: np.ndarray, scale: float = 1.0, method: str = "auto") -> np.ndarray:
    a = _check_matrix(a)
    return matrix_exp_batch(a, scale, method)


def expm_frechet_adjoint(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint of the Frechet derivative of ``exp`` at ``a`` applied to ``g``.

    For ``L = <G, exp(A)>`` this is ``dL/dA``; it is the upper-right block of
    ``exp([[A^T, G], [0, A^T]])``.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    at = np.swapaxes(a, -1, -2)
    block = np.zeros(a.shape[:-2] + (2 * n, 2 * n))
    block[..., :n, :n] = at
    block[..., n:, n:] = at
    block[..., :n, n:] = g
    return expm_series(block)[..., :n, n:]


def spectral_radius(a: np.ndarray) -> float:
    """Largest eigenvalue modulus."""
    return float(np.abs(eig_small(a).values).max())
