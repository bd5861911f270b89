"""Feedback state, decay operators and the forward-Euler unroll of a DFM."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from . import tensor as T
from .nn import Backbone, BackboneSpec, Module, make_head, parameter
from .tensor import Tensor

TRAJECTORY_HEADER = ["run_id", "seed", "t", "loss", "norm_h", "norm_step", "pred_class"]
SOFTMAX_HEADER = ["run_id", "seed", "t", "class", "prob"]


@dataclass
class FeedbackState:
    v: Tensor  # (n, B, h, w)
    u: Tensor  # (n, N, h, w)
    t: int = 0
    h_init_std: float = 1e-3

    @property
    def h(self) -> Tensor:
        return T.concat([self.v, self.u], axis=-3)


def init_state(B: int, N: int, latent: tuple[int, int], std: float = 1e-3, seed: int = 0,
               batch: int | None = None) -> FeedbackState:
    """Sample ``v`` and ``u`` i.i.d. from N(0, std^2) (std is a standard deviation)."""
    if not std > 0:
        raise ValueError("h_init_std must be positive")
    rng = np.random.default_rng([seed, 0x57A7E])
    lead = () if batch is None else (batch,)
    v = rng.standard_normal(lead + (B, *latent)) * std
    u = rng.standard_normal(lead + (N, *latent)) * std
    return FeedbackState(Tensor(v), Tensor(u), 0, std)


def feedback_input(x: Tensor, v: Tensor) -> Tensor:
    """Concatenate the channel-softmax of upsampled ``v`` after the channels of ``x``."""
    if x.ndim != v.ndim:
        raise T.ShapeError(f"feedback_input: x rank {x.ndim} != v rank {v.ndim}")
    if x.shape[:-3] != v.shape[:-3]:
        raise T.ShapeError(f"feedback_input: batch dimensions differ, {x.shape[:-3]} vs {v.shape[:-3]}")
    (H, W), (h, w) = x.shape[-2:], v.shape[-2:]
    if H % h or W % w or H // h != W // w:
        raise T.ShapeError(f"feedback_input: latent {h}x{w} does not tile input {H}x{W}")
    up = T.upsample_nearest(v, H // h) if H != h else v
    return T.concat([x, T.softmax(up, axis=-3)], axis=-3)


class DecayOperator(Module):
    """Channel-space decay ``c -> c^T Q exp((t/tau) Sigma) Q^T`` with ``Sigma = -I``."""

    def __init__(self, channels: int, tau: float = 1.0, seed: int = 0, exp_decay: bool = True):
        if tau <= 0:
            raise ValueError("tau must be positive")
        rng = np.random.default_rng([seed, 0xDEC])
        q, _ = linalg.gram_schmidt_qr(rng.standard_normal((channels, channels)))
        self.Q = parameter(q)
        self.sigma = -np.ones(channels)
        self.tau = float(tau)
        self.exp_decay = exp_decay

    @property
    def channels(self) -> int:
        return self.Q.shape[0]

    def matrix(self, t: int) -> Tensor:
        if self.exp_decay:
            diag = np.exp((t / self.tau) * self.sigma)
        else:
            diag = np.ones(self.channels)
        return T.matmul(T.mul(self.Q, diag[None, :]), self.Q.T)

    def ortho_residual(self) -> float:
        q = self.Q.data
        return float(np.abs(q.T @ q - np.eye(len(q))).max())


def exp_decay_apply(delta: Tensor, op: DecayOperator, t: int, fast: bool = False) -> Tensor:
    """Decay every spatial location's channel vector of ``delta``.

    ``fast=True`` uses the analytic cancellation ``Q e^{-t/tau} Q^T = e^{-t/tau} I``,
    valid only while Q is orthogonal; it gives no gradient to Q.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if not np.isfinite(delta.data).all():
        raise FloatingPointError("exp_decay_apply: non-finite input")
    c = op.channels
    if delta.shape[-3] != c:
        raise T.ShapeError(f"exp_decay_apply: delta has {delta.shape[-3]} channels, operator {c}")
    if fast:
        return delta * (float(np.exp(-t / op.tau)) if op.exp_decay else 1.0)
    nd = delta.ndim
    to_last = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
    back = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    rows = T.transpose(delta, to_last)
    return T.transpose(T.matmul(rows, op.matrix(t)), back)


Z_MODES = ("damp", "amplify", "fanin")


class ConvDecayKernel(Module):
    """Per (out, in) channel pair k x k kernels exponentiated as matrices each step."""

    def __init__(self, channels: int, k: int = 3, tau: float = 1.0, z_mode: str = "fanin",
                 seed: int = 0, exp_decay: bool = True, init_scale: float = 0.01):
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        if z_mode not in Z_MODES:
            raise ValueError(f"unknown z_mode {z_mode!r}")
        rng = np.random.default_rng([seed, 0xC0DE])
        w = -np.eye(k) + init_scale * rng.standard_normal((channels, channels, k, k))
        self.w = parameter(w)
        self.k = k
        self.tau = float(tau)
        self.z_mode = z_mode
        self.exp_decay = exp_decay

    @property
    def channels(self) -> int:
        return self.w.shape[1]

    @property
    def z_factor(self) -> float:
        if self.z_mode == "damp":
            return 1.0 / self.k
        if self.z_mode == "amplify":
            return float(self.k)
        # every output channel sums C_in identity kernels at t = 0
        return 1.0 / (self.k * self.channels)

    def kernels(self, t: int, method: str = "auto") -> Tensor:
        s = t / self.tau if self.exp_decay else 0.0
        return T.expm(self.w, s, method)


def conv_exp_decay_apply(delta: Tensor, kern: ConvDecayKernel, t: int, method: str = "auto") -> Tensor:
    if kern.w.shape[-1] != kern.w.shape[-2]:
        raise T.ShapeError(f"conv_exp_decay_apply: kernel windows must be square, got {kern.w.shape[-2:]}")
    if delta.shape[-3] != kern.channels:
        raise T.ShapeError(f"conv_exp_decay_apply: delta has {delta.shape[-3]} channels, kernel {kern.channels}")
    if not np.isfinite(delta.data).all():
        raise FloatingPointError("conv_exp_decay_apply: non-finite input")
    out = T.conv2d(delta, kern.kernels(t, method), padding=kern.k // 2)
    return out * kern.z_factor


def apply_decay(delta: Tensor, op, t: int) -> Tensor:
    if isinstance(op, ConvDecayKernel):
        return conv_exp_decay_apply(delta, op, t)
    return exp_decay_apply(delta, op, t)


@dataclass
class Trajectory:
    """Per-step records (detached arrays), index ``t`` runs 0..T."""

    norm_h: list[np.ndarray] = field(default_factory=list)
    norm_step: list[np.ndarray] = field(default_factory=list)
    norm_delta: list[np.ndarray] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)


def _norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(a.shape[0], -1) ** 2).sum(axis=1)) if a.ndim == 4 else np.array([np.linalg.norm(a)])


def unroll(x: Tensor, backbone, head, op, T_steps: int, mask_feedback: bool = False,
           state: FeedbackState | None = None, record: bool = True,
           keep_states: bool = False) -> tuple[Tensor, Trajectory]:
    """Forward-Euler unroll ``h(t+1) = h(t) + decay(F'(x, softmax(v(t))), t)``.

    Returns ``G(u(T))`` and the recorded trajectory.  With ``mask_feedback``
    the feedback input is built from ``v = 0`` for ``t > 0``.
    """
    if T_steps < 0:
        raise ValueError("T must be >= 0")
    channels = op.channels
    if state is None:
        raise ValueError("unroll needs an initial state")
    B = state.v.shape[-3]
    h = state.h
    if h.shape[-3] != channels:
        raise T.ShapeError(f"state has {h.shape[-3]} channels, decay operator {channels}")
    traj = Trajectory()

    def snapshot(u: Tensor, step: np.ndarray | None, delta: np.ndarray | None):
        traj.norm_h.append(_norms(h.data))
        if step is not None:
            traj.norm_step.append(_norms(step))
            traj.norm_delta.append(_norms(delta))
        if keep_states:
            traj.states.append(h.data.copy())
        with T.no_grad():
            traj.logits.append(head(Tensor._wrap(u.data)).data.copy())

    v, u = state.v, state.u
    if record:
        snapshot(u, None, None)
    for t in range(T_steps):
        v_in = Tensor._wrap(np.zeros_like(v.data)) if (mask_feedback and t > 0) else v
        delta = backbone(feedback_input(x, v_in))
        if delta.shape != h.shape:
            raise T.ShapeError(f"F' output {delta.shape} does not match state {h.shape}")
        if not np.isfinite(delta.data).all():
            raise FloatingPointError(
                f"non-finite F' output at t={t}: ||h(t)||={np.linalg.norm(h.data):.3e}")
        step = apply_decay(delta, op, t)
        h = h + step
        if not np.isfinite(h.data).all():
            raise FloatingPointError(
                f"non-finite state at t={t + 1}: ||h(t)||={np.linalg.norm(h.data - step.data):.3e}")
        v = T.slice_axis(h, -3, 0, B)
        u = T.slice_axis(h, -3, B, channels)
        if record:
            snapshot(u, step.data, delta.data)
    return head(u), traj


class DFM(Module):
    """Deep feedback model: backbone F', head G, decay operator and unroll settings."""

    recurrent = True

    def __init__(self, input_channels: int, num_classes: int, latent_channels: int = 16,
                 feedback_channels: int | None = None, stage_widths=(8, 16),
                 input_resolution=(32, 32), kind: str = "classifier", T: int = 5,
                 tau: float = 1.0, h_init_std: float = 1e-3, decay: str = "spectral",
                 conv_kernel: int = 3, z_mode: str = "fanin", exp_decay: bool = True,
                 mask_feedback: bool = False, seed: int = 0):
        B = num_classes if feedback_channels is None else feedback_channels
        self.config = dict(model="dfm-masked" if mask_feedback else "dfm",
                           input_channels=input_channels, num_classes=num_classes,
                           latent_channels=latent_channels, feedback_channels=B,
                           stage_widths=list(stage_widths), input_resolution=list(input_resolution),
                           kind=kind, T=T, tau=tau, h_init_std=h_init_std, decay=decay,
                           conv_kernel=conv_kernel, z_mode=z_mode, exp_decay=exp_decay,
                           mask_feedback=mask_feedback, seed=seed)
        spec = BackboneSpec(kind, input_channels + B, tuple(input_resolution), list(stage_widths),
                            latent_channels + B)
        self.backbone = Backbone(spec, seed)
        self.head = make_head(kind, latent_channels, num_classes, spec.total_stride, seed)
        if decay == "spectral":
            self.decay = DecayOperator(latent_channels + B, tau, seed, exp_decay)
        elif decay == "conv":
            self.decay = ConvDecayKernel(latent_channels + B, conv_kernel, tau, z_mode, seed, exp_decay)
        else:
            raise ValueError(f"unknown decay {decay!r}")
        self.B, self.N = B, latent_channels
        self.latent = spec.latent_resolution
        self.T = T
        self.h_init_std = h_init_std
        self.mask_feedback = mask_feedback

    def initial_state(self, batch: int | None, seed: int) -> FeedbackState:
        return init_state(self.B, self.N, self.latent, self.h_init_std, seed, batch)

    def unroll(self, x: Tensor, T: int | None = None, state_seed: int = 0, record: bool = True,
               mask_feedback: bool | None = None, state: FeedbackState | None = None,
               keep_states: bool = False):
        batch = x.shape[0] if x.ndim == 4 else None
        if state is None:
            state = self.initial_state(batch, state_seed)
        mask = self.mask_feedback if mask_feedback is None else mask_feedback
        return unroll(x, self.backbone, self.head, self.decay, self.T if T is None else T,
                      mask, state, record, keep_states)

    def forward(self, x: Tensor, T: int | None = None, state_seed: int = 0, **kw) -> Tensor:
        logits, _ = self.unroll(x, T=T, state_seed=state_seed, record=False, **kw)
        return logits


def jacobian_spectral_estimate(backbone, op, state: FeedbackState, x: Tensor, t: int,
                               iters: int = 50, tol: float = 1e-10, seed: int = 0,
                               return_info: bool = False):
    """Largest singular value of ``dh(t+1)/dh(t)`` by power iteration on ``J^T J``.

    ``J^T w`` comes from a reverse pass through the tape; ``J v`` from a
    central difference of the step map.  Diagnostic only.
    """
    if iters < 5:
        raise ValueError("iters must be >= 5")
    B = state.v.shape[-3]
    h0 = state.h.data.copy()

    def step_map(h_arr: np.ndarray, track: bool):
        h = Tensor(h_arr, requires_grad=track)
        v = T.slice_axis(h, -3, 0, B)
        delta = backbone(feedback_input(x, v))
        return h, h + apply_decay(delta, op, t)

    def jvp(vec: np.ndarray) -> np.ndarray:
        eps = 1e-6 * max(1.0, np.linalg.norm(h0)) / max(np.linalg.norm(vec), 1e-300)
        with T.no_grad():
            fp = step_map(h0 + eps * vec, False)[1].data
            fm = step_map(h0 - eps * vec, False)[1].data
        return (fp - fm) / (2 * eps)

    def vjp(w: np.ndarray) -> np.ndarray:
        h, out = step_map(h0, True)
        T.backward(T.tsum(T.mul(out, w)))
        for p in _params_of(backbone, op):
            p.grad = None
        return h.grad

    rng = np.random.default_rng([seed, 0x1AC])
    vec = rng.standard_normal(h0.shape)
    vec /= np.linalg.norm(vec)
    est, converged = 0.0, False
    for _ in range(iters):
        jv = jvp(vec)
        new_est = float(np.linalg.norm(jv))
        if new_est == 0.0:
            break
        vec = vjp(jv / new_est)
        vec /= np.linalg.norm(vec)
        if abs(new_est - est) <= tol * max(new_est, 1.0):
            est, converged = new_est, True
            break
        est = new_est
    if not converged:
        warnings.warn(f"jacobian_spectral_estimate did not converge in {iters} iterations")
    return (est, converged) if return_info else est


def _params_of(*mods):
    out = []
    for m in mods:
        if isinstance(m, Module):
            out.extend(m.parameters())
    return out


def write_trajectory_csv(path, rows, softmax_path=None, softmax_rows=None) -> None:
    """Rows follow :data:`TRAJECTORY_HEADER`; optional per-class softmax dump."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        w.writerows(rows)
    if softmax_path is not None:
        with open(softmax_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SOFTMAX_HEADER)
            w.writerows(softmax_rows or [])
