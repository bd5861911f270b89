"""Dense float64 tensors with a reverse-mode autodiff tape.

Every differentiable operation goes through :func:`primitive_forward`, which
looks the primitive up in a registry, runs its forward rule on the raw arrays
and, if any input requires a gradient, appends a node to the active tape.  The
tape is append-only, so a node's inputs always precede it; :func:`backward`
walks it once in reverse.

Arrays may carry any number of leading batch axes.  Spatial primitives operate
on the trailing ``(C, H, W)`` axes.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "UnknownPrimitiveError",
    "AutodiffError",
    "primitive_forward",
    "backward",
    "grad_check",
    "no_grad",
    "get_tape",
    "flop_counter",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Input shapes are incompatible with a primitive's shape rule."""


class UnknownPrimitiveError(KeyError):
    pass


class AutodiffError(RuntimeError):
    pass


_uid = itertools.count()


class Tensor:
    """A dense array of 64-bit floats plus a gradient slot.

    ``node`` is the id of the tape node that produced the tensor, or ``None``
    for leaves and for values created while recording is off.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self._tape: Tape | None = None
        self.uid = next(_uid)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        t.data = arr if arr.flags.c_contiguous else arr.copy()
        t.requires_grad = False
        t.grad = None
        t.node = None
        t._tape = None
        t.uid = next(_uid)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor division only supports scalar divisors")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    recording: bool = True

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def reset(self) -> None:
        for n in self.nodes:
            n.output.node = None
            n.output._tape = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    tape = get_tape()
    prev = tape.recording
    tape.recording = False
    try:
        yield
    finally:
        tape.recording = prev


class _FlopCounter:
    def __init__(self):
        self.flops = 0


@contextlib.contextmanager
def flop_counter() -> Iterator[_FlopCounter]:
    """Count 2*(multiply-adds) of conv2d / matmul primitives run inside."""
    counter = _FlopCounter()
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _count(flops: int) -> None:
    for c in getattr(_local, "counters", None) or ():
        c.flops += int(flops)


# --------------------------------------------------------------------------
# primitive registry

PRIMITIVES: dict[str, Callable] = {}


def _primitive(name: str):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn

    return deco


def primitive_forward(op: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Run primitive ``op`` on ``inputs`` and record it on the tape if needed."""
    try:
        rule = PRIMITIVES[op]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {op!r}") from None
    inputs = tuple(as_tensor(x) for x in inputs)
    out_arr, vjp = rule(*(x.data for x in inputs), **(attrs or {}))
    out = Tensor._wrap(out_arr)
    tape = get_tape()
    if tape.recording and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        out._tape = tape
        out.node = tape.append(Node(op, inputs, out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        ra, rb = a[::-1], b[::-1]
        for i, (x, y) in enumerate(zip(ra, rb)):
            if x != y and 1 not in (x, y):
                raise ShapeError(
                    f"{op}: dimension {-i - 1} mismatch ({x} vs {y}) for shapes {a} and {b}"
                ) from None
        raise


@_primitive("add")
def _add(a, b):
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return a + b, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))


@_primitive("sub")
def _sub(a, b):
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return a - b, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))


@_primitive("mul")
def _mul(a, b):
    _broadcast_shape(a.shape, b.shape, "mul")
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@_primitive("scale")
def _scale(a, factor: float):
    return a * factor, lambda g: (g * factor,)


@_primitive("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimension mismatch, a[-1]={a.shape[-1]} vs b[-2]={b.shape[-2]}"
        )
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    out = a @ b
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _count(2 * m * k * n * int(np.prod(out.shape[:-2], dtype=np.int64)))

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


@_primitive("sum")
def _sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, vjp


@_primitive("mean")
def _mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, vjp


@_primitive("reshape")
def _reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    total = int(np.prod(known)) if known else 1
    if shape.count(-1) > 1 or (
        -1 not in shape and total != a.size) or (-1 in shape and (total == 0 or a.size % total)):
        raise ShapeError(f"reshape: cannot view {a.shape} ({a.size} elements) as {shape}")
    src = a.shape
    return a.reshape(shape), lambda g: (g.reshape(src),)


@_primitive("transpose")
def _transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation of rank {a.ndim}")
    inv = np.argsort(axes)
    return np.transpose(a, axes), lambda g: (np.transpose(g, inv),)


@_primitive("concat")
def _concat(*arrays, axis=-3):
    if not arrays:
        raise ShapeError("concat: no inputs")
    ref = arrays[0]
    ax = axis % ref.ndim
    for i, a in enumerate(arrays[1:], 1):
        if a.ndim != ref.ndim:
            raise ShapeError(f"concat: input {i} has rank {a.ndim}, expected {ref.ndim}")
        for d in range(ref.ndim):
            if d != ax and a.shape[d] != ref.shape[d]:
                raise ShapeError(
                    f"concat: input {i} dimension {d} is {a.shape[d]}, expected {ref.shape[d]}"
                )
    sizes = np.cumsum([a.shape[ax] for a in arrays])[:-1]
    return np.concatenate(arrays, axis=ax), lambda g: tuple(np.split(g, sizes, axis=ax))


@_primitive("slice")
def _slice(a, axis, start, stop):
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for dimension {ax} of size {a.shape[ax]}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros_like(a)
        out[idx] = g
        return (out,)

    return a[idx].copy(), vjp


@_primitive("relu")
def _relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


@_primitive("softmax")
def _softmax(a, axis=-3):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return s, vjp


@_primitive("log_softmax")
def _log_softmax(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return out, lambda g: (g - s * g.sum(axis=axis, keepdims=True),)


@_primitive("global_avg_pool")
def _gap(a):
    if a.ndim < 3:
        raise ShapeError(f"global_avg_pool: need (..., C, H, W), got {a.shape}")
    hw = a.shape[-1] * a.shape[-2]
    src = a.shape

    def vjp(g):
        return (np.broadcast_to(g[..., None, None] / hw, src).copy(),)

    return a.mean(axis=(-2, -1)), vjp


@_primitive("upsample_nearest")
def _upsample(a, factor):
    if a.ndim < 2:
        raise ShapeError(f"upsample_nearest: need (..., H, W), got {a.shape}")
    fh, fw = (factor, factor) if isinstance(factor, int) else factor
    if fh < 1 or fw < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    out = np.repeat(np.repeat(a, fh, axis=-2), fw, axis=-1)
    h, w = a.shape[-2:]

    def vjp(g):
        g = g.reshape(*g.shape[:-2], h, fh, w, fw)
        return (g.sum(axis=(-3, -1)),)

    return out, vjp


@_primitive("group_norm")
def _group_norm(x, gamma, beta, groups, eps=1e-5):
    if x.ndim < 3:
        raise ShapeError(f"group_norm: need (..., C, H, W), got {x.shape}")
    c = x.shape[-3]
    if c % groups:
        raise ShapeError(f"group_norm: channel dimension {c} not divisible by groups={groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shape {gamma.shape}/{beta.shape}, expected ({c},)")
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    xg = x.reshape(*lead, groups, c // groups, h, w)
    mu = xg.mean(axis=(-3, -2, -1), keepdims=True)
    var = xg.var(axis=(-3, -2, -1), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    gb = gamma[:, None, None]
    out = xhat * gb + beta[:, None, None]
    m = (c // groups) * h * w
    red = tuple(range(x.ndim - 3)) + (-2, -1)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = (g * gb).reshape(xg.shape)
        xh = xhat.reshape(xg.shape)
        ax = (-3, -2, -1)
        dx = inv / m * (m * dxhat - dxhat.sum(axis=ax, keepdims=True)
                        - xh * (dxhat * xh).sum(axis=ax, keepdims=True))
        return dx.reshape(x.shape), dgamma, dbeta

    return out, vjp


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


@_primitive("conv2d")
def _conv2d(x, w, b=None, stride=1, padding=0):
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    if x.ndim < 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: need input (..., C, H, W) and weight (O, C, k, k), got {x.shape}, {w.shape}")
    cout, cin, kh, kw = w.shape
    if x.shape[-3] != cin:
        raise ShapeError(f"conv2d: input channel dimension {x.shape[-3]} != weight in-channels {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({cout},)")
    lead = x.shape[:-3]
    H, W = x.shape[-2:]
    ho, wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: spatial size {H}x{W} too small for kernel {kh}x{kw}")
    xb = x.reshape(-1, cin, H, W)
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    n = xb.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[
        :, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col laid out as (n, cin*kh*kw, ho*wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * kh * kw, ho * wo)
    wmat = w.reshape(cout, -1)
    out = (wmat @ cols).reshape(n, cout, ho, wo)
    if b is not None:
        out += b[:, None, None]
    _count(2 * n * cout * ho * wo * cin * kh * kw)

    def vjp(g):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.einsum("nop,nkp->ok", gm, cols, optimize=True).reshape(w.shape)
        dcols = (wmat.T @ gm).reshape(n, cin, kh, kw, ho, wo)
        if stride == 1 and kh * kw == 1:
            gxp = dcols.reshape(n, cin, ho, wo)
        else:
            gxp = np.zeros((n, cin) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx.reshape(*lead, cin, H, W), gw]
        if b is not None:
            grads.append(gm.sum(axis=(0, 2)))
        return tuple(grads)

    return out.reshape(*lead, cout, ho, wo), vjp


@_primitive("expm")
def _expm(a, scale=1.0, method="auto"):
    """Batched ``exp(scale * A)`` over trailing square matrices."""
    from . import linalg

    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"expm: trailing matrices must be square, got {a.shape}")
    out = linalg.matrix_exp_batch(a, scale, method)

    def vjp(g):
        return (scale * linalg.expm_frechet_adjoint(scale * a, g),)

    return out, vjp


# --------------------------------------------------------------------------
# functional wrappers


def add(a, b):
    return primitive_forward("add", (a, b))


def sub(a, b):
    return primitive_forward("sub", (a, b))


def mul(a, b):
    return primitive_forward("mul", (a, b))


def scale(a, factor: float):
    return primitive_forward("scale", (a,), {"factor": float(factor)})


def matmul(a, b):
    return primitive_forward("matmul", (a, b))


def tsum(a, axis=None, keepdims=False):
    return primitive_forward("sum", (a,), {"axis": axis, "keepdims": keepdims})


def tmean(a, axis=None, keepdims=False):
    return primitive_forward("mean", (a,), {"axis": axis, "keepdims": keepdims})


def reshape(a, shape):
    return primitive_forward("reshape", (a,), {"shape": tuple(shape)})


def transpose(a, axes=None):
    return primitive_forward("transpose", (a,), {"axes": axes})


def concat(tensors, axis=-3):
    return primitive_forward("concat", tuple(tensors), {"axis": axis})


def slice_axis(a, axis, start, stop):
    return primitive_forward("slice", (a,), {"axis": axis, "start": start, "stop": stop})


def relu(a):
    return primitive_forward("relu", (a,))


def softmax(a, axis=-3):
    return primitive_forward("softmax", (a,), {"axis": axis})


def log_softmax(a, axis=-1):
    return primitive_forward("log_softmax", (a,), {"axis": axis})


def global_avg_pool(a):
    return primitive_forward("global_avg_pool", (a,))


def upsample_nearest(a, factor):
    return primitive_forward("upsample_nearest", (a,), {"factor": factor})


def group_norm(x, gamma, beta, groups, eps=1e-5):
    return primitive_forward("group_norm", (x, gamma, beta), {"groups": groups, "eps": eps})


def conv2d(x, w, b=None, stride=1, padding=0):
    inputs = (x, w) if b is None else (x, w, b)
    return primitive_forward("conv2d", inputs, {"stride": stride, "padding": padding})


def expm(a, scale=1.0, method="auto"):
    return primitive_forward("expm", (a,), {"scale": float(scale), "method": method})


# --------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, retain_graph: bool = False) -> dict[int, np.ndarray]:
    """Backpropagate from scalar ``loss``; returns ``{leaf.uid: grad}``.

    Gradients are also accumulated into each leaf's ``.grad``.  Unless
    ``retain_graph`` is set the tape is consumed.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if loss.node is None or tape is None:
        raise AutodiffError("loss is detached: it has no tape node")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.node + 1]):
        g = grads.pop(node.output.uid, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                leaves[inp.uid] = inp
            prev = grads.get(inp.uid)
            grads[inp.uid] = gi if prev is None else prev + gi
    out = {}
    for uid, leaf in leaves.items():
        g = grads[uid]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[uid] = g
    if not retain_graph:
        tape.reset()
    return out


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5,
               floor: float = 1e-12) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``point``.

    Each coordinate's error is divided by ``max(|numeric|, floor)``, so
    gradients below ``floor`` are judged on absolute error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(point.data, requires_grad=True)
    loss = f(x)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite value at the base point")
    if loss.node is None:
        auto = np.zeros_like(x.data)
    else:
        backward(loss)
        auto = x.grad if x.grad is not None else np.zeros_like(x.data)
    base = x.data.copy()
    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xp[i] += step
            fp = f(Tensor._wrap(xp.reshape(base.shape))).data.sum()
            xp[i] -= 2 * step
            fm = f(Tensor._wrap(xp.reshape(base.shape))).data.sum()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite value when perturbing coordinate {i}")
            flat[i] = (fp - fm) / (2 * step)
    return float(np.max(np.abs(auto - numeric) / np.maximum(np.abs(numeric), floor)))
