"""Desk-scale residual backbones, prediction heads, cost accounting and checkpoints."""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DFM1"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Minimal parameter container; parameters and children are found by attribute scan."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, gain: float = 2.0):
        std = np.sqrt(gain / (cin * k * k))
        self.weight = parameter(rng.standard_normal((cout, cin, k, k)) * std)
        self.bias = parameter(np.zeros(cout))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = parameter(rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in))
        self.bias = parameter(np.zeros(fan_out))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return T.reshape(T.matmul(T.reshape(x, (1, -1)), self.weight), (-1,)) + self.bias
        return T.matmul(x, self.weight) + self.bias


def norm_groups(channels: int) -> int:
    # largest divisor of channels not above min(8, channels)
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels: int):
        self.groups = norm_groups(channels)
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.weight, self.bias, self.groups)


class ResidualBlock(Module):
    """Pre-activation block: ``x + conv(relu(gn(conv(relu(gn(x))))))``."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.norm1 = GroupNorm(channels)
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.norm2 = GroupNorm(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv1(T.relu(self.norm1(x)))
        y = self.conv2(T.relu(self.norm2(y)))
        return x + y


class Stage(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.norm = GroupNorm(cin)
        self.down = Conv2d(cin, cout, 3, rng, stride=2)
        self.block = ResidualBlock(cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(self.down(T.relu(self.norm(x))))


@dataclass
class BackboneSpec:
    kind: str = "classifier"
    input_channels: int = 1
    input_resolution: tuple[int, int] = (32, 32)
    stage_widths: list[int] = field(default_factory=lambda: [8, 16])
    output_channels: int = 16

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.stage_widths)

    @property
    def latent_resolution(self) -> tuple[int, int]:
        s = self.total_stride
        return self.input_resolution[0] // s, self.input_resolution[1] // s

    def validate(self) -> None:
        if self.kind not in ("classifier", "segmenter"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if not self.stage_widths or min(self.stage_widths) < 1:
            raise ValueError("stage widths must be >= 1")
        if self.input_channels < 1 or self.output_channels < 1:
            raise ValueError("channel counts must be >= 1")
        s = self.total_stride
        for n in self.input_resolution:
            if n % s:
                raise ValueError(f"input resolution {self.input_resolution} not divisible by total stride {s}")


class Backbone(Module):
    """Residual CNN: stem conv, stride-2 residual stages, 1x1 projection."""

    def __init__(self, spec: BackboneSpec, seed: int):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng([seed, 0xBB])
        widths = list(spec.stage_widths)
        self.stem = Conv2d(spec.input_channels, widths[0], 3, rng)
        self.stages = [Stage(cin, cout, rng) for cin, cout in zip([widths[0]] + widths[:-1], widths)]
        self.norm = GroupNorm(widths[-1])
        self.proj = Conv2d(widths[-1], spec.output_channels, 1, rng, gain=1.0)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-2:] != tuple(self.spec.input_resolution):
            raise T.ShapeError(f"backbone expects spatial size {self.spec.input_resolution}, got {x.shape[-2:]}")
        y = self.stem(x)
        for stage in self.stages:
            y = stage(y)
        return self.proj(T.relu(self.norm(y)))


def build_backbone(spec: BackboneSpec, seed: int) -> Backbone:
    return Backbone(spec, seed)


class ClassifierHead(Module):
    kind = "classifier"

    def __init__(self, channels: int, num_classes: int, seed: int):
        self.channels = channels
        self.fc = Linear(channels, num_classes, np.random.default_rng([seed, 0xC1]))

    def forward(self, u: Tensor) -> Tensor:
        if u.shape[-3] != self.channels:
            raise T.ShapeError(f"head expects {self.channels} channels, got {u.shape[-3]}")
        return self.fc(T.global_avg_pool(u))


class SegmenterHead(Module):
    kind = "segmenter"

    def __init__(self, channels: int, num_classes: int, upsample: int, seed: int):
        self.channels = channels
        self.upsample = upsample
        self.conv = Conv2d(channels, num_classes, 1, np.random.default_rng([seed, 0x5E]), gain=1.0)

    def forward(self, u: Tensor) -> Tensor:
        if u.shape[-3] != self.channels:
            raise T.ShapeError(f"head expects {self.channels} channels, got {u.shape[-3]}")
        return T.upsample_nearest(self.conv(u), self.upsample)


def forward_head(head: Module, u: Tensor) -> Tensor:
    return head(u)


def make_head(kind: str, channels: int, num_classes: int, upsample: int, seed: int) -> Module:
    if kind == "classifier":
        return ClassifierHead(channels, num_classes, seed)
    if kind == "segmenter":
        return SegmenterHead(channels, num_classes, upsample, seed)
    raise ValueError(f"unknown head kind {kind!r}")


class FeedforwardModel(Module):
    """Baseline ``G(F(x))`` sharing the DFM's backbone topology."""

    recurrent = False

    def __init__(self, input_channels: int, num_classes: int, latent_channels: int = 16,
                 stage_widths=(8, 16), input_resolution=(32, 32), kind: str = "classifier",
                 seed: int = 0):
        self.config = dict(model="ff", input_channels=input_channels, num_classes=num_classes,
                           latent_channels=latent_channels, stage_widths=list(stage_widths),
                           input_resolution=list(input_resolution), kind=kind, seed=seed)
        spec = BackboneSpec(kind, input_channels, tuple(input_resolution), list(stage_widths),
                            latent_channels)
        self.backbone = Backbone(spec, seed)
        self.head = make_head(kind, latent_channels, num_classes, spec.total_stride, seed)

    def forward(self, x: Tensor, **_) -> Tensor:
        return self.head(self.backbone(x))


@dataclass
class CostReport:
    parameter_count: int
    flops_per_forward: int
    mean_batch_seconds: float


def count_cost(model: Module, input_shape, T_steps: int | None = None,
               batches: int = 10, warmup: int = 2, time_it: bool = True) -> CostReport:
    """Parameters, FLOPs (2 x multiply-adds) and mean batch wall-clock time.

    Recurrent models are charged ``T`` times the FLOPs of a single unrolled
    step (feedback input, backbone, decay and head).
    """
    x = Tensor(np.zeros(tuple(input_shape)))
    recurrent = getattr(model, "recurrent", False)
    steps = (T_steps if T_steps is not None else getattr(model, "T", 1)) if recurrent else 1
    with T.no_grad(), T.flop_counter() as fc:
        if recurrent:
            model(x, T=1)
        else:
            model(x)
    flops = fc.flops * steps
    seconds = 0.0
    if time_it:
        kw = {"T": steps} if recurrent else {}
        with T.no_grad():
            for _ in range(warmup):
                model(x, **kw)
            t0 = time.perf_counter()
            for _ in range(batches):
                model(x, **kw)
            seconds = (time.perf_counter() - t0) / batches
    return CostReport(model.num_parameters(), int(flops), seconds)


def save_checkpoint(model: Module, path) -> None:
    """Write parameters as ``DFM1`` + (name, rank, dims, little-endian f64 data) records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, p in model.named_parameters():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:4]!r}")
    pos, state = 4, {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(data):
                raise ValueError(f"{path}: truncated data for parameter {name!r}")
            state[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return state
