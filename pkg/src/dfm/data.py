"""Datasets, IDX I/O, synthetic generators, noise, corruptions and few-shot sampling."""
from __future__ import annotations

import gzip
import logging
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

CORRUPTIONS = (
    "gaussian_noise",
    "speckle_noise",
    "brightness_down",
    "contrast_down",
    "pixelate",
    "defocus_blur",
    "motion_blur",
    "jpeg_like_block",
)


def rng_for(seed: int, op: str, index: int = 0) -> np.random.Generator:
    """Independent generator keyed by (seed, operation name, index)."""
    return np.random.default_rng([int(seed), zlib.crc32(op.encode()), int(index)])


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # (n,) class ids or (n, H, W) masks
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def is_segmentation(self) -> bool:
        return self.labels.ndim == 3

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1), minlength=self.num_classes)


# --------------------------------------------------------------------------
# IDX container


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise ValueError(f"{path}: unsupported IDX type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < count:
        raise ValueError(f"{path}: truncated data ({len(body)} of {count} bytes)")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are written")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x0800 | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise ValueError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    num_classes = max(num_classes, int(labels.max()) + 1 if labels.size else 0)
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), num_classes, split)


def save_idx_dataset(ds: Dataset, images_path, labels_path) -> None:
    if ds.images.shape[1] != 1:
        raise ValueError("IDX image files hold single-channel images")
    write_idx(images_path, np.rint(ds.images[:, 0] * 255).astype(np.uint8))
    write_idx(labels_path, ds.labels.astype(np.uint8))


def resize_nearest(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    H, W = images.shape[-2:]
    rows = (np.arange(size[0]) * H) // size[0]
    cols = (np.arange(size[1]) * W) // size[1]
    return images[..., rows[:, None], cols[None, :]]


def load_idx_dir(root, resolution: int | None = 32) -> tuple[Dataset, Dataset]:
    """Load ``train-*`` / ``t10k-*`` IDX pairs from a directory, resized to ``resolution``."""
    root = Path(root)

    def find(prefix, kind):
        for name in (f"{prefix}-{kind}-idx{3 if kind == 'images' else 1}-ubyte",):
            for cand in (root / name, root / (name + ".gz")):
                if cand.exists():
                    return cand
        raise FileNotFoundError(f"no {prefix} {kind} IDX file in {root}")

    out = []
    for prefix, split in (("train", "train"), ("t10k", "test")):
        ds = load_idx(find(prefix, "images"), find(prefix, "labels"), split=split)
        if resolution is not None and ds.images.shape[-1] != resolution:
            ds = replace(ds, images=resize_nearest(ds.images, (resolution, resolution)))
        out.append(ds)
    n = max(d.num_classes for d in out)
    return replace(out[0], num_classes=n), replace(out[1], num_classes=n)


# --------------------------------------------------------------------------
# synthetic data

# seven-segment layout: a, b, c, d, e, f, g as (x0, y0, x1, y1) in a unit box
_SEGMENTS = {
    "a": (0.0, 0.0, 1.0, 0.0), "b": (1.0, 0.0, 1.0, 0.5), "c": (1.0, 0.5, 1.0, 1.0),
    "d": (0.0, 1.0, 1.0, 1.0), "e": (0.0, 0.5, 0.0, 1.0), "f": (0.0, 0.0, 0.0, 0.5),
    "g": (0.0, 0.5, 1.0, 0.5),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    tt = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + tt * dx), py - (y0 + tt * dy))


def make_synthetic_digits(n: int, seed: int, size: int = 28, clutter: float = 0.15) -> Dataset:
    """Jittered seven-segment glyphs for classes 0-9 on a cluttered background.

    Class labels are balanced (``i % 10``) and shuffled.
    """
    rng = rng_for(seed, "synthetic-digits")
    labels = rng.permutation(np.arange(n) % 10)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        w = size * rng.uniform(0.30, 0.42)
        h = size * rng.uniform(0.50, 0.66)
        cx = size / 2 + rng.uniform(-3, 3)
        cy = size / 2 + rng.uniform(-3, 3)
        shear = rng.uniform(-0.25, 0.25)
        thick = rng.uniform(1.6, 2.8)
        # map pixel coords to the glyph's unit box
        gy = (yy - (cy - h / 2)) / h
        gx = (xx - (cx - w / 2) - shear * (yy - cy)) / w
        dist = np.full((size, size), np.inf)
        for seg in _DIGITS[lab]:
            x0, y0, x1, y1 = _SEGMENTS[seg]
            d = _segment_distance(gx * w, gy * h, x0 * w, y0 * h, x1 * w, y1 * h)
            dist = np.minimum(dist, d)
        ink = np.clip(thick / 2 + 0.5 - dist, 0.0, 1.0) * rng.uniform(0.7, 1.0)
        bg = clutter * rng.random((size, size))
        for _ in range(rng.integers(0, 3)):
            # stray stroke fragments
            x0, y0 = rng.uniform(0, size, 2)
            ang = rng.uniform(0, np.pi)
            ln = rng.uniform(3, 7)
            d = _segment_distance(xx, yy, x0, y0, x0 + ln * np.cos(ang), y0 + ln * np.sin(ang))
            bg = np.maximum(bg, np.clip(1.0 - d, 0, 1) * rng.uniform(0.3, 0.7))
        images[i, 0] = np.maximum(ink, bg)
    images = np.rint(np.clip(images, 0, 1) * 255) / 255
    return Dataset(images, labels, 10)


def write_synthetic_idx_dir(root, n_train: int = 1000, n_test: int = 500, seed: int = 0) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for prefix, n, s in (("train", n_train, seed), ("t10k", n_test, seed + 1)):
        ds = make_synthetic_digits(n, s)
        save_idx_dataset(ds, root / f"{prefix}-images-idx3-ubyte", root / f"{prefix}-labels-idx1-ubyte")
    return root


def render_seg_scene(shapes, H: int, W: int, num_classes: int, background: np.ndarray | None = None):
    """Paint shapes in order (later ones on top).

    ``shapes`` holds ``("disc", cls, cy, cx, r)`` or ``("rect", cls, y0, x0, y1, x1)``.
    Returns ``(image (3, H, W), mask (H, W))``.
    """
    palette = _class_palette(num_classes)
    img = np.zeros((3, H, W)) if background is None else background.copy()
    mask = np.zeros((H, W), dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for shp in shapes:
        kind, cls = shp[0], int(shp[1])
        if not 0 < cls < num_classes:
            raise ValueError(f"shape class {cls} outside [1, {num_classes})")
        if kind == "disc":
            _, _, cy, cx, r = shp
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == "rect":
            _, _, y0, x0, y1, x1 = shp
            region = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        else:
            raise ValueError(f"unknown shape {kind!r}")
        mask[region] = cls
        img[:, region] = palette[cls][:, None]
    return img, mask


def _class_palette(num_classes: int) -> np.ndarray:
    rng = np.random.default_rng(12345)
    pal = rng.uniform(0.2, 1.0, (num_classes, 3))
    pal[0] = 0.0
    return pal


def make_synthetic_seg(n: int, H: int, W: int, L: int, seed: int, max_shapes: int = 4) -> Dataset:
    """Random rectangles and discs on a noise background; mask = topmost shape (0 = background)."""
    if L < 2:
        raise ValueError("need at least 2 classes")
    if min(H, W) < 8:
        raise ValueError(f"resolution {H}x{W} too small for shapes")
    rng = rng_for(seed, "synthetic-seg")
    images = np.empty((n, 3, H, W))
    masks = np.empty((n, H, W), dtype=np.int64)
    for i in range(n):
        shapes = []
        for _ in range(rng.integers(1, max_shapes + 1)):
            cls = int(rng.integers(1, L))
            if rng.random() < 0.5:
                r = rng.uniform(min(H, W) / 10, min(H, W) / 4)
                shapes.append(("disc", cls, rng.uniform(r, H - r), rng.uniform(r, W - r), r))
            else:
                h, w = rng.uniform(H / 6, H / 2), rng.uniform(W / 6, W / 2)
                y0, x0 = rng.uniform(0, H - h), rng.uniform(0, W - w)
                shapes.append(("rect", cls, y0, x0, y0 + h, x0 + w))
        bg = 0.25 * rng.random((3, H, W))
        images[i], masks[i] = render_seg_scene(shapes, H, W, L, bg)
    return Dataset(images, masks, L)


# --------------------------------------------------------------------------
# perturbations


def add_gaussian_noise(x: np.ndarray, sigma: float, seed: int = 0, index: int = 0) -> np.ndarray:
    """``x + eps`` with ``eps ~ N(0, sigma^2)``, unclamped."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + rng_for(seed, "gaussian-noise", index).standard_normal(x.shape) * sigma


def few_shot_sample(ds: Dataset, D: int, seed: int) -> Dataset:
    """Exactly ``D`` instances per class, uniformly without replacement."""
    if ds.is_segmentation:
        raise ValueError("few-shot sampling applies to classification datasets")
    rng = rng_for(seed, "few-shot", D)
    picks = []
    for cls in range(ds.num_classes):
        idx = np.nonzero(ds.labels == cls)[0]
        if len(idx) < D:
            raise ValueError(f"class {cls} has only {len(idx)} instances, need {D}")
        picks.append(np.sort(rng.choice(idx, size=D, replace=False)))
    return ds.subset(np.concatenate(picks))


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity < 0:
            raise ValueError("severity must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "Corruption":
        kind, _, sev = text.partition(":")
        return cls(kind, float(sev or 0.5))


def _block_mean(x: np.ndarray, f: int) -> np.ndarray:
    """Replace each f x f block (edge blocks may be smaller) by its mean."""
    H, W = x.shape[-2:]
    out = np.empty_like(x)
    for i in range(0, H, f):
        for j in range(0, W, f):
            blk = x[..., i:i + f, j:j + f]
            out[..., i:i + f, j:j + f] = blk.mean(axis=(-2, -1), keepdims=True)
    return out


def _filter2d(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel[(None,) * (x.ndim - 2)]
    return ndimage.convolve(x, k / kernel.sum(), mode="reflect")


def corrupt(x: np.ndarray, c: Corruption, seed: int = 0, index: int = 0) -> np.ndarray:
    """Apply a severity-parameterized corruption to images in [0, 1]; output clamped."""
    x = np.asarray(x, dtype=np.float64)
    s = float(c.severity)
    if s == 0:
        return np.clip(x, 0.0, 1.0)
    kind = c.kind
    if kind == "brightness_down":
        y = x - s
    elif kind == "contrast_down":
        m = x.mean(axis=(-3, -2, -1), keepdims=True)
        y = m + (x - m) * (1 - s)
    elif kind == "pixelate":
        y = _block_mean(x, int(round(1 + 3 * s)))
    elif kind == "defocus_blur":
        r = 3.0 * s
        ri = int(np.ceil(r))
        yy, xx = np.mgrid[-ri:ri + 1, -ri:ri + 1]
        y = _filter2d(x, ((yy ** 2 + xx ** 2) <= r * r + 1e-9).astype(float))
    elif kind == "motion_blur":
        length = 1 + 2 * int(round(4 * s))
        y = _filter2d(x, np.ones((1, length)))
    elif kind == "speckle_noise":
        y = x * (1 + rng_for(seed, "speckle", index).standard_normal(x.shape) * s)
    elif kind == "gaussian_noise":
        y = add_gaussian_noise(x, s, seed, index)
    elif kind == "jpeg_like_block":
        a = min(s, 1.0)
        y = (1 - a) * x + a * _block_mean(x, 8)
    else:  # pragma: no cover - guarded by Corruption
        raise ValueError(f"unknown corruption kind {kind!r}")
    return np.clip(y, 0.0, 1.0)
