"""Datasets, sample streams, and pixel-space augmentation.

Images are float64 NCHW in [0, 1]. IDX files load from plain or gzipped
streams and 28x28 digits are zero-padded to 32x32 so the fixed architectures
accept them. Sample sources are ordered consume-once streams: taking k
samples in one call or k calls of one yields the same pixels in the same
order, and whatever a consumer hands back via push_back comes out first.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Byte stream is not a readable IDX image/label file."""


@dataclass
class LabeledDataset:
    """Immutable-by-convention images+labels pair with basic integrity checks."""

    name: str
    images: np.ndarray  # (N, 1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int = 0  # 0 means infer from the labels present

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"{self.name}: images must be (N, 1, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"{self.name}: {self.images.shape[0]} images but {self.labels.shape} labels")
        if self.images.shape[0] and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError(f"{self.name}: pixel values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError(f"{self.name}: negative label")
        if self.num_classes == 0:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        elif self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError(f"{self.name}: label {self.labels.max()} outside "
                             f"[0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, index, name: str | None = None) -> "LabeledDataset":
        return replace(self, name=name or self.name, images=self.images[index],
                       labels=self.labels[index])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise IdxFormatError(f"truncated IDX stream: wanted {n} bytes of {what}, got {len(data)}")
    return data


def load_idx_images(images_path, *, pad_to: int = 32) -> np.ndarray:
    """Read one big-endian IDX image file as (N, 1, H, W) float64 in [0, 1].

    Pixel bytes are scaled by 1/255; images smaller than ``pad_to`` are
    zero-padded symmetrically (the extra pixel goes right/bottom when the
    difference is odd).
    """
    with _open_maybe_gzip(images_path) as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
        raw = _read_exact(fh, n * rows * cols, "image pixels")
        extra = fh.read(1)
        if extra:
            raise IdxFormatError("trailing bytes after the declared image payload")
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(n, 1, rows, cols)
    images /= 255.0
    if pad_to:
        if rows > pad_to or cols > pad_to:
            raise IdxFormatError(f"images are {rows}x{cols}, larger than pad_to={pad_to}")
        if rows < pad_to or cols < pad_to:
            top = (pad_to - rows) // 2
            left = (pad_to - cols) // 2
            images = np.pad(images, ((0, 0), (0, 0), (top, pad_to - rows - top),
                                     (left, pad_to - cols - left)))
    return images


def load_idx(images_path, labels_path, *, name: str = "idx", pad_to: int = 32,
             num_classes: int = 0) -> LabeledDataset:
    """Read big-endian IDX image and label files into a dataset."""
    images = load_idx_images(images_path, pad_to=pad_to)
    with _open_maybe_gzip(labels_path) as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, n_labels, "labels"), dtype=np.uint8)
    if n_labels != images.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {n_labels} labels")
    return LabeledDataset(name, images, labels.astype(np.int64), num_classes=num_classes)


class SampleSource:
    """Ordered consume-once stream of (1, H, W) images with stable indices.

    Subclasses implement ``_fresh(n)`` which must advance internal state by
    exactly n samples regardless of call granularity. ``push_back`` returns
    already-drawn samples to the front of the stream so a consumer that
    stopped mid-chunk leaves the source exactly as a one-at-a-time consumer
    would have.
    """

    def __init__(self, name: str, total: int, image_shape: tuple[int, int]):
        if total < 0:
            raise ValueError(f"{name}: total must be >= 0")
        self.name = name
        self.total = int(total)
        self.image_shape = (1,) + tuple(int(d) for d in image_shape)
        self._cursor = 0
        self._buffer: list[tuple[int, np.ndarray]] = []

    @property
    def remaining(self) -> int:
        return (self.total - self._cursor) + len(self._buffer)

    def _fresh(self, n: int) -> np.ndarray:
        raise NotImplementedError

    def next_sample(self):
        """(index, image) of the next sample, or None when exhausted."""
        if self._buffer:
            return self._buffer.pop(0)
        if self._cursor >= self.total:
            return None
        i = self._cursor
        img = self._fresh(1)[0]
        self._cursor += 1
        return i, img

    def take(self, k: int):
        """Up to k samples in stream order; returns (images (m,1,H,W), indices (m,))."""
        if k < 0:
            raise ValueError("take: k must be >= 0")
        images, indices = [], []
        while self._buffer and len(indices) < k:
            i, img = self._buffer.pop(0)
            images.append(img[None])
            indices.append(i)
        n = min(k - len(indices), self.total - self._cursor)
        if n > 0:
            block = self._fresh(n)
            indices.extend(range(self._cursor, self._cursor + n))
            self._cursor += n
            images.append(block)
        if not indices:
            return np.empty((0,) + self.image_shape), np.empty(0, dtype=np.int64)
        return np.concatenate(images, axis=0), np.asarray(indices, dtype=np.int64)

    def push_back(self, images: np.ndarray, indices: np.ndarray) -> None:
        """Return unconsumed samples; they will be yielded again, first, in order."""
        front = [(int(i), np.asarray(img)) for i, img in zip(indices, images)]
        self._buffer = front + self._buffer


class ArraySource(SampleSource):
    """Stream over a fixed image array, e.g. an unlabeled view of a dataset."""

    def __init__(self, name: str, images: np.ndarray):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"{name}: images must be (N, 1, H, W), got {images.shape}")
        super().__init__(name, images.shape[0], images.shape[2:])
        self._images = images

    def _fresh(self, n):
        return self._images[self._cursor:self._cursor + n]


class UniformNoiseSource(SampleSource):
    """Pixels i.i.d. uniform on [0, 1)."""

    def __init__(self, total: int, image_shape=(32, 32), seed: int = 0, name: str = "uniform-noise"):
        super().__init__(name, total, image_shape)
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def _fresh(self, n):
        return self._rng.random((n,) + self.image_shape)


class GaussianNoiseSource(SampleSource):
    """Pixels i.i.d. normal(mu, sigma), clipped into [0, 1]."""

    def __init__(self, total: int, image_shape=(32, 32), seed: int = 0,
                 mu: float = 0.5, sigma: float = 0.1, name: str = "gaussian-noise"):
        if sigma < 0:
            raise ValueError(f"{name}: sigma must be >= 0")
        super().__init__(name, total, image_shape)
        self.seed = seed
        self.mu = float(mu)
        self.sigma = float(sigma)
        self._rng = np.random.default_rng(seed)

    def _fresh(self, n):
        block = self.mu + self.sigma * self._rng.standard_normal((n,) + self.image_shape)
        return np.clip(block, 0.0, 1.0)


class ShapesSource(SampleSource):
    """Random antialiased filled shapes (circle, square, triangle) on black.

    Each sample consumes a fixed pattern of rng draws, so the stream does not
    depend on chunking. Edges are antialiased by mapping the signed distance
    at each pixel center through a one-pixel coverage ramp.
    """

    KINDS = ("circle", "square", "triangle")

    def __init__(self, total: int, image_shape=(32, 32), seed: int = 0, name: str = "shapes"):
        super().__init__(name, total, image_shape)
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        h, w = self.image_shape[1:]
        self._grid = np.meshgrid(np.arange(h, dtype=np.float64),
                                 np.arange(w, dtype=np.float64), indexing="ij")

    def _fresh(self, n):
        out = np.empty((n,) + self.image_shape)
        for i in range(n):
            out[i, 0] = self._render_one()
        return out

    def _render_one(self):
        rng = self._rng
        h, w = self.image_shape[1:]
        kind = int(rng.integers(len(self.KINDS)))
        side = min(h, w)
        r = rng.uniform(0.15, 0.35) * side
        cy = rng.uniform(r, h - 1 - r)
        cx = rng.uniform(r, w - 1 - r)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        intensity = rng.uniform(0.5, 1.0)
        yy, xx = self._grid
        dy, dx = yy - cy, xx - cx
        if kind == 0:  # circle
            d = np.hypot(dy, dx) - r
        elif kind == 1:  # square, rotated; Chebyshev box distance
            c, s = np.cos(theta), np.sin(theta)
            qy = c * dy - s * dx
            qx = s * dy + c * dx
            d = np.maximum(np.abs(qy), np.abs(qx)) - r / np.sqrt(2.0)
        else:  # equilateral triangle as intersection of three half planes
            d = np.full((h, w), -np.inf)
            verts = [(cy + r * np.sin(theta + k * 2.0 * np.pi / 3.0),
                      cx + r * np.cos(theta + k * 2.0 * np.pi / 3.0)) for k in range(3)]
            for k in range(3):
                ay, ax = verts[k]
                by, bx = verts[(k + 1) % 3]
                ey, ex = by - ay, bx - ax
                norm = np.hypot(ey, ex)
                # signed distance to the edge line, positive outside
                d = np.maximum(d, ((xx - ax) * ey - (yy - ay) * ex) / norm)
        coverage = np.clip(0.5 - d, 0.0, 1.0)
        return intensity * coverage


SOURCE_KINDS = ("uniform", "gaussian", "shapes")


def make_source(kind: str, total: int, seed: int = 0, image_shape=(32, 32),
                **kwargs) -> SampleSource:
    """Build one of the procedural sources by kind name."""
    if kind == "uniform":
        return UniformNoiseSource(total, image_shape, seed, **kwargs)
    if kind == "gaussian":
        return GaussianNoiseSource(total, image_shape, seed, **kwargs)
    if kind == "shapes":
        return ShapesSource(total, image_shape, seed, **kwargs)
    raise ValueError(f"unknown source kind {kind!r}, have {SOURCE_KINDS}")


_AUG_KINDS = ("scale", "rotate", "flip-h", "gaussian-noise", "salt-pepper")


@dataclass(frozen=True)
class AugmentOp:
    """One randomized pixel-space transform with an application probability."""

    kind: str
    prob: float = 1.0
    low: float = 0.0    # range low: scale factor or degrees
    high: float = 0.0   # range high
    sigma: float = 0.0  # gaussian-noise stddev
    density: float = 0.0  # salt-pepper corrupted-pixel fraction

    def __post_init__(self):
        if self.kind not in _AUG_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}, have {_AUG_KINDS}")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"{self.kind}: prob must lie in [0, 1], got {self.prob}")
        if self.kind == "scale" and not 0.0 < self.low <= self.high:
            raise ValueError(f"scale: need 0 < low <= high, got [{self.low}, {self.high}]")
        if self.kind == "rotate" and self.low > self.high:
            raise ValueError(f"rotate: need low <= high, got [{self.low}, {self.high}]")
        if self.kind == "gaussian-noise" and self.sigma < 0.0:
            raise ValueError(f"gaussian-noise: sigma must be >= 0, got {self.sigma}")
        if self.kind == "salt-pepper" and not 0.0 <= self.density <= 1.0:
            raise ValueError(f"salt-pepper: density must lie in [0, 1], got {self.density}")


def default_augment_ops() -> list[AugmentOp]:
    """The standard five-op pipeline, each op tossed independently at p=0.5."""
    return [
        AugmentOp("scale", prob=0.5, low=0.8, high=1.2),
        AugmentOp("rotate", prob=0.5, low=-15.0, high=15.0),
        AugmentOp("flip-h", prob=0.5),
        AugmentOp("gaussian-noise", prob=0.5, sigma=0.05),
        AugmentOp("salt-pepper", prob=0.5, density=0.05),
    ]


def _warp_bilinear(plane: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Resample one (H, W) plane through an inverse-map 2x2 matrix about the center.

    Out-of-range source coordinates contribute zero. With the identity matrix
    the gather indices are exact integers and every off-pixel weight is 0.0,
    so the output is bit-identical to the input.
    """
    h, w = plane.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    dy, dx = yy - cy, xx - cx
    qy = mat[0, 0] * dy + mat[0, 1] * dx + cy
    qx = mat[1, 0] * dy + mat[1, 1] * dx + cx
    y0 = np.floor(qy).astype(np.int64)
    x0 = np.floor(qx).astype(np.int64)
    fy, fx = qy - y0, qx - x0
    out = np.zeros_like(plane)
    for oy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for ox, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            inside = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
            vals = plane[np.clip(oy, 0, h - 1), np.clip(ox, 0, w - 1)]
            out += np.where(inside, wy * wx, 0.0) * vals
    return out


def _apply_op(image: np.ndarray, op: AugmentOp, rng: np.random.Generator) -> np.ndarray:
    if op.kind == "scale":
        factor = rng.uniform(op.low, op.high)
        mat = np.array([[1.0 / factor, 0.0], [0.0, 1.0 / factor]])
        return np.clip(np.stack([_warp_bilinear(p, mat) for p in image]), 0.0, 1.0)
    if op.kind == "rotate":
        angle = np.deg2rad(rng.uniform(op.low, op.high))
        c, s = np.cos(angle), np.sin(angle)
        mat = np.array([[c, -s], [s, c]])  # inverse map: grid rotates against the content
        return np.clip(np.stack([_warp_bilinear(p, mat) for p in image]), 0.0, 1.0)
    if op.kind == "flip-h":
        return np.ascontiguousarray(image[:, :, ::-1])
    if op.kind == "gaussian-noise":
        return np.clip(image + op.sigma * rng.standard_normal(image.shape), 0.0, 1.0)
    if op.kind == "salt-pepper":
        where = rng.random(image.shape)
        polarity = rng.random(image.shape)
        out = image.copy()
        hit = where < op.density
        out[hit] = (polarity[hit] < 0.5).astype(np.float64)
        return out
    raise ValueError(f"unknown augmentation kind {op.kind!r}")


def augment(image: np.ndarray, ops, rng) -> np.ndarray:
    """Apply each op in order, independently, with its own probability coin.

    One coin is drawn per op regardless of probability, and each applied op
    draws a fixed pattern of extra values, so the rng stream alignment does
    not depend on earlier outcomes within the pipeline beyond the applied
    transforms themselves.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"augment expects one (C, H, W) image, got shape {img.shape}")
    for op in ops:
        if rng.random() < op.prob:
            img = _apply_op(img, op, rng)
    return img


def augment_batch(images: np.ndarray, ops, rng) -> np.ndarray:
    """Augment each image in order from one rng stream."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return np.stack([augment(img, ops, rng) for img in images])


def make_binary_imbalanced(dataset: LabeledDataset, minority_labels,
                           name: str | None = None) -> LabeledDataset:
    """Relabel to a two-class task: 1 for the minority group, 0 for the rest.

    The class imbalance is whatever the chosen label split induces; with 3 of
    10 roughly equal classes in the minority the ratio lands near 3:7.
    """
    minority = np.asarray(sorted(set(int(l) for l in minority_labels)), dtype=np.int64)
    if minority.size == 0 or minority.size >= dataset.num_classes:
        raise ValueError("minority group must be a proper nonempty subset of the labels")
    if minority.min() < 0 or minority.max() >= dataset.num_classes:
        raise ValueError(f"minority labels outside [0, {dataset.num_classes})")
    labels = np.isin(dataset.labels, minority).astype(np.int64)
    return LabeledDataset(name or f"{dataset.name}-binary", dataset.images, labels,
                          num_classes=2)


def balance_binary_test(dataset: LabeledDataset, seed: int = 0) -> LabeledDataset:
    """Equal-count subsample of a two-class dataset, for unbiased accuracy."""
    if dataset.num_classes != 2:
        raise ValueError(f"{dataset.name}: expected a two-class dataset")
    idx0 = np.flatnonzero(dataset.labels == 0)
    idx1 = np.flatnonzero(dataset.labels == 1)
    n = min(idx0.size, idx1.size)
    if n == 0:
        raise ValueError(f"{dataset.name}: one class is empty")
    rng = np.random.default_rng(seed)
    keep = np.sort(np.concatenate([rng.choice(idx0, n, replace=False),
                                   rng.choice(idx1, n, replace=False)]))
    return dataset.subset(keep, name=f"{dataset.name}-balanced")
