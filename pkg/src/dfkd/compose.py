"""Transfer-set composition from a frozen teacher's own predictions.

The balanced composer walks ordered sample sources one sample at a time (in
effect; prediction is batched, bookkeeping is per sample): each drawn sample
is labeled by the teacher's argmax and kept only while its predicted class
still has quota floor(N/C) left. Drawn-and-discarded samples stay consumed.
A source is left only when it runs dry or every quota is met, and nothing
tops up the eventual N - C*floor(N/C) remainder. If all sources run dry
first, the partial set is returned with per-class deficits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .binio import ByteReader, pack_f64_tensor, pack_i64_array, pack_str32
from .data import LabeledDataset, SampleSource
from .manifest import Fnv64

TS_MAGIC = b"DFKDTSB\0"
TS_VERSION = 1
PREDICT_BATCH = 256  # fixed teacher inference batch; part of reproducibility


class TransferSetFormatError(ValueError):
    """File is not a readable transfer-set container."""


def predict_labels(model, images: np.ndarray, batch_size: int = PREDICT_BATCH) -> np.ndarray:
    """Teacher argmax labels over fixed index-order batches."""
    n = images.shape[0]
    labels = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch_size):
        logits = model.forward(images[start:start + batch_size])
        labels[start:start + batch_size] = np.argmax(logits, axis=1)
    return labels


@dataclass
class LabelHistogram:
    """Predicted-class tally for one sample collection."""

    source: str
    counts: np.ndarray  # (C,) int64

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or (self.counts < 0).any():
            raise ValueError("counts must be a 1-d nonnegative vector")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fractions(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / total

    @classmethod
    def from_labels(cls, labels, num_classes: int, source: str) -> "LabelHistogram":
        return cls(source, np.bincount(np.asarray(labels, dtype=np.int64),
                                       minlength=num_classes))

    def write_csv(self, path) -> None:
        fr = self.fractions
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("class,count,fraction\n")
            for c, n in enumerate(self.counts):
                fh.write(f"{c},{int(n)},{fr[c]:.6f}\n")


@dataclass
class TransferSet:
    """Teacher-labeled samples plus everything needed to audit how they got there."""

    images: np.ndarray          # (K, 1, H, W) float64
    labels: np.ndarray          # (K,) int64, teacher argmax
    num_classes: int
    target_size: int
    balanced: bool
    exhausted: bool = False     # sources ran dry before the target was reached
    provenance: list[str] = field(default_factory=list)  # "source:index" per sample
    note: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def __len__(self):
        return self.images.shape[0]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def quota(self) -> int:
        return self.target_size // self.num_classes

    def validate(self) -> None:
        k = self.images.shape[0]
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (K, 1, H, W), got {self.images.shape}")
        if self.labels.shape != (k,):
            raise ValueError(f"{k} images but labels shape {self.labels.shape}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if k and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        if len(self.provenance) != k:
            raise ValueError(f"{k} images but {len(self.provenance)} provenance entries")
        if k > self.target_size:
            raise ValueError(f"{k} samples exceed the target size {self.target_size}")
        if self.balanced:
            counts = self.class_counts
            if (counts > self.quota).any():
                raise ValueError(
                    f"class counts {counts.tolist()} exceed the quota {self.quota}")
            if not self.exhausted and not (counts == self.quota).all():
                raise ValueError(
                    f"composition ended with counts {counts.tolist()} but no exhaustion flag")

    def histogram(self, source: str = "") -> LabelHistogram:
        return LabelHistogram.from_labels(self.labels, self.num_classes, source or "transfer-set")

    def imbalance_report(self) -> str:
        """Per-class deficits against the quota, one line per class."""
        counts = self.class_counts
        lines = [f"kept {len(self)} of {self.target_size} requested "
                 f"(quota {self.quota} per class)"]
        for c in range(self.num_classes):
            deficit = self.quota - int(counts[c]) if self.balanced else 0
            lines.append(f"class {c}: {int(counts[c])} kept"
                         + (f", {deficit} short" if deficit > 0 else ""))
        return "\n".join(lines)

    def save(self, path) -> None:
        flags = (1 if self.balanced else 0) | (2 if self.exhausted else 0)
        chunks = [
            TS_MAGIC, struct.pack("<I", TS_VERSION),
            struct.pack("<I", self.num_classes),
            struct.pack("<Q", self.target_size),
            struct.pack("<B", flags),
            pack_f64_tensor(self.images),
            pack_i64_array(self.labels),
            struct.pack("<Q", len(self.provenance)),
        ]
        chunks.extend(pack_str32(p) for p in self.provenance)
        chunks.append(pack_str32(self.note))
        body = b"".join(chunks)
        with open(path, "wb") as fh:
            fh.write(body)
            fh.write(struct.pack("<Q", Fnv64().update(body).digest()))

    @classmethod
    def load(cls, path) -> "TransferSet":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < len(TS_MAGIC) + 4 or data[:len(TS_MAGIC)] != TS_MAGIC:
            raise TransferSetFormatError("not a transfer-set file (bad magic)")
        version = struct.unpack_from("<I", data, len(TS_MAGIC))[0]
        if version != TS_VERSION:
            raise TransferSetFormatError(
                f"transfer-set version {version}, this code reads {TS_VERSION}")
        if len(data) < len(TS_MAGIC) + 4 + 8:
            raise TransferSetFormatError("file too short to carry a checksum")
        stored = struct.unpack("<Q", data[-8:])[0]
        actual = Fnv64().update(data[:-8]).digest()
        if stored != actual:
            raise TransferSetFormatError(
                f"checksum mismatch: stored {stored:016x}, computed {actual:016x}")
        cur = ByteReader(data[:-8], TransferSetFormatError)
        cur.take(len(TS_MAGIC) + 4)
        num_classes = cur.u32()
        target_size = cur.u64()
        flags = cur.u8()
        rank = cur.u32()
        if rank != 4:
            raise TransferSetFormatError(f"image tensor rank {rank}, expected 4")
        images = cur.f64_array(cur.u64s(4))
        labels = cur.i64_array(cur.u64())
        provenance = [cur.str32() for _ in range(cur.u64())]
        note = cur.str32()
        if not cur.done():
            raise TransferSetFormatError("trailing bytes after the declared records")
        try:
            return cls(images, labels, num_classes, target_size,
                       balanced=bool(flags & 1), exhausted=bool(flags & 2),
                       provenance=provenance, note=note)
        except ValueError as exc:
            raise TransferSetFormatError(f"stored records are inconsistent: {exc}") from exc


def compose_balanced(teacher, sources, size: int, *, batch_size: int = PREDICT_BATCH,
                     note: str = "") -> TransferSet:
    """Class-balanced composition driven by the teacher's own argmax labels.

    ``sources`` are consumed strictly in order. The result holds exactly
    floor(size/C) samples per predicted class unless every source runs dry
    first, in which case the partial set comes back with ``exhausted`` set.
    """
    num_classes = int(teacher.num_classes)
    if num_classes < 2:
        raise ValueError(f"teacher must separate >= 2 classes, got {num_classes}")
    if not sources:
        raise ValueError("at least one sample source is required")
    if size < num_classes:
        raise ValueError(f"size {size} cannot cover {num_classes} classes")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    quota = size // num_classes
    counts = np.zeros(num_classes, dtype=np.int64)
    kept_images, kept_labels, provenance = [], [], []
    done = False
    for src in sources:
        while not done and src.remaining > 0:
            chunk, indices = src.take(batch_size)
            labels = np.argmax(teacher.forward(chunk), axis=1)
            # bookkeeping is per sample in draw order: a sample seen after the
            # last quota fills must stay in the source, everything before is
            # consumed whether kept or not
            for j in range(indices.shape[0]):
                c = int(labels[j])
                if counts[c] < quota:
                    counts[c] += 1
                    kept_images.append(chunk[j])
                    kept_labels.append(c)
                    provenance.append(f"{src.name}:{int(indices[j])}")
                    if counts.sum() == quota * num_classes:
                        done = True
                        if j + 1 < indices.shape[0]:
                            src.push_back(chunk[j + 1:], indices[j + 1:])
                        break
        if done:
            break
    if kept_images:
        images = np.stack(kept_images)
    else:
        images = np.empty((0,) + sources[0].image_shape)
    return TransferSet(images, np.asarray(kept_labels, dtype=np.int64), num_classes,
                       target_size=size, balanced=True, exhausted=not done,
                       provenance=provenance, note=note)


def compose_unbalanced(teacher, source: SampleSource, size: int, *,
                       batch_size: int = PREDICT_BATCH, note: str = "") -> TransferSet:
    """First ``size`` samples of one source, teacher-labeled, no quota."""
    num_classes = int(teacher.num_classes)
    if size < 1:
        raise ValueError(f"size must be >= 1, got {size}")
    kept_images, kept_labels, provenance = [], [], []
    taken = 0
    while taken < size and source.remaining > 0:
        chunk, indices = source.take(min(batch_size, size - taken))
        labels = np.argmax(teacher.forward(chunk), axis=1)
        kept_images.append(chunk)
        kept_labels.append(labels)
        provenance.extend(f"{source.name}:{int(i)}" for i in indices)
        taken += indices.shape[0]
    exhausted = taken < size
    images = np.concatenate(kept_images) if kept_images else np.empty((0,) + source.image_shape)
    labels = np.concatenate(kept_labels) if kept_labels else np.empty(0, dtype=np.int64)
    return TransferSet(images, labels, num_classes, target_size=size, balanced=False,
                       exhausted=exhausted, provenance=provenance, note=note)


def compose_from_dataset(teacher, dataset: LabeledDataset, size: int, classes=None,
                         seed: int = 0, note: str = "") -> TransferSet:
    """Even split of ``size`` over the chosen true classes, teacher-labeled.

    Selection uses the dataset's ground-truth labels; the stored labels are
    still the teacher's predictions, like every other transfer set. The
    remainder size % k is dropped.
    """
    num_classes = int(teacher.num_classes)
    chosen = sorted(set(int(c) for c in (classes if classes is not None
                                         else range(dataset.num_classes))))
    if not chosen:
        raise ValueError("need at least one class to draw from")
    if any(c < 0 or c >= dataset.num_classes for c in chosen):
        raise ValueError(f"classes outside [0, {dataset.num_classes})")
    per_class = size // len(chosen)
    if per_class < 1:
        raise ValueError(f"size {size} cannot cover {len(chosen)} classes")
    rng = np.random.default_rng(seed)
    picked = []
    for c in chosen:
        pool = np.flatnonzero(dataset.labels == c)
        if pool.size < per_class:
            raise ValueError(f"class {c} has {pool.size} samples, need {per_class}")
        picked.append(np.sort(rng.choice(pool, per_class, replace=False)))
    index = np.concatenate(picked)
    images = dataset.images[index]
    labels = predict_labels(teacher, images)
    provenance = [f"{dataset.name}:{int(i)}" for i in index]
    return TransferSet(images, labels, num_classes, target_size=size, balanced=False,
                       exhausted=False, provenance=provenance, note=note)


def label_distribution(teacher, images: np.ndarray, source: str = "samples",
                       batch_size: int = PREDICT_BATCH) -> LabelHistogram:
    """Histogram of the teacher's argmax labels over an image array."""
    labels = predict_labels(teacher, np.asarray(images, dtype=np.float64), batch_size)
    return LabelHistogram.from_labels(labels, int(teacher.num_classes), source)
