"""Post-hoc analysis: deepest-embedding features, Hausdorff distances between
feature sets, and the cross-run comparison reports.

The Hausdorff computation is exact (all pairwise Euclidean distances) up to
an optional per-set subsample cap for very large sets; capped results carry
an ``approximate`` flag that every report surfaces. Reductions run in a fixed
order so equal inputs give bit-equal outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .compose import LabelHistogram
from .distill import TrainReport

DEFAULT_CAP = 2000
_PAIR_BUDGET = 4_000_000  # doubles held by one distance block


@dataclass
class FeatureSet:
    """Rows of penultimate-layer activations for one image collection."""

    vectors: np.ndarray  # (K, F)
    origin: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"features must be (K, F), got {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ValueError(f"non-finite feature values from {self.origin or 'unknown'}")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def extract_features(model, images: np.ndarray, origin: str = "",
                     batch_size: int = 256) -> FeatureSet:
    """Activations entering the model's final classifier layer."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] < 1:
        raise ValueError("need at least one image")
    blocks = [model.features(images[i:i + batch_size])
              for i in range(0, images.shape[0], batch_size)]
    return FeatureSet(np.concatenate(blocks, axis=0), origin)


@dataclass
class HausdorffResult:
    distance: float
    forward: float   # sup over A of nearest-neighbor distance into B
    backward: float  # sup over B of nearest-neighbor distance into A
    approximate: bool
    cap: int
    seed: int
    size_a: int
    size_b: int

    def __str__(self):
        tag = " (approximate, subsampled)" if self.approximate else " (exact)"
        return f"hausdorff {self.distance:.10g}{tag}"


def _as_points(x) -> tuple[np.ndarray, str]:
    if isinstance(x, FeatureSet):
        return x.vectors, x.origin
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"point set must be (K, F), got {pts.shape}")
    return pts, ""


def _subsample(points: np.ndarray, cap: int, seed: int) -> tuple[np.ndarray, bool]:
    n = points.shape[0]
    if cap <= 0 or n <= cap:
        return points, False
    # rng keyed by (seed, n) and not by argument position, so swapping the two
    # sets cannot change which points survive: symmetry holds even when capped
    rng = np.random.default_rng([seed, n])
    keep = np.sort(rng.choice(n, cap, replace=False))
    return points[keep], True


def _directed_sq(a: np.ndarray, b: np.ndarray) -> float:
    """max over rows of a of the min squared distance into b, exact pair order."""
    worst = -np.inf
    rows = max(1, _PAIR_BUDGET // (b.shape[0] * max(1, b.shape[1])))
    for start in range(0, a.shape[0], rows):
        block = a[start:start + rows]
        d2 = ((block[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst


def hausdorff(a, b, cap: int = DEFAULT_CAP, seed: int = 0) -> HausdorffResult:
    """Bidirectional Hausdorff distance under the Euclidean metric.

    Sets larger than ``cap`` points are subsampled with a seeded draw and the
    result is flagged approximate. ``cap=0`` disables subsampling.
    """
    pa, _ = _as_points(a)
    pb, _ = _as_points(b)
    if pa.shape[0] < 1 or pb.shape[0] < 1:
        raise ValueError("both point sets must be nonempty")
    if pa.shape[1] != pb.shape[1]:
        raise ValueError(f"feature widths differ: {pa.shape[1]} vs {pb.shape[1]}")
    size_a, size_b = pa.shape[0], pb.shape[0]
    pa, capped_a = _subsample(pa, cap, seed)
    pb, capped_b = _subsample(pb, cap, seed)
    fwd = np.sqrt(_directed_sq(pa, pb))
    bwd = np.sqrt(_directed_sq(pb, pa))
    return HausdorffResult(distance=float(max(fwd, bwd)), forward=float(fwd),
                           backward=float(bwd), approximate=capped_a or capped_b,
                           cap=cap, seed=seed, size_a=size_a, size_b=size_b)


@dataclass
class RunRecord:
    """One distillation run plus the transfer-set context it came from."""

    source: str
    balanced: bool
    augmented: bool
    report: TrainReport
    histogram: LabelHistogram | None = None
    distance: HausdorffResult | None = None
    manifest_hash: str = ""


def _csv(path, header: str, rows) -> str:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    return os.fspath(path)


def report_experiment(records: list[RunRecord], out_dir, make_figures: bool = True) -> list[str]:
    """Write the comparison CSVs (and figures) for a batch of runs.

    Accuracy rows keep the caller's source grouping with unbalanced rows
    before balanced ones inside each source. Distance rows are sorted by
    distance descending; the accuracy trend over distance is for reading,
    not asserting.
    """
    if not records:
        raise ValueError("need at least one run record")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    order = {}
    for rec in records:
        order.setdefault(rec.source, len(order))
    acc_rows = []
    for rec in sorted(records, key=lambda r: (order[r.source], r.balanced)):
        acc_rows.append((rec.source, "balanced" if rec.balanced else "unbalanced",
                         "augmented" if rec.augmented else "plain",
                         f"{rec.report.final_accuracy:.6f}",
                         f"{rec.report.best_accuracy:.6f}", rec.manifest_hash))
    written.append(_csv(os.path.join(out_dir, "accuracy.csv"),
                        "source,balance,augmentation,final_accuracy,best_accuracy,manifest",
                        acc_rows))

    freq_rows = []
    for rec in records:
        if rec.histogram is None:
            continue
        fr = rec.histogram.fractions
        for c, n in enumerate(rec.histogram.counts):
            freq_rows.append((rec.source, "balanced" if rec.balanced else "unbalanced",
                              c, int(n), f"{fr[c]:.6f}"))
    if freq_rows:
        written.append(_csv(os.path.join(out_dir, "class_frequencies.csv"),
                            "source,balance,class,count,fraction", freq_rows))

    dist_recs = [r for r in records if r.distance is not None]
    if dist_recs:
        dist_recs.sort(key=lambda r: -r.distance.distance)
        dist_rows = [(r.source, f"{r.distance.distance:.10g}",
                      "approximate" if r.distance.approximate else "exact",
                      f"{r.report.final_accuracy:.6f}") for r in dist_recs]
        written.append(_csv(os.path.join(out_dir, "distance_vs_accuracy.csv"),
                            "source,hausdorff_distance,mode,final_accuracy", dist_rows))

    if make_figures:
        from . import plots
        written.append(plots.accuracy_comparison(
            records, os.path.join(out_dir, "accuracy_comparison.png")))
        hist_recs = [r for r in records if r.histogram is not None]
        if hist_recs:
            written.append(plots.class_frequencies(
                hist_recs, os.path.join(out_dir, "class_frequencies.png")))
        if dist_recs:
            written.append(plots.distance_vs_accuracy(
                dist_recs, os.path.join(out_dir, "distance_vs_accuracy.png")))
    return written
