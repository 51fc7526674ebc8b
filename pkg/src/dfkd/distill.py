"""Training loops: supervised teacher training, data-free distillation, and
the data-available distillation baseline.

Distillation minimizes the soft-label cross entropy between teacher and
student, both softened at the same temperature. The data-free path never
touches hard labels; the data-available path adds lambda times the hard-label
cross entropy in logit space (one backward pass over the summed gradient).

Teacher soft labels always come from ``Network.logits_batched`` with the
fixed composition batch size, in transfer-set index order. That canonical
batching makes precompute and per-epoch modes bit-identical when no
augmentation is active, and makes whole runs replayable bit-for-bit.

When a test set is supplied (all public ops require one), the weights of the
best evaluation epoch are restored into the model before returning; the full
per-epoch curve is kept in the report so the final-epoch convention can be
read off as well.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .compose import PREDICT_BATCH, TransferSet, predict_labels
from .data import AugmentOp, LabeledDataset, augment_batch
from .losses import ce_loss, kd_loss, softmax_temp
from .network import Network, NonFiniteError
from .optim import SgdConfig, SgdOptimizer

SOFT_LABEL_MODES = ("precompute", "per-epoch")


@dataclass
class DistillConfig:
    tau: float = 20.0
    lam: float = 0.0  # weight of the hard-label term; ignored by the data-free path
    sgd: SgdConfig = field(default_factory=SgdConfig)
    augment_ops: list[AugmentOp] | None = None
    shuffle_seed: int = 0
    augment_seed: int = 1  # separate stream so toggling augmentation keeps batch order
    soft_label_mode: str = "precompute"
    scale_by_tau_sq: bool = False

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.soft_label_mode not in SOFT_LABEL_MODES:
            raise ValueError(f"soft_label_mode must be one of {SOFT_LABEL_MODES}, "
                             f"got {self.soft_label_mode!r}")

    def snapshot(self) -> dict[str, str]:
        out = {
            "tau": repr(self.tau), "lambda": repr(self.lam),
            "soft_label_mode": self.soft_label_mode,
            "scale_by_tau_sq": str(self.scale_by_tau_sq),
            "augment": "none" if self.augment_ops is None else
                       ";".join(op.kind for op in self.augment_ops),
        }
        out.update(_sgd_snapshot(self.sgd))
        return out


def _sgd_snapshot(cfg: SgdConfig) -> dict[str, str]:
    return {
        "learning_rate": repr(cfg.learning_rate), "momentum": repr(cfg.momentum),
        "weight_decay": repr(cfg.weight_decay), "batch_size": str(cfg.batch_size),
        "epochs": str(cfg.epochs), "lr_decay_factor": repr(cfg.lr_decay_factor),
        "lr_decay_every": str(cfg.lr_decay_every),
    }


@dataclass
class TrainReport:
    """Per-epoch curve plus the headline numbers of one training run."""

    rows: list[tuple[int, float, float]]  # (epoch, mean loss, test accuracy)
    final_accuracy: float  # accuracy of the model as returned (best epoch retained)
    best_accuracy: float
    best_epoch: int
    wall_seconds: float
    config: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        for epoch, loss, acc in self.rows:
            if not np.isfinite(loss):
                raise ValueError(f"epoch {epoch}: non-finite loss in report")
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"epoch {epoch}: accuracy {acc} outside [0, 1]")

    @property
    def losses(self) -> list[float]:
        return [loss for _, loss, _ in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,loss,test_accuracy\n")
            for epoch, loss, acc in self.rows:
                fh.write(f"{epoch},{loss:.10g},{acc:.6f}\n")

    @staticmethod
    def read_csv(path) -> list[tuple[int, float, float]]:
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "epoch,loss,test_accuracy":
                raise ValueError(f"{path}: unexpected report header {header!r}")
            for line in fh:
                epoch, loss, acc = line.strip().split(",")
                rows.append((int(epoch), float(loss), float(acc)))
        return rows


def evaluate(model, test: LabeledDataset, batch_size: int = 512) -> float:
    """Fraction of test samples whose argmax logit matches the label."""
    if len(test) < 1:
        raise ValueError("evaluate needs at least one sample")
    pred = predict_labels(model, test.images, batch_size)
    return float(np.mean(pred == test.labels))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _balanced_batches(labels: np.ndarray, num_classes: int, batch_size: int,
                      n_batches: int, rng: np.random.Generator):
    per = batch_size // num_classes
    if per < 1:
        raise ValueError(f"batch size {batch_size} cannot cover {num_classes} classes")
    pools = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for c, pool in enumerate(pools):
        if pool.size == 0:
            raise ValueError(f"balanced batches need every class present; class {c} is empty")
    batches = []
    for _ in range(n_batches):
        parts = [rng.choice(pool, per, replace=pool.size < per) for pool in pools]
        batches.append(np.concatenate(parts))
    return batches


def _soft_labels(teacher: Network, images: np.ndarray, tau: float) -> np.ndarray:
    return softmax_temp(teacher.logits_batched(images, PREDICT_BATCH), tau)


class _BestTracker:
    def __init__(self, model):
        self.model = model
        self.best_acc = -1.0
        self.best_epoch = 0
        self._state = None

    def observe(self, epoch: int, acc: float):
        if acc > self.best_acc:
            self.best_acc = acc
            self.best_epoch = epoch
            self._state = self.model.state_dict()

    def restore(self):
        if self._state is not None:
            self.model.load_state(self._state)


def train_teacher(model: Network, train: LabeledDataset, test: LabeledDataset,
                  cfg: SgdConfig, balanced_batches: bool = False,
                  shuffle_seed: int = 0, log=None) -> TrainReport:
    """Supervised minibatch training on hard labels.

    With ``balanced_batches`` every batch holds floor(batch/C) samples per
    class, resampled per batch, so an imbalanced training set presents itself
    to the optimizer as balanced.
    """
    if len(train) < 1:
        raise ValueError("empty training set")
    if int(train.labels.max()) >= model.num_classes:
        raise ValueError(f"label {train.labels.max()} outside the model's "
                         f"{model.num_classes} classes")
    rng = np.random.default_rng(shuffle_seed)
    opt = SgdOptimizer(model, cfg)
    tracker = _BestTracker(model)
    n = len(train)
    n_batches = -(-n // cfg.batch_size)
    rows = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        if balanced_batches:
            batches = _balanced_batches(train.labels, model.num_classes,
                                        cfg.batch_size, n_batches, rng)
        else:
            batches = _epoch_batches(n, cfg.batch_size, rng)
        loss_sum, seen = 0.0, 0
        for idx in batches:
            logits = model.forward(train.images[idx])
            loss, dlogits = ce_loss(logits, train.labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"training diverged at epoch {epoch + 1}")
            model.backward(dlogits)
            opt.step(lr)
            loss_sum += loss * idx.size
            seen += idx.size
        acc = evaluate(model, test)
        rows.append((epoch + 1, loss_sum / seen, acc))
        tracker.observe(epoch + 1, acc)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}: loss {loss_sum / seen:.4f}, "
                f"test accuracy {acc:.4f}")
    tracker.restore()
    config = _sgd_snapshot(cfg)
    config["balanced_batches"] = str(balanced_batches)
    return TrainReport(rows, final_accuracy=tracker.best_acc,
                       best_accuracy=tracker.best_acc, best_epoch=tracker.best_epoch,
                       wall_seconds=time.perf_counter() - t0, config=config,
                       seeds={"shuffle": shuffle_seed,
                              "init": -1 if model.init_seed is None else model.init_seed})


def _check_pair(teacher: Network, student: Network):
    if teacher.num_classes != student.num_classes:
        raise ValueError(f"teacher separates {teacher.num_classes} classes, "
                         f"student {student.num_classes}")
    if teacher.input_shape != student.input_shape:
        raise ValueError(f"input shapes differ: teacher {teacher.input_shape}, "
                         f"student {student.input_shape}")


def _distill_loop(teacher: Network, student: Network, images: np.ndarray,
                  hard_labels: np.ndarray | None, test: LabeledDataset,
                  cfg: DistillConfig, seeds: dict[str, int], log=None) -> TrainReport:
    """Shared engine: hard_labels None or lambda 0 gives the pure soft-label path."""
    n = images.shape[0]
    if n < 1:
        raise ValueError("no samples to distill on")
    use_hard = hard_labels is not None and cfg.lam > 0.0
    precompute = cfg.augment_ops is None and cfg.soft_label_mode == "precompute"
    targets_fixed = _soft_labels(teacher, images, cfg.tau) if precompute else None
    aug_rng = np.random.default_rng(cfg.augment_seed)
    shuffle_rng = np.random.default_rng(cfg.shuffle_seed)
    opt = SgdOptimizer(student, cfg.sgd)
    tracker = _BestTracker(student)
    rows = []
    t0 = time.perf_counter()
    for epoch in range(cfg.sgd.epochs):
        lr = cfg.sgd.lr_at(epoch)
        if cfg.augment_ops is not None:
            epoch_images = augment_batch(images, cfg.augment_ops, aug_rng)
        else:
            epoch_images = images
        targets = targets_fixed if precompute else _soft_labels(teacher, epoch_images, cfg.tau)
        loss_sum, seen = 0.0, 0
        for idx in _epoch_batches(n, cfg.sgd.batch_size, shuffle_rng):
            logits = student.forward(epoch_images[idx])
            loss, dlogits = kd_loss(logits, targets[idx], cfg.tau,
                                    scale_by_tau_sq=cfg.scale_by_tau_sq)
            if use_hard:
                hard_loss, hard_grad = ce_loss(logits, hard_labels[idx])
                loss = loss + cfg.lam * hard_loss
                dlogits = dlogits + cfg.lam * hard_grad
            if not np.isfinite(loss):
                raise NonFiniteError(f"distillation diverged at epoch {epoch + 1}")
            student.backward(dlogits)
            opt.step(lr)
            loss_sum += loss * idx.size
            seen += idx.size
        acc = evaluate(student, test)
        rows.append((epoch + 1, loss_sum / seen, acc))
        tracker.observe(epoch + 1, acc)
        if log:
            log(f"epoch {epoch + 1}/{cfg.sgd.epochs}: loss {loss_sum / seen:.4f}, "
                f"test accuracy {acc:.4f}")
    tracker.restore()
    return TrainReport(rows, final_accuracy=tracker.best_acc,
                       best_accuracy=tracker.best_acc, best_epoch=tracker.best_epoch,
                       wall_seconds=time.perf_counter() - t0, config=cfg.snapshot(),
                       seeds=seeds)


def distill_datafree(teacher: Network, student: Network, transfer: TransferSet,
                     test: LabeledDataset, cfg: DistillConfig, log=None) -> TrainReport:
    """Student matches the frozen teacher's softened outputs on the transfer set.

    No hard labels are used anywhere. With augmentation on, every sample is
    independently re-augmented each epoch and the teacher's soft label is
    recomputed on the augmented pixels, so the supervision follows the input.
    """
    _check_pair(teacher, student)
    if transfer.num_classes != teacher.num_classes:
        raise ValueError(f"transfer set tallies {transfer.num_classes} classes, "
                         f"teacher separates {teacher.num_classes}")
    seeds = {"shuffle": cfg.shuffle_seed, "augment": cfg.augment_seed,
             "init": -1 if student.init_seed is None else student.init_seed}
    return _distill_loop(teacher, student, transfer.images, None, test, cfg, seeds, log)


def distill_with_data(teacher: Network, student: Network, train: LabeledDataset,
                      test: LabeledDataset, cfg: DistillConfig, log=None) -> TrainReport:
    """Distillation with the original data: soft-label loss plus lambda times the
    hard-label cross entropy. With lambda 0 this is exactly the data-free loop."""
    _check_pair(teacher, student)
    if int(train.labels.max()) >= teacher.num_classes:
        raise ValueError(f"label {train.labels.max()} outside the teacher's "
                         f"{teacher.num_classes} classes")
    seeds = {"shuffle": cfg.shuffle_seed, "augment": cfg.augment_seed,
             "init": -1 if student.init_seed is None else student.init_seed}
    return _distill_loop(teacher, student, train.images, train.labels, test, cfg,
                         seeds, log)
