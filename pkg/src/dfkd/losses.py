"""Temperature softmax and the two training losses.

Both losses return (scalar loss, gradient w.r.t. the logits) so the caller
feeds the gradient straight into ``Network.backward``. Gradients are averaged
over the batch inside the loss; layers then sum over the batch, which keeps
parameter gradients batch-mean overall.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12  # clamp inside log; gradients keep the exact softmax algebra


def softmax_temp(logits: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise softmax of logits/tau, max-subtracted for stability."""
    if not tau > 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError(f"logits must be (B, C) with C >= 2, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise FloatingPointError("non-finite logits passed to softmax")
    e = np.exp((z - z.max(axis=1, keepdims=True)) / tau)
    return e / e.sum(axis=1, keepdims=True)


def kd_loss(student_logits: np.ndarray, teacher_soft: np.ndarray, tau: float,
            scale_by_tau_sq: bool = False):
    """Soft-label cross entropy at temperature tau.

    ``teacher_soft`` must already be a probability table (rows on the
    simplex). With ``scale_by_tau_sq`` both loss and gradient are multiplied
    by tau**2, the usual rescale when mixing with a hard-label term; off by
    default because the data-free runs use the soft term alone.
    """
    t = np.asarray(teacher_soft, dtype=np.float64)
    z = np.asarray(student_logits, dtype=np.float64)
    if t.shape != z.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {z.shape}")
    if (t < 0.0).any() or not np.allclose(t.sum(axis=1), 1.0, atol=1e-8):
        raise ValueError("teacher targets must be rows on the probability simplex")
    p = softmax_temp(z, tau)
    b = z.shape[0]
    loss = float(np.mean(-(t * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1)))
    grad = (p - t) / (tau * b)
    if scale_by_tau_sq:
        loss *= tau * tau
        grad = grad * (tau * tau)
    return loss, grad


def ce_loss(logits: np.ndarray, labels: np.ndarray):
    """Hard-label cross entropy at temperature 1."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise ValueError(f"labels shape {y.shape} does not match logits {z.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {y.dtype}")
    c = z.shape[1]
    if (y < 0).any() or (y >= c).any():
        raise ValueError(f"labels must lie in [0, {c})")
    p = softmax_temp(z, 1.0)
    b = z.shape[0]
    picked = p[np.arange(b), y]
    loss = float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))
    grad = p.copy()
    grad[np.arange(b), y] -= 1.0
    grad /= b
    return loss, grad
