"""Central-difference verification of the analytic gradients.

For sampled parameters the loss is evaluated at theta +/- epsilon and the
symmetric difference is compared against the backward-pass gradient as a
relative error with an absolute floor. Probes that step across a kink (a
ReLU mask or pool argmax flip between the two evaluations) are skipped and
counted: the loss is not differentiable there, so the comparison is void.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import ce_loss, kd_loss

REL_FLOOR = 1e-6  # denominator floor so near-zero gradient pairs do not blow up


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    per_layer: dict = field(default_factory=dict)  # name -> (max rel error, checked, skipped)

    def __str__(self):
        return (f"grad check: max rel error {self.max_rel_error:.3e} over "
                f"{self.checked} params ({self.skipped_kinks} kink-adjacent skipped)")


def _loss_only(model, batch, targets, tau, scale_by_tau_sq):
    logits = model.forward(batch)
    if targets.ndim == 1:
        loss, _ = ce_loss(logits, targets)
    else:
        loss, _ = kd_loss(logits, targets, tau, scale_by_tau_sq=scale_by_tau_sq)
    return loss, model.kink_signatures()


def _same_routing(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(model, batch, targets, *, tau: float = 1.0, epsilon: float = 1e-4,
               samples_per_layer: int = 200, seed: int = 0,
               scale_by_tau_sq: bool = False) -> GradCheckReport:
    """Compare analytic and finite-difference gradients on sampled parameters.

    ``targets`` selects the loss: a 1-d integer array checks the hard-label
    cross entropy, a 2-d probability table checks the soft-label loss at
    temperature ``tau``. Returns the worst relative error observed.
    """
    batch = np.asarray(batch, dtype=np.float64)
    targets = np.asarray(targets)
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")

    logits = model.forward(batch)
    if targets.ndim == 1:
        _, dlogits = ce_loss(logits, targets)
    else:
        _, dlogits = kd_loss(logits, targets, tau, scale_by_tau_sq=scale_by_tau_sq)
    model.zero_grads()
    model.backward(dlogits)
    analytic = {name: g.copy() for name, _, g in model.parameters()}
    model.zero_grads()

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    skipped = 0
    per_layer = {}
    for layer in model.layers:
        if not layer.params:
            continue
        flats = [(pname, arr.reshape(-1)) for pname, arr in sorted(layer.params.items())]
        sizes = np.array([f.size for _, f in flats])
        total = int(sizes.sum())
        picks = rng.choice(total, size=min(samples_per_layer, total), replace=False)
        bounds = np.cumsum(sizes)
        layer_worst, layer_checked, layer_skipped = 0.0, 0, 0
        for flat_idx in picks:
            slot = int(np.searchsorted(bounds, flat_idx, side="right"))
            pname, flat = flats[slot]
            i = int(flat_idx - (bounds[slot] - sizes[slot]))
            orig = flat[i]
            flat[i] = orig + epsilon
            lo_plus, sig_plus = _loss_only(model, batch, targets, tau, scale_by_tau_sq)
            flat[i] = orig - epsilon
            lo_minus, sig_minus = _loss_only(model, batch, targets, tau, scale_by_tau_sq)
            flat[i] = orig
            if not _same_routing(sig_plus, sig_minus):
                layer_skipped += 1
                continue
            fd = (lo_plus - lo_minus) / (2.0 * epsilon)
            a = float(analytic[f"{layer.name}.{pname}"].reshape(-1)[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), REL_FLOOR)
            layer_worst = max(layer_worst, rel)
            layer_checked += 1
        per_layer[layer.name] = (layer_worst, layer_checked, layer_skipped)
        worst = max(worst, layer_worst)
        checked += layer_checked
        skipped += layer_skipped
    return GradCheckReport(worst, checked, skipped, per_layer)
