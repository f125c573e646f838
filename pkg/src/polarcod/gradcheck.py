"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    name: str
    checked: int
    max_rel_err: float
    passed: bool


def rel_err(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_grad(loss_fn: Callable[[], Tensor], leaves: dict[str, Tensor], h: float = 1e-5,
               rtol: float = 1e-4, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> list[GradCheckResult]:
    """Compare analytic leaf gradients of ``loss_fn()`` against central
    differences. ``loss_fn`` must rebuild the forward pass on every call.

    Checks every entry of every leaf unless ``max_entries`` caps the probes
    per tensor (sampled deterministically from ``rng``).
    """
    rng = rng or np.random.default_rng(0)
    for t in leaves.values():
        t.zero_grad()
    backward(loss_fn())
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in leaves.items()}

    results = []
    for name, t in leaves.items():
        flat = t.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idxs = np.arange(flat.size)
        else:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                lp = float(loss_fn().data)
            flat[i] = orig - h
            with no_grad():
                lm = float(loss_fn().data)
            flat[i] = orig
            worst = max(worst, rel_err(float(ana[i]), (lp - lm) / (2.0 * h)))
        results.append(GradCheckResult(name, len(idxs), worst, worst <= rtol))
    return results


def directional_check(loss_fn: Callable[[], Tensor], leaves: dict[str, Tensor],
                      h: float = 1e-6, rtol: float = 1e-4, probes: int = 3,
                      rng: np.random.Generator | None = None) -> GradCheckResult:
    """Probe the full gradient at once: compare <grad, v> against the central
    difference of the loss along random unit directions v."""
    rng = rng or np.random.default_rng(0)
    for t in leaves.values():
        t.zero_grad()
    backward(loss_fn())
    grads = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for name, t in leaves.items()}

    worst = 0.0
    for _ in range(probes):
        vs = {name: rng.standard_normal(t.data.shape) for name, t in leaves.items()}
        norm = np.sqrt(sum(float((v ** 2).sum()) for v in vs.values()))
        vs = {name: v / norm for name, v in vs.items()}
        analytic = sum(float((grads[name] * v).sum()) for name, v in vs.items())
        for name, t in leaves.items():
            t.data += h * vs[name]
        with no_grad():
            lp = float(loss_fn().data)
        for name, t in leaves.items():
            t.data -= 2.0 * h * vs[name]
        with no_grad():
            lm = float(loss_fn().data)
        for name, t in leaves.items():
            t.data += h * vs[name]
        worst = max(worst, rel_err(analytic, (lp - lm) / (2.0 * h)))
    return GradCheckResult("directional", probes, worst, worst <= rtol)
