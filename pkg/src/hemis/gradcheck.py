"""Central finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def rel_errors(self) -> np.ndarray:
        return np.array([e.rel_error for e in self.entries])

    @property
    def fraction_ok(self) -> float:
        if not self.entries:
            return 1.0
        return float(np.mean(self.rel_errors < self.tolerance))

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.entries else 0.0

    def passed(self, min_fraction: float = 1.0, max_error: float | None = None) -> bool:
        ok = self.fraction_ok >= min_fraction
        if max_error is not None:
            ok = ok and self.max_rel_error < max_error
        return ok

    def to_tsv(self) -> str:
        lines = ["param\tanalytic\tnumeric\trel_error"]
        for e in self.entries:
            idx = ",".join(str(i) for i in e.index)
            lines.append(f"{e.name}[{idx}]\t{e.analytic:.10e}\t{e.numeric:.10e}\t{e.rel_error:.3e}")
        return "\n".join(lines) + "\n"


def relative_error(a, n, floor=1e-8):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps exact zeros at zero error."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(model_fn: Callable[[dict], tuple], params: dict, eps: float = 1e-5,
               tolerance: float = 1e-4, names=None, max_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``model_fn(params) -> (loss, grads)`` must be deterministic; params should
    be float64. Every coordinate is checked unless ``max_per_param`` asks for
    a random subset.
    """
    loss, grads = model_fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss at the base point")
    analytic = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    report = GradCheckReport(tolerance=tolerance)
    for name in (names or list(params)):
        p = params[name]
        if not p.flags.c_contiguous:
            raise ValueError(f"parameter {name} must be C-contiguous to be perturbed in place")
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False))
        g = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = model_fn(params)
            flat[i] = orig - eps
            lm, _ = model_fn(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}")
            num = (lp - lm) / (2 * eps)
            report.entries.append(GradCheckEntry(
                name, np.unravel_index(i, p.shape), float(g[i]), float(num),
                float(relative_error(g[i], num))))
    return report
