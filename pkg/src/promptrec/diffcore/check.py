"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .registry import ParameterRegistry
from .tensor import DiffcoreError, Tensor


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def __str__(self) -> str:
        lines = [
            f"  {'PASS' if p.passed else 'FAIL'} {p.name}: max rel err {p.max_rel_err:.3e}"
            for p in self.params
        ]
        return "\n".join(lines)


def finite_diff_check(f: Callable[[], Tensor], params: ParameterRegistry,
                      eps: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    Every element of every trainable parameter is probed with
    (f(p+eps) - f(p-eps)) / (2 eps). Relative error uses the denominator
    max(1, |analytic|, |numeric|), which degrades to absolute error for
    small gradients.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise DiffcoreError(f"finite_diff_check: eps {eps} outside [1e-7, 1e-3]")

    params.zero_grad()
    out = f()
    if out.data.size != 1:
        raise DiffcoreError("finite_diff_check: f must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise DiffcoreError("finite_diff_check: f is non-finite at the base point")
    out.backward()
    analytic = {
        e.name: (e.tensor.grad.copy() if e.tensor.grad is not None
                 else np.zeros_like(e.tensor.data))
        for e in params.trainable()
    }

    report = GradCheckReport(tol=tol, eps=eps)
    for entry in params.trainable():
        data = entry.tensor.data
        flat = data.reshape(-1)
        a_flat = analytic[entry.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise DiffcoreError(
                    f"finite_diff_check: f non-finite while probing {entry.name}[{i}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1.0, abs(a_flat[i]), abs(numeric))
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
        report.params.append(ParamCheck(entry.name, worst, worst <= tol))
    return report
