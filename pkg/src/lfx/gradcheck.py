"""Central finite-difference oracle for reverse-mode gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteLoss
from .tensor import Tensor


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    passed: bool
    worst_index: tuple[int, ...] = ()

    def __str__(self) -> str:
        return f"{self.name:<24} max_rel_err={self.max_rel_err:.3e} {'PASS' if self.passed else 'FAIL'}"


@dataclass
class GradCheckReport:
    checks: list[ParamCheck] = field(default_factory=list)
    tol: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def __str__(self) -> str:
        return "\n".join(str(c) for c in self.checks)


def _evaluate(f: Callable[[], Tensor]) -> float:
    value = f().item()
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss evaluated to {value}")
    return value


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-5) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``f()`` with central differences.

    ``params`` are leaf tensors read by ``f``; their data is perturbed in place
    and restored. An entry passes when ``|a - n| / max(|a|, |n|, 1e-8) < tol``.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if not math.isfinite(loss.item()):
        raise NonFiniteLoss(f"loss evaluated to {loss.item()}")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(tol=tol)
    for i, (p, grad) in enumerate(zip(params, analytic)):
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = _evaluate(f)
            flat[j] = orig - h
            minus = _evaluate(f)
            flat[j] = orig
            num_flat[j] = (plus - minus) / (2.0 * h)
        err = relative_error(grad, numeric)
        worst = float(err.max()) if err.size else 0.0
        where = tuple(int(k) for k in np.unravel_index(int(err.argmax()), err.shape)) if err.size else ()
        report.checks.append(ParamCheck(p.name or f"param{i}", worst, worst < tol, where))
    for p in params:
        p.zero_grad()
    return report
