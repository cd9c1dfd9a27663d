"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op_name}: max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:.0e}"


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    op_name: str = "f",
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the backward pass of ``f`` with central differences.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``inputs`` are perturbed in place and restored afterwards. With
    ``max_entries`` set, only that many randomly chosen entries of each input
    are perturbed (all of them when the input is smaller).
    """
    if not 1e-6 <= step <= 1e-3:
        raise ParameterError(f"step must lie in [1e-6, 1e-3], got {step}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, {op_name} returned {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    if max_entries is not None and max_entries < 1:
        raise ParameterError(f"max_entries must be positive, got {max_entries}")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        picks = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picks = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(inputs).item()
            flat[i] = orig - step
            fm = f(inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            ai = a.reshape(-1)[i]
            rel = abs(ai - num) / max(abs(ai), abs(num), 1e-8)
            worst = max(worst, rel)
    for t in inputs:
        t.grad = None
    return GradCheckReport(op_name, float(worst), tol, bool(worst <= tol))
