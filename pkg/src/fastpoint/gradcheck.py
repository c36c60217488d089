"""Central-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, record_branches


class NonDeterministicError(RuntimeError):
    """The checked function returned different values for identical inputs."""


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst: str = ""


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                      floor: float = 1e-8) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    The relative error uses the denominator ``max(|analytic|, |numeric|, floor)``.
    A larger ``floor`` acts as an absolute tolerance for gradients that are
    exactly zero, where the numeric estimate is pure roundoff (about
    ``eps * |f| / h``).

    ``f`` must be deterministic and the parameters must hold float64 data.
    Coordinates whose ``+h``/``-h`` evaluations take a different branch through
    a ReLU or max (a kink inside the stencil) are skipped and counted, since the
    derivative is undefined there.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters; wrap the computation in precision(np.float64)")
    for p in params:
        p.grad = np.zeros_like(p.data)
    with Tape() as tape, record_branches() as ref:
        loss = f()
    f0 = float(loss.data)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    again = float(f().data)
    if again != f0:
        raise NonDeterministicError(f"f() returned {f0!r} then {again!r} for identical parameters")

    worst, where, checked, skipped = 0.0, "", 0, 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with record_branches() as bp:
                fp = float(f().data)
            flat[i] = orig - h
            with record_branches() as bm:
                fm = float(f().data)
            flat[i] = orig
            if not (_same_branches(bp, ref) and _same_branches(bm, ref)):
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            ana = float(analytic[pi].reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            checked += 1
            if err > worst:
                worst = err
                where = f"{getattr(p, 'name', '') or f'param{pi}'}[{i}] analytic={ana:.6e} numeric={num:.6e}"
    for p in params:
        p.grad = np.zeros_like(p.data)
    return GradCheckReport(worst, checked, skipped, where)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4, floor: float = 1e-8) -> float:
    """Maximum relative error between tape and central-difference gradients."""
    return grad_check_report(f, params, h, floor).max_rel_error
