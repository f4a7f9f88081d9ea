"""Finite-difference verification of analytic gradients.

The oracle is a central difference with step 1e-5 on float64, which
leaves plenty of headroom below the 1e-4 relative tolerance used by the
test suite for smooth operations.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from scai.tensor import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_REL_TOL = 1e-4
_DENOM_FLOOR = 1e-4


class GradCheckError(AssertionError):
    """Analytic and numeric gradients disagree; names the worst element."""


def grad_check(op: Callable[..., Tensor], inputs: Sequence[Tensor],
               rel_tol: float = DEFAULT_REL_TOL, step: float = DEFAULT_STEP) -> float:
    """Compare analytic gradients of ``op(*inputs)`` against central differences.

    ``op`` must be a pure function of its tensor inputs returning a
    scalar. Returns the worst relative error over every element of every
    input; raises GradCheckError when it exceeds ``rel_tol``.
    """
    for t in inputs:
        t.grad = None
    out = op(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check: op must return a scalar, got shape {out.data.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    worst_info = ""
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = float(op(*inputs).data)
            flat[j] = orig - step
            f_minus = float(op(*inputs).data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), _DENOM_FLOOR)
            if err > worst:
                worst = err
                worst_info = (
                    f"input {i} element {j}: analytic {a!r} vs numeric {numeric!r} "
                    f"(rel err {err:.3e})"
                )
    if worst > rel_tol:
        raise GradCheckError(f"gradient mismatch beyond rel_tol={rel_tol}: {worst_info}")
    return worst
