"""Central finite-difference oracle for checking analytic gradients.

The oracle evaluates the function in float64 so that the finite-difference
truncation and rounding error stay well below the float32 analytic gradient
being checked.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward, precision


def analytic_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Gradients of scalar ``fn(*tensors)`` w.r.t. each input, via the tape (float32)."""
    inputs = [Tensor(np.asarray(a, dtype=np.float32), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*inputs)
    backward(out, tape)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def numerical_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    step: float = 1e-3,
    which: Sequence[int] | None = None,
) -> list[np.ndarray | None]:
    """Central differences of scalar ``fn`` in float64 for the inputs listed in ``which``."""
    base = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    which = range(len(base)) if which is None else which
    grads: list[np.ndarray | None] = [None] * len(base)

    def evaluate() -> float:
        with precision(np.float64):
            return float(fn(*[Tensor(a) for a in base]).data)

    for idx in which:
        arr = base[idx]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = evaluate()
            flat[k] = orig - step
            fm = evaluate()
            flat[k] = orig
            gflat[k] = (fp - fm) / (2.0 * step)
        grads[idx] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Max-norm relative error ``max|a - n| / max|n|`` over the (optionally masked) entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if mask is not None:
        a, n = a[mask], n[mask]
    if a.size == 0:
        return 0.0
    denom = max(float(np.abs(n).max()), float(np.abs(a).max()), 1e-12)
    return float(np.abs(a - n).max()) / denom
