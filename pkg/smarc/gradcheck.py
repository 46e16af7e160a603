"""
Finite-difference oracle for the tensor engine.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from smarc.tensor import Tensor, no_grad

DEFAULT_EPS = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}


def _scalar(out: Tensor) -> float:
    return float(np.sum(out.data, dtype=np.float64))


def finite_diff_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: Optional[float] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare the analytic gradient of sum(op(*inputs)) with central differences.

    Every input with requires_grad is checked (all coordinates, or a seeded
    sample of `max_coords` per input). Returns
        max |analytic - numeric| / max(1, |analytic|)
    over the sampled coordinates. The step actually taken is measured after
    rounding to the input dtype, and the objective is summed in float64.
    """
    sampled = [t for t in inputs if t.requires_grad]
    if not sampled:
        return 0.0
    if epsilon is None:
        epsilon = DEFAULT_EPS.get(sampled[0].dtype, 1e-3)

    for t in sampled:
        t.grad = None
    out = op(*inputs)
    if out.size != 1:
        out = out.sum()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in sampled]

    def objective() -> float:
        with no_grad():
            return _scalar(op(*inputs))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(sampled, analytic):
        n = t.size
        coords = np.arange(n) if max_coords is None or max_coords >= n else rng.choice(n, size=max_coords, replace=False)
        for flat in coords:
            idx = np.unravel_index(int(flat), t.shape)
            orig = t.data[idx].copy()
            t.data[idx] = orig + epsilon
            hi = float(t.data[idx])
            f_hi = objective()
            t.data[idx] = orig - epsilon
            lo = float(t.data[idx])
            f_lo = objective()
            t.data[idx] = orig
            numeric = (f_hi - f_lo) / (hi - lo)
            ana = float(a[idx])
            worst = max(worst, abs(ana - numeric) / max(1.0, abs(ana)))
    return worst


def adjoint_gap(forward: Callable[[Tensor], Tensor], x: Tensor, y: np.ndarray) -> float:
    """
    Relative gap |<L x, y> - <x, L^T y>| / max(1, |<L x, y>|) for a linear op L,
    with L^T y obtained by reverse mode.
    """
    x = Tensor(x.data, requires_grad=True, dtype=x.dtype)
    out = forward(x)
    lhs = float(np.sum(out.data.astype(np.float64) * y))
    out.backward(np.asarray(y, dtype=out.dtype))
    rhs = float(np.sum(x.data.astype(np.float64) * x.grad))
    return abs(lhs - rhs) / max(1.0, abs(lhs))
