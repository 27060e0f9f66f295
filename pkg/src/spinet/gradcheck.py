"""Finite-difference gradient verification.

The oracle is independent of the autodiff path: it re-runs the forward
function with perturbed inputs and forms central differences. Checks run at
float64 with step 1e-5 and compare against analytic gradients with a
relative-error criterion.
"""

import numpy as np

from .tensor import Tensor, backward, no_grad


def _scalarize(fn, weight):
    """Reduce fn() to a scalar via a fixed random weighting of its output."""

    def scalar_tensor():
        out = fn()
        w = Tensor(weight.astype(out.dtype))
        return (out * w).sum()

    return scalar_tensor


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float((np.abs(analytic - numeric) / denom).max())


def gradcheck(fn, wrt, rng=None, eps: float = 1e-5, coords: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds its graph from the tensors in ``wrt`` on every call (all
    of them must be float64 leaves with requires_grad). When ``coords`` is
    given, only that many randomly chosen coordinates per tensor are probed,
    otherwise every coordinate is.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out0 = fn()
    weight = rng.standard_normal(out0.shape) if out0.shape else np.ones(())
    scalar = _scalarize(fn, weight)

    for t in wrt:
        t.zero_grad()
    loss = scalar()
    backward(loss)

    worst = 0.0
    for t in wrt:
        assert t.dtype == np.float64, "gradcheck requires float64 tensors"
        flat = t.data.reshape(-1)
        n = flat.size
        if coords is not None and coords < n:
            sel = rng.choice(n, size=coords, replace=False)
        else:
            sel = np.arange(n)
        analytic = t.grad.reshape(-1)
        for idx in sel:
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + eps
                hi = scalar().item()
                flat[idx] = orig - eps
                lo = scalar().item()
            flat[idx] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(analytic[idx]), abs(numeric), 1.0)
            worst = max(worst, abs(analytic[idx] - numeric) / denom)
    return worst
