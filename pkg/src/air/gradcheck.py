"""Finite-difference gradient verification.

Central differences evaluated purely through forward passes, so the check
is independent of the reverse-mode implementation it validates. Run at
64-bit with step 1e-5; relative error below 1e-4 counts as a pass.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-4


def numeric_grad(fn, arrays, index: int, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference d fn / d arrays[index], elementwise.

    ``fn`` maps a list of numpy arrays to a scalar float and must not
    mutate its inputs.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(base)
        flat[i] = orig - step
        lo = fn(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def check_op(build_loss, arrays, step: float = DEFAULT_STEP, rtol: float = DEFAULT_RTOL):
    """Compare reverse-mode grads of ``build_loss`` against central differences.

    ``build_loss`` takes a list of Tensors (requires_grad set) and returns
    a scalar Tensor. Returns the worst relative error across inputs and
    raises AssertionError when it exceeds ``rtol``.
    """
    params = [T.parameter(np.array(a, dtype=np.float64)) for a in arrays]
    loss = build_loss(params)
    loss.backward()

    def forward_only(raw):
        with T.no_grad():
            vals = [T.constant(r) for r in raw]
            return float(build_loss(vals).data)

    worst = 0.0
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(forward_only, [p.data for p in params], i, step=step)
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(f"gradient check failed on input {i}: rel err {err:.3e} > {rtol:.1e}")
    return worst
