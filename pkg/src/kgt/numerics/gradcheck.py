from __future__ import annotations

from typing import Callable

import numpy as np

from kgt.errors import EvaluationError
from kgt.numerics.tensor import Tensor, float64_mode, no_grad


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Largest relative disagreement between reverse-mode and central differences.

    ``f`` maps a tensor to a scalar tensor and must build its whole
    computation from the argument it receives (closures over other 64-bit
    tensors are fine). The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"grad_check: step {h} outside [1e-7, 1e-4]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    with float64_mode():
        xt = Tensor(base.copy(), requires_grad=True)
        y = f(xt)
        if not np.isfinite(y.data).all():
            raise EvaluationError("grad_check: f(x) is not finite")
        y.backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

        numeric = np.empty_like(base)
        flat = base.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = _eval(f, base)
                flat[i] = orig - h
                fm = _eval(f, base)
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * h)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def _eval(f, arr) -> float:
    try:
        y = f(Tensor(arr.copy()))
    except FloatingPointError as exc:
        raise EvaluationError(f"grad_check: evaluation failed: {exc}") from exc
    val = float(y.data)
    if not np.isfinite(val):
        raise EvaluationError("grad_check: f(x) is not finite")
    return val
