"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from safer.autodiff.tensor import Tensor, grad
from safer.errors import ContractError, DomainError


def numeric_grad(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-5,
                 coords: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``point`` (flat coordinates ``coords``)."""
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x)).item()
        flat[i] = orig - h
        fm = f(Tensor(x)).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"f is not finite at probe points around coordinate {i}")
        out[j] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max over coordinates of |analytic - numeric| / (|numeric| + 1e-8).

    ``coords`` restricts the comparison to a subset of flat coordinates, which
    keeps the check affordable for functions of many parameters.
    """
    x = np.array(point, dtype=np.float64)
    t = Tensor(x, requires_grad=True)
    y = f(t)
    if y.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if not np.isfinite(y.item()):
        raise DomainError("f is not finite at the check point")
    (g,) = grad(y, [t]) if y.requires_grad else (np.zeros_like(x),)
    analytic = g.reshape(-1)
    if coords is not None:
        analytic = analytic[np.asarray(coords, dtype=int)]
    numeric = numeric_grad(f, x, h, coords)
    if numeric.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))
