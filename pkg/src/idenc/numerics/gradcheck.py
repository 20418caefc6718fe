"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grad


class NondeterministicFunctionError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple = ()
    analytic: float = 0.0
    numeric: float = 0.0
    n_checked: int = 0
    per_param: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _named(params) -> list:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    eps: float = 1e-3,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    numeric_dtype=np.float64,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` against (f(p+eps) - f(p-eps)) / 2eps.

    ``f`` closes over ``params``; it is re-evaluated with one scalar nudged at a
    time. ``max_elements`` caps how many scalars per parameter are probed (a
    random subset drawn from ``rng``). Finite differences are evaluated with
    parameter data promoted to ``numeric_dtype`` so that an f32 model can be
    checked without f32 cancellation swamping the difference quotient.
    """
    named = _named(params)
    tensors = [t for _, t in named]
    zero_grad(tensors)
    loss = f()
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in named}

    with no_grad():
        v1 = f().data.copy()
        v2 = f().data.copy()
    if not np.array_equal(v1, v2):
        raise NondeterministicFunctionError(f"f() is not deterministic: {v1} != {v2}")

    originals = {name: t.data for name, t in named}
    for name, t in named:
        t.data = originals[name].astype(numeric_dtype)

    report = GradCheckReport(max_rel_err=0.0, worst_param="")
    try:
        for name, t in named:
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False))
            a_flat = analytic[name].reshape(-1)
            worst = 0.0
            for i in idx:
                old = flat[i]
                flat[i] = old + eps
                with no_grad():
                    fp = float(np.asarray(f().data, dtype=np.float64).reshape(-1)[0])
                flat[i] = old - eps
                with no_grad():
                    fm = float(np.asarray(f().data, dtype=np.float64).reshape(-1)[0])
                flat[i] = old
                num = (fp - fm) / (2.0 * eps)
                err = float(relative_error(np.float64(a_flat[i]), np.float64(num)))
                report.n_checked += 1
                worst = max(worst, err)
                if err > report.max_rel_err or not report.worst_param:
                    report.max_rel_err = err
                    report.worst_param = name
                    report.worst_index = tuple(int(j) for j in np.unravel_index(i, t.shape))
                    report.analytic = float(a_flat[i])
                    report.numeric = num
            report.per_param[name] = worst
    finally:
        for name, t in named:
            t.data = originals[name]
    return report
