"""Finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn  # noqa: F401  registers the fused primitives
from .tensor import PRIMITIVES, Function, Tensor, mul_const, no_grad, tensor_sum

# fourth-order stencil: truncation ~ STEP^4, rounding ~ 1e-16 |f| / STEP
STEP = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, b = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, b), 1e-8)


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f / d x by the five-point central stencil, perturbing ``x`` in place.

    A plain two-point difference at a step small enough for its truncation
    error drowns gradients near 1e-7 in rounding noise; this stencil lets
    the step grow 100x at the same truncation error.
    """
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for k in (2, 1, -1, -2):
            flat[i] = orig + k * step
            vals.append(f())
        flat[i] = orig
        f2, f1, m1, m2 = vals
        gflat[i] = (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * step)
    return g


def check_function(op: type[Function], rng: np.random.Generator) -> float:
    """Max relative error of ``op``'s backward over its sample inputs.

    The scalar probe is ``sum(op(inputs) * R)`` for a fixed random R.
    """
    arrays, kwargs = op.sample(rng)
    inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op.apply(*inputs, **kwargs)
    probe = rng.uniform(-1, 1, out.shape)
    tensor_sum(mul_const(out, probe)).backward()

    def f() -> float:
        with no_grad():
            return float(np.sum(op.apply(*inputs, **kwargs).data * probe))

    worst = 0.0
    for t in inputs:
        num = numeric_grad(f, t.data)
        worst = max(worst, float(relative_error(t.grad, num).max()))
    return worst


def check_primitives(seed: int = 0, names: Sequence[str] | None = None) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: check_function(PRIMITIVES[name], rng) for name in (names or sorted(PRIMITIVES))}


@dataclass
class GradCheckReport:
    tolerance: float
    primitives: dict[str, float] = field(default_factory=dict)
    parameters: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        bad = [f"op:{k}" for k, v in self.primitives.items() if not v < self.tolerance]
        bad += [f"param:{k}" for k, v in self.parameters.items() if not v < self.tolerance]
        return bad

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max([*self.primitives.values(), *self.parameters.values(), 0.0])

    def lines(self) -> list[str]:
        out = []
        for group, table in (("op", self.primitives), ("param", self.parameters)):
            for k, v in table.items():
                status = "ok" if v < self.tolerance else "FAIL"
                out.append(f"{group:5s} {k:48s} {v:.3e} {status}")
        out.append(f"{'PASS' if self.passed else 'FAIL'} max_rel_err={self.max_error:.3e} tol={self.tolerance:g}")
        return out


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    group: Callable[[str], str] | None = None,
) -> dict[str, float]:
    """Max relative error per parameter group for a scalar ``loss_fn``.

    ``loss_fn`` must be deterministic (no dropout sampling).
    """
    for _, t in params:
        t.grad = None
    loss_fn().backward([t for _, t in params])

    def f() -> float:
        with no_grad():
            return float(loss_fn().data)

    errors: dict[str, float] = {}
    for name, t in params:
        num = numeric_grad(f, t.data)
        key = group(name) if group else name
        errors[key] = max(errors.get(key, 0.0), float(relative_error(t.grad, num).max()))
    return errors
