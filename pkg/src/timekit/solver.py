"""Fixed-step RK4 for ODEs and controlled differential equations.

The integrator uses only ``+`` and scalar ``*`` on the state, so it runs
unchanged on numpy arrays and on :class:`~timekit.numgrad.Tensor` states.
With tensors every stage lands on the tape and gradients flow back through
the whole unrolled solve.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from timekit import numgrad as ng
from timekit.spline import SplinePath


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class SolveConfig:
    t_start: float
    t_end: float
    step: float

    @classmethod
    def from_steps(cls, t_start: float, t_end: float, steps_per_unit: int) -> "SolveConfig":
        return cls(t_start, t_end, 1.0 / steps_per_unit)

    @property
    def num_steps(self) -> int:
        if not 0.0 < self.step <= 1.0:
            raise SolverError(f"step size must be in (0, 1], got {self.step}")
        ratio = abs(self.t_end - self.t_start) / self.step
        n = int(round(ratio))
        if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, abs(ratio)):
            raise SolverError(
                f"(t_end - t_start)/step = {ratio} is not a positive integer"
            )
        return n


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, ng.Tensor) else np.asarray(x)


def _apply_control(f, dx: np.ndarray):
    """Multiply a field matrix (..., h, D) with a control derivative (..., D)."""
    if isinstance(f, ng.Tensor):
        if f.value.ndim == 3:
            return ng.bmv(f, ng.Tensor(dx))
        return ng.reshape(ng.matmul(f, ng.Tensor(dx.reshape(-1, 1))), (f.shape[0],))
    return np.einsum("...ij,...j->...i", f, dx)


def _derivative(field: Callable, z, t: float, path: SplinePath | None):
    f = field(z, t)
    if path is None:
        return f
    return _apply_control(f, path.derivative(t))


def _check(stage_value, stage: int, t: float):
    if not np.all(np.isfinite(_value(stage_value))):
        raise SolverError(f"non-finite value in RK4 stage f{stage} at t={t}")


def rk4_step(field: Callable, z, t: float, s: float, path: SplinePath | None = None):
    """Advance ``z`` from ``t`` to ``t + s``.

    In CDE mode (``path`` given) the field returns an (h, D) matrix that is
    contracted with the path derivative evaluated at each stage time.
    """
    f1 = _derivative(field, z, t, path)
    _check(f1, 1, t)
    f2 = _derivative(field, z + (s / 2) * f1, t + s / 2, path)
    _check(f2, 2, t + s / 2)
    f3 = _derivative(field, z + (s / 2) * f2, t + s / 2, path)
    _check(f3, 3, t + s / 2)
    f4 = _derivative(field, z + s * f3, t + s, path)
    _check(f4, 4, t + s)
    return z + (s / 6) * (f1 + 2 * f2 + 2 * f3 + f4)


def integrate(field: Callable, z0, config: SolveConfig, path: SplinePath | None = None, trajectory: bool = False):
    n = config.num_steps
    s = (config.t_end - config.t_start) / n
    if path is not None:
        lo, hi = sorted((config.t_start, config.t_end))
        if lo < path.t_start - 1e-12 or hi > path.t_end + 1e-12:
            raise SolverError("control path does not cover the integration interval")
    z = z0
    states = [z0]
    for k in range(n):
        t = config.t_start + k * s
        z = rk4_step(field, z, t, s, path)
        if trajectory:
            states.append(z)
    return (z, states) if trajectory else z
