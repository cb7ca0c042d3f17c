"""Natural cubic spline control paths.

Knot values may carry arbitrary trailing dimensions: ``values`` has shape
``(n, *channels)`` so a whole mini-batch of windows that share knot times is
fitted with a single tridiagonal solve.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SplineError(ValueError):
    pass


def solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm. ``rhs`` may have trailing dimensions."""
    n = len(diag)
    c = np.zeros(n)
    d = np.zeros((n,) + rhs.shape[1:])
    c[0] = upper[0] / diag[0] if n > 1 else 0.0
    d[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - lower[i - 1] * c[i - 1]
        if i < n - 1:
            c[i] = upper[i] / denom
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom
    x = np.empty_like(d)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


@dataclass(frozen=True)
class SplinePath:
    """Piecewise cubic ``a + b*dt + c*dt**2 + d*dt**3`` on each knot interval."""

    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def _locate(self, t: float) -> tuple[int, float]:
        t = float(t)
        lo, hi = self.times[0], self.times[-1]
        tol = 1e-12 * max(1.0, abs(hi - lo))
        if not (lo - tol <= t <= hi + tol):
            raise SplineError(f"t={t} outside knot range [{self.times[0]}, {self.times[-1]}]")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        i = min(max(i, 0), len(self.times) - 2)
        return i, min(max(t, lo), hi) - self.times[i]

    def evaluate(self, t: float) -> np.ndarray:
        i, dt = self._locate(t)
        return self.a[i] + dt * (self.b[i] + dt * (self.c[i] + dt * self.d[i]))

    def derivative(self, t: float) -> np.ndarray:
        i, dt = self._locate(t)
        return self.b[i] + dt * (2.0 * self.c[i] + 3.0 * dt * self.d[i])

    def second_derivative(self, t: float) -> np.ndarray:
        i, dt = self._locate(t)
        return 2.0 * self.c[i] + 6.0 * dt * self.d[i]


def fit_natural_cubic(times, values) -> SplinePath:
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = len(times)
    if n < 2:
        raise SplineError("natural cubic spline needs at least 2 knots")
    if values.shape[0] != n:
        raise SplineError(f"{n} knot times but {values.shape[0]} knot values")
    h = np.diff(times)
    if np.any(h <= 0):
        raise SplineError("knot times must be strictly increasing")
    slopes = np.diff(values, axis=0) / h.reshape((-1,) + (1,) * (values.ndim - 1))

    # second derivatives at knots; zero at both ends
    m = np.zeros_like(values)
    if n > 2:
        diag = 2.0 * (h[:-1] + h[1:])
        rhs = 6.0 * (slopes[1:] - slopes[:-1])
        m[1:-1] = solve_tridiagonal(h[1:-1], diag, h[1:-1], rhs)

    hb = h.reshape((-1,) + (1,) * (values.ndim - 1))
    a = values[:-1]
    b = slopes - hb * (2.0 * m[:-1] + m[1:]) / 6.0
    c = m[:-1] / 2.0
    d = (m[1:] - m[:-1]) / (6.0 * hb)
    return SplinePath(times, a, b, c, d)


def eval_path(path: SplinePath, t: float) -> np.ndarray:
    return path.evaluate(t)


def eval_derivative(path: SplinePath, t: float) -> np.ndarray:
    return path.derivative(t)
