"""Sample sets from classical oscillators.

Orbits are integrated with fixed-step RK4 until successive returns to a
Poincare section agree, and one period is then resampled uniformly.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .geometry import SampleSet

__all__ = ["vanderpol", "fitzhugh_nagumo", "orbit_samples", "NoLimitCycleError"]


class NoLimitCycleError(RuntimeError):
    """Raised when the integration does not settle on a closed orbit."""


def vanderpol(mu: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Van der Pol field ``x1' = x2``, ``x2' = mu (1 - x1^2) x2 - x1``."""

    def f(x):
        return np.array([x[1], mu * (1.0 - x[0] ** 2) * x[1] - x[0]])

    return f


def fitzhugh_nagumo(a: float = 0.7, b: float = 0.8, eps: float = 0.08,
                    current: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    """FitzHugh-Nagumo field ``v' = v - v^3/3 - w + I``, ``w' = eps (v + a - b w)``."""

    def f(x):
        v, w = x
        return np.array([v - v ** 3 / 3.0 - w + current, eps * (v + a - b * w)])

    return f


def _rk4(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def orbit_samples(field: Callable[[np.ndarray], np.ndarray], x0, n_F: int,
                  dt: float = 1e-4, rescale_period: Optional[float] = None,
                  shift: int = 0, tol: float = 1e-6, t_max: float = 500.0) -> SampleSet:
    """Uniform samples of one period of an attracting limit cycle.

    The section is ``x2 = m2`` crossed downward, where ``m`` is the mean of
    the settled trajectory.  An orbit that winds once around its mean
    crosses it downward once per period.  Sampling starts at the section
    crossing, advanced by ``shift`` samples.

    Parameters
    ----------
    field : callable
        Autonomous vector field of a planar oscillator.
    n_F : int
        Number of samples over one period.
    rescale_period : float, optional
        Stretch time so the period equals this value.  States are unchanged.
    shift : int
        Rotates the starting sample along the orbit.
    tol : float
        Required distance between two successive section returns.
    """
    x = np.asarray(x0, dtype=float).copy()
    n_x = x.shape[0]
    if n_F < 4 * n_x:
        raise ValueError(f"n_F={n_F} must be at least 4*n_x={4 * n_x}")
    # Settle and find a reference level for the section.
    n_settle = int(round(20.0 / dt))
    acc = np.zeros(n_x)
    for _ in range(n_settle):
        x = _rk4(field, x, dt)
        acc += x
    level = acc / n_settle
    t = 0.0
    crossings = []
    prev = x
    while t < t_max:
        nxt = _rk4(field, prev, dt)
        t += dt
        a, b = prev[1] - level[1], nxt[1] - level[1]
        if a > 0 >= b:
            s = a / (a - b)
            crossings.append((t - dt + s * dt, prev + s * (nxt - prev)))
            if len(crossings) >= 2:
                if np.linalg.norm(crossings[-1][1] - crossings[-2][1]) < tol:
                    break
        prev = nxt
    else:
        raise NoLimitCycleError("no limit cycle found")
    T = crossings[-1][0] - crossings[-2][0]
    # Integrate one period from the section point with a step that divides
    # the sampling interval exactly.
    sub = max(1, int(np.ceil(T / n_F / dt)))
    h = T / n_F / sub
    x = crossings[-1][1].copy()
    pts = np.empty((n_F, n_x))
    for k in range(n_F):
        pts[k] = x
        for _ in range(sub):
            x = _rk4(field, x, h)
    pts = np.roll(pts, -int(shift), axis=0)
    period = T if rescale_period is None else float(rescale_period)
    return SampleSet.uniform(pts, period)
