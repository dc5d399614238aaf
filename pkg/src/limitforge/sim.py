"""Hybrid simulation of switching affine systems.

Integration is fixed-step RK4 with the region frozen inside each step.  When
the region at the end of a step differs from the one at its start, the step
length is bisected to place the boundary crossing, the switch is recorded,
and the remainder of the step is integrated with the new region's field.
States are reported on the uniform grid ``k * dt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import ConicPartition, Hyperplane, locate_all
from .matfun import SquareWave, square_wave_value

__all__ = [
    "SwitchingAffineSystem",
    "Trajectory",
    "PeriodicOrbitEstimate",
    "SimulationError",
    "simulate",
    "integrate_hybrid",
    "estimate_period",
    "min_dwell_time",
    "tracking_error_series",
    "resample",
]

DT_MAX = 1e-3


class SimulationError(RuntimeError):
    """Raised on divergence or chattering during integration."""


@dataclass(frozen=True)
class SwitchingAffineSystem:
    """``x' = A_i x + b_i + B u(t)`` for ``x`` in region ``i``.

    Parameters
    ----------
    partition : ConicPartition
    A : array_like, shape (n_p, n_x, n_x)
    b : array_like, shape (n_p, n_x)
    B : array_like, shape (n_x, n_u)
        A 1-D array is read as a single input column.
    input : SquareWave, callable or None
        A square wave drives every input channel with the same value.  A
        callable maps time to an input vector of length ``n_u``.
    """

    partition: ConicPartition
    A: np.ndarray
    b: np.ndarray
    B: np.ndarray
    input: object = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        n_p, n_x = self.partition.n_p, self.partition.n_x
        if A.shape != (n_p, n_x, n_x) or b.shape != (n_p, n_x) or B.shape[0] != n_x:
            raise ValueError("system dimensions do not match the partition")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "B", B)

    @property
    def n_x(self) -> int:
        return self.partition.n_x

    @property
    def n_p(self) -> int:
        return self.partition.n_p

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def u(self, t: float) -> np.ndarray:
        """Input vector at time ``t``."""
        if self.input is None:
            return np.zeros(self.n_u)
        if isinstance(self.input, SquareWave):
            return np.full(self.n_u, square_wave_value(self.input, t))
        return np.asarray(self.input(t), dtype=float).reshape(self.n_u)

    def input_edges(self, t0: float, t1: float) -> List[float]:
        """Discontinuities of a square-wave input strictly inside ``(t0, t1)``."""
        if not isinstance(self.input, SquareWave):
            return []
        half = 0.5 * self.input.period_T
        k = np.floor(t0 / half) + 1
        out = []
        while k * half < t1:
            out.append(float(k * half))
            k += 1
        return out

    def field(self, i: int, x: np.ndarray, t: float) -> np.ndarray:
        return self.A[i] @ x + self.b[i] + self.B @ self.u(t)


@dataclass
class Trajectory:
    """Grid samples of a hybrid trajectory.

    Attributes
    ----------
    times : ndarray, shape (m,)
    states : ndarray, shape (m, n)
    regions : ndarray, shape (m,) or (m, k)
        Active mode at each grid time.  Co-simulations carry one column per
        subsystem.
    switches : list of (time, from, to, state)
    partner_at_switch : ndarray or None
        For one side of a co-simulation, the other subsystem's state at each
        of this trajectory's switches.
    """

    times: np.ndarray
    states: np.ndarray
    regions: np.ndarray
    switches: List[Tuple[float, object, object, np.ndarray]] = field(default_factory=list)
    partner_at_switch: Optional[np.ndarray] = None

    def switch_times(self, column: Optional[int] = None) -> np.ndarray:
        """Times of mode changes, optionally for one subsystem only."""
        out = []
        for t, a, b, _ in self.switches:
            if column is None or np.atleast_1d(a)[column] != np.atleast_1d(b)[column]:
                out.append(t)
        return np.array(out)


@dataclass
class PeriodicOrbitEstimate:
    period: float
    anchor_state: np.ndarray
    closure_residual: float
    samples_on_orbit: np.ndarray
    return_times: np.ndarray


def _rk4(f, t, x, h):
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_hybrid(
    rhs: Callable[[object, float, np.ndarray], np.ndarray],
    mode: Callable[[np.ndarray], object],
    residual: Callable[[object, object, np.ndarray], float],
    x0,
    t_end: float,
    dt: float = DT_MAX,
    event_tol: float = 1e-9,
    max_bisect: int = 30,
    max_switches: int = 10_000,
    input_edges: Optional[Callable[[float, float], Sequence[float]]] = None,
) -> Trajectory:
    """Integrate a mode-switched ODE with event bisection.

    Parameters
    ----------
    rhs : callable ``(mode, t, x) -> dx``
        Vector field of a fixed mode.
    mode : callable ``x -> mode``
        Mode of a state.  Modes must support ``!=``.
    residual : callable ``(old, new, x) -> float``
        Distance of ``x`` to the boundary crossed between two modes; used to
        stop bisection once it is below ``event_tol``.
    max_switches : int
        Largest number of switches tolerated within one step before the run
        is declared chattering.
    input_edges : callable ``(t0, t1) -> times``, optional
        Jumps of a piecewise-constant input inside ``(t0, t1)``.  Steps are
        cut at these times, and every RK4 stage of a cut piece sees the time
        of the piece's midpoint, so that a stage landing on a jump does not
        pick up the next input value.
    """
    if t_end < 0:
        raise ValueError("t_end must be non-negative")
    if not 0 < dt <= DT_MAX * (1 + 1e-12):
        raise ValueError(f"dt must lie in (0, {DT_MAX}]")
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        n_steps = int(np.ceil(t_end / dt - 1e-9))
    times = dt * np.arange(n_steps + 1)
    states = np.empty((times.shape[0], x.shape[0]))
    modes = []
    switches = []
    m = mode(x)
    states[0] = x
    modes.append(m)
    t = 0.0
    for k in range(1, times.shape[0]):
        t_goal = times[k]
        count = 0
        while t_goal - t > 1e-15:
            stop, t_in = t_goal, None
            if input_edges is not None:
                inner = [e for e in input_edges(t, t_goal) if t + 1e-12 < e < t_goal - 1e-12]
                if inner:
                    stop = inner[0]
                t_in = 0.5 * (t + stop)
            h = stop - t
            if t_in is None:
                f = lambda tt, xx, mm=m: rhs(mm, tt, xx)
            else:
                f = lambda tt, xx, mm=m, ti=t_in: rhs(mm, ti, xx)
            with np.errstate(over="ignore", invalid="ignore"):
                x_new = _rk4(f, t, x, h)
            if not np.all(np.isfinite(x_new)):
                raise SimulationError(f"divergence at t={t:.6g}")
            m_new = mode(x_new)
            if m_new == m:
                x, t = x_new, stop
                continue
            lo, hi = 0.0, h
            x_hi, m_hi = x_new, m_new
            for _ in range(max_bisect):
                if abs(residual(m, m_hi, x_hi)) <= event_tol:
                    break
                mid = 0.5 * (lo + hi)
                x_mid = _rk4(f, t, x, mid)
                m_mid = mode(x_mid)
                if m_mid == m:
                    lo = mid
                else:
                    hi, x_hi, m_hi = mid, x_mid, m_mid
            t = t + hi
            x = x_hi
            switches.append((t, m, m_hi, x.copy()))
            m = m_hi
            count += 1
            if count > max_switches:
                raise SimulationError(f"Zeno-like switching detected near t={t:.6g}")
        states[k] = x
        modes.append(m)
    return Trajectory(times, states, np.array(modes), switches)


def simulate(
    system: SwitchingAffineSystem,
    x0,
    t_end: float,
    dt: float = DT_MAX,
    event_tol: float = 1e-9,
    max_switches: int = 10_000,
) -> Trajectory:
    """Simulate a switching affine system from ``x0`` over ``[0, t_end]``.

    Examples
    --------
    >>> traj = simulate(system, [2.5, -20.0], t_end=14.0)  # doctest: +SKIP
    """
    part = system.partition
    Cn = np.array([h.unit_normal for h in part.boundaries])
    dn = np.array([h.unit_offset for h in part.boundaries])

    def mode(x):
        return int(locate_all(part, x[None, :])[0])

    def rhs(i, t, x):
        return system.field(i, x, t)

    def residual(a, b, x):
        # The crossed boundary is the one shared by the two regions.
        j = b if (b - a) % part.n_p == 1 else a if (a - b) % part.n_p == 1 else None
        if j is None:
            return float(np.min(np.abs(Cn @ x - dn)))
        return float(Cn[j] @ x - dn[j])

    return integrate_hybrid(rhs, mode, residual, x0, t_end, dt, event_tol,
                            max_switches=max_switches, input_edges=system.input_edges)


def estimate_period(
    traj: Trajectory,
    section: Hyperplane,
    direction_sign: int = 1,
    K: int = 3,
    discard: float = 0.5,
) -> PeriodicOrbitEstimate:
    """Period from successive crossings of a Poincare section.

    Crossings in the requested direction are located by linear interpolation
    between grid samples.  Crossings in the first ``discard`` fraction of the
    horizon are dropped as transient, and the period is the mean of the last
    ``K`` return times.
    """
    X, t = traj.states, traj.times
    s = section.distance(X)
    sgn = 1 if direction_sign >= 0 else -1
    idx = np.nonzero((sgn * s[:-1] < 0) & (sgn * s[1:] >= 0))[0]
    tc, xc = [], []
    for k in idx:
        a = s[k] / (s[k] - s[k + 1])
        tc.append(t[k] + a * (t[k + 1] - t[k]))
        xc.append(X[k] + a * (X[k + 1] - X[k]))
    tc, xc = np.array(tc), np.array(xc)
    keep = tc >= t[0] + discard * (t[-1] - t[0])
    if keep.sum() < 3:
        keep = np.ones_like(tc, dtype=bool)
    tc, xc = tc[keep], xc[keep]
    if tc.shape[0] < 3:
        raise SimulationError("no periodic behavior detected")
    ret = np.diff(tc)
    period = float(np.mean(ret[-K:]))
    closure = float(np.linalg.norm(xc[-1] - xc[-2]))
    t_last = tc[-2]
    sel = (t >= t_last) & (t <= tc[-1])
    return PeriodicOrbitEstimate(period, xc[-1], closure, X[sel], ret)


def min_dwell_time(traj: Trajectory, column: Optional[int] = None,
                   discard: float = 0.5) -> float:
    """Smallest gap between consecutive switches after the transient.

    Switches before ``discard * t_end`` are ignored.  ``column`` selects one
    subsystem of a co-simulation.
    """
    ts = traj.switch_times(column)
    t0 = traj.times[0] + discard * (traj.times[-1] - traj.times[0])
    ts = ts[ts >= t0]
    if ts.shape[0] < 2:
        raise SimulationError("dwell undefined: fewer than two switches")
    return float(np.min(np.diff(ts)))


def resample(traj: Trajectory, times) -> np.ndarray:
    """Linear interpolation of the states onto ``times``."""
    times = np.asarray(times, dtype=float)
    return np.column_stack(
        [np.interp(times, traj.times, traj.states[:, q]) for q in range(traj.states.shape[1])]
    )


def tracking_error_series(traj_c: Trajectory, traj_r: Trajectory, certificate=None,
                          partition: Optional[ConicPartition] = None):
    """Euclidean error between two trajectories on the grid of ``traj_c``.

    When a tracking certificate (with per-region ``Q``) and the partition are
    supplied, the weighted error ``(x_c - x_r)^T Q_j (x_c - x_r)`` with
    ``j`` the reference region is returned as a second series.
    """
    t = traj_c.times
    Xc = traj_c.states
    if traj_r.times.shape == t.shape and np.allclose(traj_r.times, t):
        Xr = traj_r.states
    else:
        Xr = resample(traj_r, t)
    E = Xc - Xr
    err = np.linalg.norm(E, axis=1)
    if certificate is None:
        return err
    if partition is None:
        raise ValueError("the weighted series needs the partition")
    j = locate_all(partition, Xr)
    Q = np.asarray(certificate.Q)[j]
    V = np.einsum("ki,kij,kj->k", E, Q, E)
    return err, V
