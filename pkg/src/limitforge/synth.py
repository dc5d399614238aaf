"""Synthesis of contractive switching affine systems from orbit samples.

The identified system is ``x' = A_i x + b_i + B u(t)`` on the regions of a
conic partition, with ``u`` a unit square wave of the orbit period.  The
decision variables are parametrized so that the vector field is continuous
across every boundary by construction:

* the field at the apex is a free vector ``c``, so ``b_i = c - A_i x_s``;
* ``A_{k-1} - A_k = alpha_k C_k`` across boundary ``k``, so every ``A_i``
  follows from ``A_0`` and the multipliers ``alpha``;
* the multipliers are ``alpha = N beta`` with ``N`` a basis of the null space
  of the stacked normals, which makes the cycle close exactly.

The cost compares the states reached from each breakpoint with the samples
of its subset, using truncated Taylor series for the exponentials.  The
contraction inequalities ``A_i^T Q + Q A_i < 0`` enter as eigenvalue hinge
penalties whose weight grows until they are inactive, the breakpoint-reach
equalities as a fixed-weight quadratic penalty, and each round is solved by
trust-region Gauss-Newton on the stacked residual with JAX Jacobians.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import least_squares

from ._jax import jax, jnp, lbfgs, pos_part_sq, sym_eigvals
from .geometry import ConicPartition, SampleSegmentation, SampleSet
from .matfun import (
    SquareWave,
    affine_reach,
    check_definite,
    expm_taylor,
    phi_reference,
    expm_reference,
    phi_taylor,
    wave_segments,
)
from .sim import SwitchingAffineSystem

log = logging.getLogger(__name__)

__all__ = [
    "SynthesisOptions",
    "SynthesisProblem",
    "SynthesisResult",
    "ContractivityCertificate",
    "ContinuityResidual",
    "region_cost",
    "continuity_residual",
    "boundary_reach_residual",
    "build_problem",
    "initialize_guess",
    "objective_function",
    "decode",
    "solve",
    "certify",
    "posthoc_objective",
]


@dataclass(frozen=True)
class SynthesisOptions:
    """Solver settings.

    Attributes
    ----------
    enforce_singular_bound : float or None
        When set to ``beta``, adds ``A_i^T A_i < beta I`` as a penalty.
    weights : tuple
        ``(w_cost, w_cont, w_reach, w_lmi)``.  ``w_cont`` weighs the field
        continuity residual, which is identically zero in this
        parametrization and is kept for reporting only.
    b_min : float
        Lower bound on ``||B||``.
    delta_lmi : float
        Eigenvalue margin requested in ``A_i^T Q + Q A_i + delta I < 0``.
    restarts : int
        Number of starts; start 0 is the unperturbed initial guess.
    seed : int
    outer_rounds : int
        Penalty rounds after the first one.  The hinge weight grows tenfold
        after each round that ends with an active hinge.
    inner_maxiter : int
        Residual evaluations allowed per round.
    init_margin : float
        Contraction margin of the initial guess with ``Q = I``.
    """

    enforce_singular_bound: Optional[float] = None
    weights: Tuple[float, float, float, float] = (1.0, 1e3, 1e2, 1e3)
    b_min: float = 0.1
    delta_lmi: float = 1e-4
    restarts: int = 1
    seed: int = 0
    outer_rounds: int = 5
    inner_maxiter: int = 500
    init_margin: float = 0.5
    q_eps: float = 1e-6


@dataclass
class SynthesisProblem:
    """Data of one synthesis run.

    Use :func:`build_problem` to construct it from samples and a partition.
    """

    partition: ConicPartition
    segmentation: SampleSegmentation
    samples: SampleSet
    taylor_order: int = 9
    wave: Optional[SquareWave] = None
    options: SynthesisOptions = field(default_factory=SynthesisOptions)

    def __post_init__(self):
        if self.wave is None:
            self.wave = SquareWave(self.samples.period_T)
        if abs(self.wave.period_T - self.samples.period_T) > 1e-12 * self.samples.period_T:
            raise ValueError("wave period must equal the sample period")
        if not 1 <= self.taylor_order <= 30:
            raise ValueError("taylor order must lie in [1, 30]")
        if np.max(self.segmentation.dwell_intervals) >= 1.0:
            raise ValueError("every dwell interval must be below 1")
        if self.segmentation.breakpoint_indices.size != self.partition.n_p:
            raise ValueError("breakpoint count differs from the partition size")


@dataclass
class ContinuityResidual:
    """Continuity residuals per boundary (boundary ``k`` between regions ``k-1`` and ``k``)."""

    matrix: np.ndarray
    offset: np.ndarray
    field_mismatch: np.ndarray

    @property
    def max(self) -> float:
        return float(max(np.max(self.matrix), np.max(self.offset), np.max(self.field_mismatch)))


@dataclass
class ContractivityCertificate:
    """Common Lyapunov matrix with per-region margins and continuity checks."""

    Q: np.ndarray
    per_region_lmi_margins: np.ndarray
    continuity_residuals: np.ndarray
    verdict: bool
    tol_lmi: float
    tol_cont: float


@dataclass
class SynthesisResult:
    """Outcome of :func:`solve`.

    ``objective_value`` and the residuals are recomputed with the reference
    exponential; ``objective_taylor`` is the optimizer's surrogate value.
    """

    system: SwitchingAffineSystem
    Q: np.ndarray
    alpha: np.ndarray
    objective_value: float
    objective_taylor: float
    constraint_residuals: Dict[str, float]
    certificate: ContractivityCertificate
    theta: np.ndarray
    restart: int
    log: List[Dict[str, float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Single-region kernels (numpy)
# ---------------------------------------------------------------------------

def _reach(A, b, B, wave, x0, t0, t1, order):
    backend = "reference" if order is None else "taylor"
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    Bv = np.asarray(B, float).reshape(-1)
    x = np.asarray(x0, float).copy()
    for tau, u in wave_segments(wave, t0, t1):
        if backend == "taylor":
            E, Phi = expm_taylor(A, tau, order), phi_taylor(A, tau, order)
        else:
            E, Phi = expm_reference(A, tau), phi_reference(A, tau)
        x = E @ x + Phi @ (b + Bv * u)
    return x


def region_cost(A_i, b_i, B, wave: SquareWave, points, times, taylor_order: Optional[int] = 9
                ) -> float:
    """Squared distance between reached states and the samples of one subset.

    The state is advanced from ``points[0]`` at absolute time ``times[0]``
    to every later timestamp of the subset under the square-wave input.
    ``taylor_order=None`` uses the reference exponential.
    """
    P = np.atleast_2d(np.asarray(points, float))
    ts = np.asarray(times, float).reshape(-1)
    J = 0.0
    for j in range(1, P.shape[0]):
        x = _reach(A_i, b_i, B, wave, P[0], ts[0], ts[j], taylor_order)
        J += float(np.sum((x - P[j]) ** 2))
    return J


def boundary_reach_residual(A_i, b_i, B, wave: SquareWave, x_start, x_next, dwell: float,
                            t_start: float = 0.0, taylor_order: Optional[int] = None) -> float:
    """Distance between the state reached after ``dwell`` and the next breakpoint."""
    x = _reach(A_i, b_i, B, wave, x_start, t_start, t_start + dwell, taylor_order)
    return float(np.linalg.norm(x - np.asarray(x_next, float)))


def continuity_residual(A, b, alpha, partition: ConicPartition, sign: float = -1.0,
                        n_points: int = 100, radius: float = 10.0) -> ContinuityResidual:
    """Continuity residuals across the boundaries of a partition.

    Boundary ``k`` separates regions ``k - 1`` and ``k``.  The structural
    residuals are ``||(A_{k-1} - A_k) - alpha_k C_k||`` and
    ``||(b_{k-1} - b_k) - sign * alpha_k d_k||``; ``sign = -1`` is the value
    forced by field continuity on ``C_k x = d_k``.  The field mismatch is the
    largest jump of the vector field over test points on the boundary face,
    and does not depend on ``alpha`` or ``sign``.
    """
    from .track import _boundary_points

    A = np.asarray(A, float)
    b = np.asarray(b, float)
    alpha = np.asarray(alpha, float)
    n_p = partition.n_p
    Cm, dv = partition.C, partition.d
    mat = np.zeros(n_p)
    off = np.zeros(n_p)
    fm = np.zeros(n_p)
    rng = np.random.default_rng(0)
    for k in range(n_p):
        dA = A[k - 1] - A[k]
        db = b[k - 1] - b[k]
        mat[k] = np.linalg.norm(dA - np.outer(alpha[k], Cm[k]))
        off[k] = np.linalg.norm(db - sign * alpha[k] * dv[k])
        X = _boundary_points(partition, k, n_points, radius, rng)
        fm[k] = np.max(np.linalg.norm(X @ dA.T + db, axis=1))
    return ContinuityResidual(mat, off, fm)


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

def build_problem(samples: SampleSet, partition: ConicPartition,
                  segmentation: SampleSegmentation, taylor_order: int = 9,
                  wave: Optional[SquareWave] = None,
                  options: Optional[SynthesisOptions] = None) -> SynthesisProblem:
    return SynthesisProblem(partition, segmentation, samples, taylor_order, wave,
                            options or SynthesisOptions())


@dataclass
class _Rows:
    region: np.ndarray
    start: np.ndarray
    durations: np.ndarray
    signs: np.ndarray
    target: np.ndarray
    is_reach: np.ndarray
    start_time: np.ndarray


def _assemble_rows(problem: SynthesisProblem) -> _Rows:
    S = problem.samples
    seg = problem.segmentation
    xs = problem.partition.center
    T = S.period_T
    t_ext = np.append(S.times, S.times[0] + T)
    P_ext = np.vstack([S.points, S.points[:1]])
    rows = []
    n_p = seg.breakpoint_indices.size
    for i, sub in enumerate(seg.subsets):
        k0 = sub[0]
        nxt = seg.breakpoint_indices[i + 1] if i + 1 < n_p else S.n_F
        for j in list(sub[1:]) + [nxt]:
            segs = wave_segments(problem.wave, t_ext[k0], t_ext[j])
            rows.append((i, P_ext[k0] - xs, segs, P_ext[j] - xs, j == nxt, t_ext[k0]))
    ms = max(len(r[2]) for r in rows)
    m = len(rows)
    n = S.n_x
    out = _Rows(np.zeros(m, int), np.zeros((m, n)), np.zeros((m, ms)), np.zeros((m, ms)),
                np.zeros((m, n)), np.zeros(m, bool), np.zeros(m))
    for r, (i, x0, segs, tg, isr, t0) in enumerate(rows):
        out.region[r] = i
        out.start[r] = x0
        out.target[r] = tg
        out.is_reach[r] = isr
        out.start_time[r] = t0
        for q, (tau, u) in enumerate(segs):
            out.durations[r, q] = tau
            out.signs[r, q] = u
    return out


class _Layout:
    """Decision vector ``theta = [A_0, c, B, beta, L]``."""

    def __init__(self, partition: ConicPartition):
        self.n = partition.n_x
        self.n_p = partition.n_p
        self.C = partition.C
        self.N = null_space(self.C.T)  # (n_p, n_b)
        self.n_b = self.N.shape[1]
        n = self.n
        self.tril = np.tril_indices(n)
        sizes = [n * n, n, n, self.n_b * n, len(self.tril[0])]
        self.offsets = np.cumsum([0] + sizes)
        self.size = int(self.offsets[-1])

    def split(self, th):
        o = self.offsets
        n = self.n
        A0 = th[o[0]:o[1]].reshape(n, n)
        c = th[o[1]:o[2]]
        Bv = th[o[2]:o[3]]
        beta = th[o[3]:o[4]].reshape(self.n_b, n)
        Lp = th[o[4]:o[5]]
        return A0, c, Bv, beta, Lp

    def matrices(self, th, q_eps=1e-6):
        """Return ``(A, c, B, alpha, Q)`` with JAX arrays."""
        A0, c, Bv, beta, Lp = self.split(th)
        alpha = jnp.asarray(self.N) @ beta  # (n_p, n)
        incr = jnp.einsum("kq,kr->kqr", alpha, jnp.asarray(self.C))
        cum = jnp.cumsum(incr.at[0].set(0.0), axis=0)
        A = A0[None] - cum
        L = jnp.zeros((self.n, self.n)).at[self.tril].set(Lp)
        Q = L @ L.T + q_eps * jnp.eye(self.n)
        Q = self.n * Q / jnp.trace(Q)
        return A, c, Bv, alpha, Q

    def pack(self, A0, c, Bv, beta, Lp):
        return np.concatenate([np.ravel(A0), np.ravel(c), np.ravel(Bv), np.ravel(beta),
                               np.ravel(Lp)])


def _taylor_pair(A, t, order):
    """Truncated ``exp(A t)`` and ``int_0^t exp(A s) ds`` in Horner form."""
    n = A.shape[0]
    eye = jnp.eye(n)
    acc = eye
    for j in range(order, 1, -1):
        acc = eye + (A @ acc) * (t / j)
    Phi = acc * t
    return eye + A @ Phi, Phi


def _predictor(problem: SynthesisProblem):
    """``theta -> (residuals, A, c, B, alpha, Q)`` over all rows."""
    lay = _Layout(problem.partition)
    rows = _assemble_rows(problem)
    order = problem.taylor_order
    q_eps = problem.options.q_eps
    R = jnp.asarray(rows.region)
    S0 = jnp.asarray(rows.start)
    D = jnp.asarray(rows.durations)
    SG = jnp.asarray(rows.signs)
    TG = jnp.asarray(rows.target)
    ms = rows.durations.shape[1]

    def predict(th):
        A, c, Bv, alpha, Q = lay.matrices(th, q_eps)

        def one(r, x0, dur, sg):
            Ar = A[r]
            x = x0
            for m in range(ms):
                E, Phi = _taylor_pair(Ar, dur[m], order)
                x = E @ x + Phi @ (c + Bv * sg[m])
            return x

        return jax.vmap(one)(R, S0, D, SG) - TG, A, c, Bv, alpha, Q

    return predict, lay, rows


def objective_function(problem: SynthesisProblem):
    """JAX functions of the decision vector.

    Returns
    -------
    parts : callable
        ``theta -> (cost, reach_residuals, lmi_matrices, B, A)``.
    layout : _Layout
    rows : _Rows
    """
    predict, lay, rows = _predictor(problem)
    reach_idx = np.nonzero(rows.is_reach)[0]
    cost_mask = jnp.asarray((~rows.is_reach).astype(float))

    def parts(th):
        res, A, c, Bv, alpha, Q = predict(th)
        cost = jnp.sum(cost_mask[:, None] * res ** 2)
        reach = res[reach_idx].reshape(-1)
        lmi = jnp.einsum("iqr,rs->iqs", jnp.transpose(A, (0, 2, 1)), Q)
        lmi = lmi + jnp.transpose(lmi, (0, 2, 1))
        return cost, reach, lmi, Bv, A

    return parts, lay, rows


def decode(problem: SynthesisProblem, theta) -> Tuple[SwitchingAffineSystem, np.ndarray, np.ndarray]:
    """System, common ``Q`` and multipliers ``alpha`` for a decision vector."""
    lay = _Layout(problem.partition)
    A, c, Bv, alpha, Q = (np.asarray(v) for v in lay.matrices(jnp.asarray(theta),
                                                              problem.options.q_eps))
    xs = problem.partition.center
    b = c[None, :] - np.einsum("iqr,r->iq", A, xs)
    system = SwitchingAffineSystem(problem.partition, A, b, Bv[:, None], problem.wave)
    return system, 0.5 * (Q + Q.T), alpha


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _derivatives(S: SampleSet, wave: SquareWave, width: int = 5) -> np.ndarray:
    """Derivative estimates that do not straddle a jump of the input.

    At sample ``k`` the state is differentiated through the interpolating
    polynomial of up to ``width`` cyclically consecutive samples, centred on
    ``k`` where possible.  Only samples in the closed constant-input piece
    that starts at or before ``t_k`` are used, so the estimate belongs to the
    input value ``u(t_k)``.  With three interior samples this is the usual
    central difference.
    """
    P = S.points
    t = S.times
    T = S.period_T
    n = S.n_F
    half = 0.5 * wave.period_T
    reach = width - 1
    out = np.empty_like(P)
    for k in range(n):
        p = math.floor(t[k] / half + 1e-9)
        lo_t, hi_t = p * half - 1e-9 * half, (p + 1) * half + 1e-9 * half

        def time_of(j):
            q, r = divmod(k + j, n)
            return t[r] + q * T

        left = 0
        while left > -reach and lo_t <= time_of(left - 1) <= hi_t:
            left -= 1
        right = 0
        while right < reach and lo_t <= time_of(right + 1) <= hi_t:
            right += 1
        lo = max(left, min(-(reach // 2), right - reach))
        hi = min(right, lo + reach)
        offs = np.arange(lo, hi + 1) if hi > lo else np.array([-1, 1])
        tau = np.array([time_of(j) for j in offs]) - t[k]
        h = np.max(np.abs(tau))
        V = np.vander(tau / h, offs.size, increasing=True)
        coef = np.linalg.solve(V, P[np.mod(k + offs, n)])
        out[k] = coef[1] / h
    return out


def initialize_guess(problem: SynthesisProblem) -> Tuple[np.ndarray, bool]:
    """Initial decision vector from a least-squares fit to derivative estimates.

    The reduced parametrization is linear in ``(A_0, c, B, beta)``, so the
    fit ``x' ~ A_i (x - x_s) + c + B u`` over all samples is one linear least
    squares problem.  All ``A_i`` are then shifted by a common multiple of the
    identity, which keeps continuity, until ``Q = I`` certifies contraction
    with margin ``options.init_margin``.

    Returns
    -------
    theta : ndarray
    fallback : bool
        True when the regression was degenerate and the default guess
        ``A_i = -I``, ``b_i = x_s`` was used instead.
    """
    from .geometry import locate_all

    S = problem.samples
    part = problem.partition
    lay = _Layout(part)
    n = lay.n
    xs = part.center
    Lp = np.eye(n)[lay.tril]
    reg = locate_all(part, S.points)
    dX = _derivatives(S, problem.wave)
    # Input on the piece that starts at or before each sample, as in _derivatives.
    half = 0.5 * problem.wave.period_T
    u = np.array([problem.wave.first_value * (-1.0) ** math.floor(t / half + 1e-9)
                  for t in S.times])

    # Columns of the regression: derivative of the field with respect to theta.
    def field_fn(th, y, r, uu):
        A, c, Bv, _, _ = lay.matrices(th)
        return A[r] @ y + c + Bv * uu

    n_lin = lay.offsets[4]
    th0 = np.zeros(lay.size)
    th0[lay.offsets[4]:] = Lp
    Jf = jax.jacfwd(field_fn)
    rows_X, rows_y = [], []
    for k in range(S.n_F):
        Jk = np.asarray(Jf(jnp.asarray(th0), jnp.asarray(S.points[k] - xs), int(reg[k]), u[k]))
        rows_X.append(Jk[:, :n_lin])
        rows_y.append(dX[k])
    X = np.vstack(rows_X)
    y = np.concatenate(rows_y)
    sol, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    fallback = (not np.all(np.isfinite(sol))) or rank < n_lin or np.allclose(dX, 0.0)
    if fallback:
        A0 = -np.eye(n)
        beta = np.zeros((lay.n_b, n))
        return lay.pack(A0, np.zeros(n), np.full(n, problem.options.b_min), beta, Lp), True
    th = th0.copy()
    th[:n_lin] = sol
    A, c, Bv, _, _ = (np.asarray(v) for v in lay.matrices(jnp.asarray(th)))
    kappa = max(np.linalg.eigvalsh(0.5 * (Ai + Ai.T))[-1] for Ai in A) + problem.options.init_margin
    kappa = max(kappa, 0.0)
    th[:n * n] = (A[0] - kappa * np.eye(n)).ravel()
    if np.linalg.norm(Bv) < problem.options.b_min:
        th[lay.offsets[2]:lay.offsets[3]] = Bv + problem.options.b_min / math.sqrt(n)
    return th, False


# ---------------------------------------------------------------------------
# Certificate
# ---------------------------------------------------------------------------

def certify(system: SwitchingAffineSystem, Q=None, tol_lmi: float = 1e-8,
            tol_cont: float = 1e-8, n_points: int = 100) -> ContractivityCertificate:
    """Contractivity certificate for a switching affine system.

    The margins are the largest eigenvalues of ``A_i^T Q + Q A_i``.  When
    ``Q`` is not given, it is searched as ``L L^T + eps I`` by descending a
    spectral penalty on the margins.  Field continuity is checked on
    ``n_points`` points of every boundary face, relative to the size of the
    field there.
    """
    from .track import verify_continuity

    A = system.A
    n = system.n_x
    if Q is None:
        Q = _search_common_Q(A)
    Q = np.asarray(Q, float)
    Q = 0.5 * (Q + Q.T)
    margins = np.array([check_definite(Ai.T @ Q + Q @ Ai, "neg", tol_lmi).extreme_eigenvalue
                        for Ai in A])
    radius = 10.0 * (1.0 + np.linalg.norm(system.partition.center))
    cont = verify_continuity(system, None, n_points=n_points, radius=radius)
    scale = 1.0 + max(np.linalg.norm(Ai, 2) for Ai in A) * radius + np.max(np.abs(system.b))
    cont_rel = cont.mismatch / scale
    q_ok = check_definite(Q, "pos", 0.0).verdict
    verdict = bool(q_ok and np.all(margins < -tol_lmi) and np.all(cont_rel < tol_cont))
    return ContractivityCertificate(Q, margins, cont_rel, verdict, tol_lmi, tol_cont)


def _search_common_Q(A: np.ndarray) -> np.ndarray:
    n = A.shape[1]
    tril = np.tril_indices(n)
    Aj = jnp.asarray(A)

    def pen(l, gamma):
        L = jnp.zeros((n, n)).at[tril].set(l)
        Q = L @ L.T + 1e-6 * jnp.eye(n)
        Q = n * Q / jnp.trace(Q)
        tot = 0.0
        for Ai in Aj:
            tot = tot + pos_part_sq(Ai.T @ Q + Q @ Ai + gamma * jnp.eye(n))
        return tot

    vg = jax.jit(jax.value_and_grad(pen))
    l = np.eye(n)[tril]
    for gamma in (1e-3, 1e-1, 1.0):
        l = lbfgs(lambda v: vg(v, gamma), l, maxiter=500).x
    L = np.zeros((n, n))
    L[tril] = l
    Q = L @ L.T + 1e-6 * np.eye(n)
    return n * Q / np.trace(Q)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def posthoc_objective(problem: SynthesisProblem, system: SwitchingAffineSystem
                      ) -> Tuple[float, np.ndarray]:
    """Cost and breakpoint-reach residuals with the reference exponential."""
    S = problem.samples
    seg = problem.segmentation
    T = S.period_T
    t_ext = np.append(S.times, S.times[0] + T)
    P_ext = np.vstack([S.points, S.points[:1]])
    Bv = system.B[:, 0]
    J = 0.0
    reach = []
    n_p = seg.breakpoint_indices.size
    for i, sub in enumerate(seg.subsets):
        J += region_cost(system.A[i], system.b[i], Bv, problem.wave, S.points[sub],
                         S.times[sub], None)
        nxt = seg.breakpoint_indices[i + 1] if i + 1 < n_p else S.n_F
        reach.append(boundary_reach_residual(system.A[i], system.b[i], Bv, problem.wave,
                                             P_ext[sub[0]], P_ext[nxt],
                                             t_ext[nxt] - t_ext[sub[0]], t_ext[sub[0]]))
    return float(J), np.array(reach)


def _run_one(problem: SynthesisProblem, th0: np.ndarray, restart: int):
    """Penalty rounds of trust-region Gauss-Newton on a residual vector.

    The residual stacks the sample mismatches (weight ``w_cost``), the
    breakpoint-reach mismatches (fixed weight ``w_reach``), the hinges
    ``max(0, lambda(A_i^T Q + Q A_i) + delta)``, the hinge keeping
    ``||B|| >= b_min`` and, optionally, the singular-value hinges
    ``max(0, lambda(A_i^T A_i) - beta + delta)``.  The hinge weight grows
    tenfold after every round in which a hinge is still active.  Each log
    record carries the penalized merit ``0.5 ||r||^2`` at the start and the
    end of its round.
    """
    opt = problem.options
    w_cost, _, w_reach, w_lmi = opt.weights
    beta = opt.enforce_singular_bound
    delta = opt.delta_lmi
    predict, lay, rows = _predictor(problem)
    reach_idx = np.nonzero(rows.is_reach)[0]
    cost_idx = np.nonzero(~rows.is_reach)[0]
    sc, sr = math.sqrt(w_cost), math.sqrt(w_reach)

    def resid(th, wl):
        res, A, c, Bv, alpha, Q = predict(th)
        sw = jnp.sqrt(wl)
        out = [sc * res[cost_idx].reshape(-1), sr * res[reach_idx].reshape(-1)]
        for i in range(lay.n_p):
            out.append(sw * jnp.maximum(0.0, sym_eigvals(A[i].T @ Q + Q @ A[i]) + delta))
            if beta is not None:
                out.append(sw * jnp.maximum(0.0, sym_eigvals(A[i].T @ A[i]) - beta + delta))
        out.append(sw * jnp.maximum(0.0, opt.b_min ** 2 - Bv @ Bv)[None])
        return jnp.concatenate(out)

    fr = jax.jit(resid)
    jr = jax.jit(jax.jacfwd(resid))
    parts = jax.jit(objective_function(problem)[0])
    th = np.asarray(th0, float)
    wl = float(w_lmi)
    history = []
    for rnd in range(opt.outer_rounds + 1):
        merit0 = 0.5 * float(np.sum(np.asarray(fr(th, wl)) ** 2))
        try:
            res = least_squares(lambda v: np.asarray(fr(v, wl)), th,
                                jac=lambda v: np.asarray(jr(v, wl)), method="trf",
                                x_scale="jac", max_nfev=opt.inner_maxiter,
                                xtol=1e-12, ftol=1e-12, gtol=1e-12)
        except ValueError as exc:  # non-finite residuals at the start point
            log.warning("restart %d round %d aborted: %s", restart, rnd, exc)
            break
        if np.all(np.isfinite(res.x)):
            th = res.x
        cost, reach, lmi, Bv, A = (np.asarray(v) for v in parts(th))
        h = float(np.max(np.abs(reach))) if reach.size else 0.0
        lmi_max = max(np.linalg.eigvalsh(M)[-1] for M in lmi)
        history.append({"restart": restart, "iteration": rnd, "objective": float(cost),
                        "max_reach": h, "max_lmi_eig": float(lmi_max), "w_lmi": wl,
                        "merit_start": merit0, "merit": float(res.cost),
                        "evaluations": int(res.nfev)})
        log.info("restart %d round %d objective %.6g reach %.3g lmi %.3g nfev %d", restart,
                 rnd, cost, h, lmi_max, res.nfev)
        ok = lmi_max < -0.5 * delta and float(Bv @ Bv) >= opt.b_min ** 2 * (1 - 1e-9)
        if beta is not None:
            ok = ok and max(np.linalg.eigvalsh(Ai.T @ Ai)[-1] for Ai in A) < beta
        if not ok:
            wl = min(wl * 10.0, 1e12)
    return th, history


def solve(problem: SynthesisProblem) -> SynthesisResult:
    """Fit a contractive switching affine system to the samples.

    Runs ``options.restarts`` starts from the initial guess (perturbed for
    starts after the first) and returns the best one, ranking a passing
    certificate first and the reference-exponential objective second.
    """
    opt = problem.options
    parts, lay, _ = objective_function(problem)
    th0, _ = initialize_guess(problem)
    rng = np.random.default_rng(opt.seed)
    best = None
    all_logs = []
    for r in range(max(1, opt.restarts)):
        start = th0.copy()
        if r > 0:
            start[: lay.offsets[4]] += 0.05 * rng.standard_normal(lay.offsets[4]) * (
                1.0 + np.abs(start[: lay.offsets[4]]))
        th, hist = _run_one(problem, start, r)
        all_logs.extend(hist)
        system, Q, alpha = decode(problem, th)
        cert = certify(system, Q)
        J, reach = posthoc_objective(problem, system)
        key = (not cert.verdict, J, r)
        if best is None or key < best[0]:
            best = (key, th, system, Q, alpha, cert, J, reach, r)
    _, th, system, Q, alpha, cert, J, reach, r = best
    cost_t, reach_t, *_ = (np.asarray(v) for v in jax.jit(parts)(th))
    cont = continuity_residual(system.A, system.b, alpha, problem.partition)
    resid = {
        "continuity": cont.max,
        "boundary_reach": float(np.max(reach)),
        "boundary_reach_taylor": float(np.max(np.abs(reach_t))) if reach_t.size else 0.0,
        "lmi_margin": float(np.max(cert.per_region_lmi_margins)),
        "singular_margin": float(max(np.linalg.eigvalsh(Ai.T @ Ai)[-1] for Ai in system.A)),
        "B_norm": float(np.linalg.norm(system.B)),
    }
    return SynthesisResult(system, Q, alpha, J, float(cost_t), resid, cert, th, r, all_logs)
