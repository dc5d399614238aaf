"""Reference tracking for periodic switching affine systems.

The controller ``u_c = u_r + K_i x_c + w_i - (K_j x_r + w_j)`` uses the
region ``i`` of the controlled state and ``j`` of the reference.  A tracking
certificate holds one Lyapunov matrix per region together with the scalars
``rho``, ``sigma`` and ``T_min``; :func:`verify_certificate` checks the
matrix inequalities and the dwell condition ``rho exp(-sigma T_min) < 1``
that make ``V = ||x_c - x_r||^2_{Q_j}`` decay over each switch cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh

from .geometry import ConicPartition, _ray_direction, locate_all
from .sim import SwitchingAffineSystem, Trajectory, integrate_hybrid

__all__ = [
    "TrackingController",
    "TrackingCertificate",
    "ContinuityReport",
    "Assumption2Report",
    "CertificateInputError",
    "ControllerSynthesisError",
    "control_input",
    "closed_loop",
    "verify_continuity",
    "verify_certificate",
    "minimal_rho",
    "synthesize_controller",
    "lyapunov_value",
    "check_assumption2",
    "cosimulate",
    "lyapunov_chain",
]


class CertificateInputError(ValueError):
    """Raised for malformed certificate matrices."""


class ControllerSynthesisError(RuntimeError):
    """Raised when the heuristic controller search finds nothing."""


@dataclass(frozen=True)
class TrackingController:
    """Per-region gains ``K_i`` (n_u x n_x) and offsets ``w_i`` (n_u)."""

    K: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=float)
        w = np.asarray(self.w, dtype=float)
        if K.ndim != 3 or w.ndim != 2 or K.shape[:2] != w.shape:
            raise ValueError("K must be (n_p, n_u, n_x) and w must be (n_p, n_u)")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "w", w)

    @property
    def n_p(self) -> int:
        return self.K.shape[0]

    @classmethod
    def zero(cls, n_p: int, n_u: int, n_x: int) -> "TrackingController":
        return cls(np.zeros((n_p, n_u, n_x)), np.zeros((n_p, n_u)))


@dataclass
class TrackingCertificate:
    """Multiple-Lyapunov tracking certificate and its verification results.

    Attributes
    ----------
    Q : ndarray, shape (n_p, n_x, n_x)
    rho, sigma, T_min : float
    z : int
        Largest cyclic index distance between the controlled and reference
        regions covered by the decay conditions.
    decay_margins : ndarray, shape (n_p, 2 z + 1)
        Largest eigenvalue of ``Ahat_k^T Q_i + Q_i Ahat_k + sigma Q_i`` for
        ``k = i - z, ..., i + z``.
    ordering_margins : ndarray, shape (n_p, 2)
        Smallest eigenvalue of ``rho Q_{i+1} - Q_i`` and ``rho Q_i - Q_{i+1}``.
    dwell_slack : float
        ``rho exp(-sigma T_min)``.
    continuity_residuals : ndarray
        Field mismatch per boundary.
    """

    Q: np.ndarray
    rho: float
    sigma: float
    T_min: float
    z: int = 1
    decay_margins: Optional[np.ndarray] = None
    ordering_margins: Optional[np.ndarray] = None
    dwell_slack: Optional[float] = None
    continuity_residuals: Optional[np.ndarray] = None
    verdict: Optional[bool] = None
    failures: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)


@dataclass
class ContinuityReport:
    """Closed-loop field mismatch across each boundary.

    ``mismatch[i]`` is the largest ``||(Ahat_{i-1} - Ahat_i) x + bhat_{i-1}
    - bhat_i||`` over test points ``x`` on boundary ``i``; ``structural[i]``
    is the part of ``Ahat_{i-1} - Ahat_i`` not spanned by ``C_i``.
    """

    mismatch: np.ndarray
    structural: np.ndarray

    @property
    def max_mismatch(self) -> float:
        return float(np.max(self.mismatch))


@dataclass
class Assumption2Report:
    distances: np.ndarray
    max_distance: int
    first_violation_time: Optional[float]


def control_input(ctrl: TrackingController, partition: ConicPartition, x_c, x_r, u_r) -> np.ndarray:
    """Tracking control ``u_r + K_i x_c + w_i - (K_j x_r + w_j)``."""
    x_c = np.asarray(x_c, dtype=float)
    x_r = np.asarray(x_r, dtype=float)
    i, j = locate_all(partition, np.vstack([x_c, x_r]))
    return np.asarray(u_r, float) + ((ctrl.K[i] @ x_c + ctrl.w[i]) - (ctrl.K[j] @ x_r + ctrl.w[j]))


def closed_loop(system: SwitchingAffineSystem, ctrl: TrackingController) -> SwitchingAffineSystem:
    """Per-region closed loop ``Ahat_i = A_i + B K_i``, ``bhat_i = b_i + B w_i``."""
    if ctrl.n_p != system.n_p:
        raise ValueError("controller and system have different region counts")
    Ah = system.A + np.einsum("xu,iuy->ixy", system.B, ctrl.K)
    bh = system.b + ctrl.w @ system.B.T
    return SwitchingAffineSystem(system.partition, Ah, bh, system.B, system.input)


def _boundary_points(partition: ConicPartition, k: int, n_points: int, radius: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Points on the face that separates regions ``k - 1`` and ``k``."""
    U = partition.projection_basis()
    ray = U @ _ray_direction(partition, k)
    ray /= np.linalg.norm(ray)
    r = np.linspace(0.0, radius, n_points)
    X = partition.center + r[:, None] * ray
    D = partition.apex_directions()
    if D.shape[0]:
        X = X + rng.uniform(-radius, radius, size=(n_points, D.shape[0])) @ D
    return X


def verify_continuity(system: SwitchingAffineSystem, ctrl: Optional[TrackingController] = None,
                      partition: Optional[ConicPartition] = None, n_points: int = 100,
                      radius: float = 10.0, seed: int = 0) -> ContinuityReport:
    """Check that the closed-loop field is continuous across every boundary.

    Test points lie on the face shared by regions ``i - 1`` and ``i`` at
    distances up to ``radius`` from the apex.
    """
    part = system.partition if partition is None else partition
    cl = system if ctrl is None else closed_loop(system, ctrl)
    rng = np.random.default_rng(seed)
    n_p = part.n_p
    mism = np.zeros(n_p)
    struct = np.zeros(n_p)
    for k in range(n_p):
        X = _boundary_points(part, k, n_points, radius, rng)
        dA = cl.A[k - 1] - cl.A[k]
        db = cl.b[k - 1] - cl.b[k]
        mism[k] = np.max(np.linalg.norm(X @ dA.T + db, axis=1))
        c = part.boundaries[k].unit_normal
        struct[k] = np.linalg.norm(dA - np.outer(dA @ c, c), 2)
    return ContinuityReport(mism, struct)


def minimal_rho(Q: np.ndarray) -> float:
    """Smallest ``rho`` with ``Q_i <= rho Q_j`` for all cyclically adjacent pairs.

    Computed from the largest generalized eigenvalue of each pair.
    """
    n_p = Q.shape[0]
    best = 0.0
    for i in range(n_p):
        for j in ((i - 1) % n_p, (i + 1) % n_p):
            best = max(best, float(eigh(Q[i], Q[j], eigvals_only=True)[-1]))
    return best


def _validate_Q(Q: np.ndarray, n_p: int, n_x: int):
    if Q.shape != (n_p, n_x, n_x):
        raise CertificateInputError(f"expected Q of shape {(n_p, n_x, n_x)}, got {Q.shape}")
    for i, Qi in enumerate(Q):
        if not np.allclose(Qi, Qi.T, atol=1e-12 * (1 + np.abs(Qi).max())):
            raise CertificateInputError(f"invalid certificate input: Q_{i} is not symmetric")
        if np.linalg.eigvalsh(Qi)[0] <= 0:
            raise CertificateInputError(f"invalid certificate input: Q_{i} is not positive definite")


def verify_certificate(system: SwitchingAffineSystem, ctrl: TrackingController,
                       cert: TrackingCertificate, tol_rel: float = 1e-6,
                       tol_scalar: float = 1e-6, tol_continuity: float = 1e-6,
                       continuity_radius: float = 10.0) -> TrackingCertificate:
    """Check every condition of the multiple-Lyapunov tracking certificate.

    For every region ``i`` and every ``k`` within cyclic distance ``z``:
    ``Ahat_k^T Q_i + Q_i Ahat_k + sigma Q_i`` must be negative definite with
    slack ``tol_rel (1 + ||Q_i||)``.  Adjacent matrices must satisfy
    ``Q_i <= rho Q_{i+1}`` and ``Q_{i+1} <= rho Q_i``, and the dwell
    condition ``rho exp(-sigma T_min) < 1 - tol_scalar`` must hold.  The
    closed-loop field must be continuous up to ``tol_continuity``.

    Returns
    -------
    TrackingCertificate
        A copy of ``cert`` with margins, verdict and failed conditions.
    """
    Q = np.asarray(cert.Q, dtype=float)
    n_p, n_x = system.n_p, system.n_x
    _validate_Q(Q, n_p, n_x)
    z = int(cert.z)
    if z < 0 or 2 * z + 1 > n_p:
        raise CertificateInputError("neighborhood radius z out of range")
    cl = closed_loop(system, ctrl)
    fails = []
    offsets = list(range(-z, z + 1))
    decay = np.zeros((n_p, len(offsets)))
    for i in range(n_p):
        tol_i = tol_rel * (1.0 + np.linalg.norm(Q[i], 2))
        for c, o in enumerate(offsets):
            k = (i + o) % n_p
            S = cl.A[k].T @ Q[i] + Q[i] @ cl.A[k] + cert.sigma * Q[i]
            decay[i, c] = np.linalg.eigvalsh(0.5 * (S + S.T))[-1]
            if not decay[i, c] < -tol_i:
                fails.append(f"decay condition Q_{i + 1} with Ahat_{k + 1}: "
                             f"max eigenvalue {decay[i, c]:.4g}")
    order = np.zeros((n_p, 2))
    for i in range(n_p):
        j = (i + 1) % n_p
        tol_i = tol_rel * (1.0 + max(np.linalg.norm(Q[i], 2), np.linalg.norm(Q[j], 2)))
        order[i, 0] = np.linalg.eigvalsh(cert.rho * Q[j] - Q[i])[0]
        order[i, 1] = np.linalg.eigvalsh(cert.rho * Q[i] - Q[j])[0]
        for c, name in enumerate((f"Q_{i + 1} <= rho Q_{j + 1}", f"Q_{j + 1} <= rho Q_{i + 1}")):
            if order[i, c] < -tol_i:
                fails.append(f"ordering {name}: min eigenvalue {order[i, c]:.4g}")
    slack = float(cert.rho * np.exp(-cert.sigma * cert.T_min))
    if not slack < 1.0 - tol_scalar:
        fails.append(f"dwell condition: rho exp(-sigma T_min) = {slack:.6f} is not below 1")
    cont = verify_continuity(system, ctrl, radius=continuity_radius)
    for k, m in enumerate(cont.mismatch):
        if not m <= tol_continuity:
            fails.append(f"continuity across boundary {k + 1}: mismatch {m:.4g}")
    return replace(cert, Q=Q, decay_margins=decay, ordering_margins=order,
                   dwell_slack=slack, continuity_residuals=cont.mismatch,
                   verdict=not fails, failures=fails)


def lyapunov_value(cert: TrackingCertificate, x_c, x_r, j_ref: int) -> float:
    """``(x_c - x_r)^T Q_j (x_c - x_r)`` with ``j`` the reference region."""
    e = np.asarray(x_c, dtype=float) - np.asarray(x_r, dtype=float)
    return float(e @ np.asarray(cert.Q)[j_ref] @ e)


def _cyclic_distance(a, b, n_p):
    d = np.mod(np.asarray(a) - np.asarray(b), n_p)
    return np.minimum(d, n_p - d)


def check_assumption2(traj_c: Trajectory, traj_r: Trajectory, partition: ConicPartition,
                      z: int = 1) -> Assumption2Report:
    """Cyclic region distance between controlled and reference states over time."""
    if traj_c.times.shape != traj_r.times.shape or not np.allclose(traj_c.times, traj_r.times):
        raise ValueError("trajectories must share a time grid")
    ic = locate_all(partition, traj_c.states)
    ir = locate_all(partition, traj_r.states)
    dist = _cyclic_distance(ic, ir, partition.n_p)
    bad = np.nonzero(dist > z)[0]
    first = float(traj_c.times[bad[0]]) if bad.size else None
    return Assumption2Report(dist, int(dist.max()), first)


def cosimulate(system: SwitchingAffineSystem, ctrl: TrackingController, x_r0, x_c0,
               t_end: float, dt: float = 1e-3, event_tol: float = 1e-9
               ) -> Tuple[Trajectory, Trajectory]:
    """Integrate reference and controlled system on one clock.

    The reference follows ``x_r' = A_j x_r + b_j + B u_r`` and the controlled
    state uses the tracking control law.  Both are stepped together so the
    controller sees synchronized states.

    Returns
    -------
    traj_r, traj_c : Trajectory
    """
    part = system.partition
    n = system.n_x
    Cn = np.array([h.unit_normal for h in part.boundaries])
    dn = np.array([h.unit_offset for h in part.boundaries])

    def mode(y):
        r = locate_all(part, np.vstack([y[:n], y[n:]]))
        return (int(r[0]), int(r[1]))

    def rhs(m, t, y):
        j, i = m  # reference region first, as returned by mode
        xr, xc = y[:n], y[n:]
        ur = system.u(t)
        dxr = system.A[j] @ xr + system.b[j] + system.B @ ur
        # The control law in its literal form, so equal states cancel exactly.
        uc = ur + ((ctrl.K[i] @ xc + ctrl.w[i]) - (ctrl.K[j] @ xr + ctrl.w[j]))
        dxc = system.A[i] @ xc + system.b[i] + system.B @ uc
        return np.concatenate([dxr, dxc])

    def residual(a, b, y):
        worst = 0.0
        for part_idx, x in ((0, y[:n]), (1, y[n:])):
            if a[part_idx] != b[part_idx]:
                worst = max(worst, float(np.min(np.abs(Cn @ x - dn))))
        return worst

    y0 = np.concatenate([np.asarray(x_r0, float), np.asarray(x_c0, float)])
    tr = integrate_hybrid(rhs, mode, residual, y0, t_end, dt, event_tol,
                          input_edges=system.input_edges)
    regions = np.array([list(m) for m in tr.regions])
    sw_r = [s for s in tr.switches if s[1][0] != s[2][0]]
    sw_c = [s for s in tr.switches if s[1][1] != s[2][1]]
    traj_r = Trajectory(tr.times, tr.states[:, :n], regions[:, 0],
                        [(t, a[0], b[0], x[:n]) for t, a, b, x in sw_r],
                        np.array([x[n:] for *_, x in sw_r]).reshape(-1, n))
    traj_c = Trajectory(tr.times, tr.states[:, n:], regions[:, 1],
                        [(t, a[1], b[1], x[n:]) for t, a, b, x in sw_c],
                        np.array([x[:n] for *_, x in sw_c]).reshape(-1, n))
    return traj_r, traj_c


def lyapunov_chain(traj_c: Trajectory, traj_r: Trajectory, cert: TrackingCertificate,
                   partition: ConicPartition, z: int = 1, floor: float = 1e-10):
    """Lyapunov values at reference switches and per-cycle contraction factors.

    The value ``V = ||x_c - x_r||^2_{Q_j}`` is taken just after every switch
    of the reference (with ``j`` the new reference region).  Factor ``k`` is
    ``V_k / V_{k-1}`` between consecutive switches.  Only cycles that start
    above ``floor`` times the initial value, and during which the controlled
    and reference regions stay within distance ``z``, are returned.

    Returns
    -------
    times : ndarray
        End time of each retained cycle.
    factors : ndarray
    """
    n_p = partition.n_p
    sw = [(t, b, xr) for t, a, b, xr in traj_r.switches]
    if len(sw) < 2:
        return np.array([]), np.array([])
    if traj_r.partner_at_switch is not None and len(traj_r.partner_at_switch) == len(sw):
        xc_at = traj_r.partner_at_switch
    else:
        xc_at = np.column_stack([np.interp([s[0] for s in sw], traj_c.times, traj_c.states[:, q])
                                 for q in range(traj_c.states.shape[1])])
    V = np.array([lyapunov_value(cert, xc_at[k], sw[k][2], sw[k][1]) for k in range(len(sw))])
    e0 = traj_c.states[0] - traj_r.states[0]
    j0 = int(locate_all(partition, traj_r.states[:1])[0])
    V0 = float(e0 @ cert.Q[j0] @ e0)
    ic = locate_all(partition, traj_c.states)
    ir = locate_all(partition, traj_r.states)
    ok = _cyclic_distance(ic, ir, n_p) <= z
    times, factors = [], []
    for k in range(1, len(sw)):
        t0, t1 = sw[k - 1][0], sw[k][0]
        if V[k - 1] <= floor * max(V0, 1e-300):
            continue
        sel = (traj_c.times >= t0) & (traj_c.times <= t1)
        if not np.all(ok[sel]):
            continue
        times.append(t1)
        factors.append(V[k] / V[k - 1])
    return np.array(times), np.array(factors)


def synthesize_controller(system: SwitchingAffineSystem, partition: Optional[ConicPartition],
                          T_min: float, sigma_grid: Sequence[float] = (1.0, 2.0, 5.0),
                          z: int = 1, rounds: int = 4, seed: int = 0
                          ) -> Tuple[TrackingController, TrackingCertificate]:
    """Heuristic search for gains and a tracking certificate.

    Gains start from the choice that makes all closed-loop fields agree with
    the mean open-loop field when ``B`` allows it.  For each ``sigma`` in the
    grid, the routine then alternates between descending a matrix-inequality
    penalty in the Lyapunov factors ``L_i`` (with ``Q_i = L_i L_i^T + eps I``)
    and in the gains ``(K_i, w_i)``, with continuity enforced as a penalty.
    ``rho`` is taken as the smallest value admitted by the orderings.  The
    first ``sigma`` whose certificate verifies is returned.

    This is a heuristic; failure is not a proof of infeasibility.
    """
    from ._jax import jax, jnp, lbfgs, pos_part_sq

    part = system.partition if partition is None else partition
    B = system.B
    if np.linalg.norm(B) == 0.0:
        raise ControllerSynthesisError("no control authority: B is zero")
    n_p, n_x, n_u = system.n_p, system.n_x, system.n_u
    Bp = np.linalg.pinv(B)
    A_bar = system.A.mean(axis=0)
    b_bar = system.b.mean(axis=0)
    K0 = np.einsum("ux,ixy->iuy", Bp, A_bar[None] - system.A)
    w0 = (b_bar[None] - system.b) @ Bp.T
    offsets = list(range(-z, z + 1))
    A_op = jnp.asarray(system.A)
    b_op = jnp.asarray(system.b)
    Bj = jnp.asarray(B)
    Cs = jnp.asarray(np.array([h.unit_normal for h in part.boundaries]))
    xs = jnp.asarray(part.center)
    tril = np.tril_indices(n_x)
    eps = 1e-6
    delta = 1e-3

    def unpack_gains(g):
        K = g[: n_p * n_u * n_x].reshape(n_p, n_u, n_x)
        w = g[n_p * n_u * n_x:].reshape(n_p, n_u)
        return K, w

    def unpack_Q(l):
        Ls = jnp.zeros((n_p, n_x, n_x)).at[:, tril[0], tril[1]].set(l.reshape(n_p, -1))
        Q = jnp.einsum("ixy,izy->ixz", Ls, Ls) + eps * jnp.eye(n_x)
        return Q / jnp.trace(Q[0]) * n_x

    def penalty(g, l, sigma, rho):
        K, w = unpack_gains(g)
        Q = unpack_Q(l)
        Ah = A_op + jnp.einsum("xu,iuy->ixy", Bj, K)
        bh = b_op + w @ Bj.T
        pen = 0.0
        for i in range(n_p):
            for o in offsets:
                k = (i + o) % n_p
                S = Ah[k].T @ Q[i] + Q[i] @ Ah[k] + sigma * Q[i]
                pen = pen + pos_part_sq(S + delta * jnp.eye(n_x))
            j = (i + 1) % n_p
            pen = pen + pos_part_sq(Q[i] - rho * Q[j] + delta * jnp.eye(n_x))
            pen = pen + pos_part_sq(Q[j] - rho * Q[i] + delta * jnp.eye(n_x))
        cont = 0.0
        for k in range(n_p):
            dA = Ah[k - 1] - Ah[k]
            c = Cs[k]
            cont = cont + jnp.sum((dA - jnp.outer(dA @ c, c)) ** 2)
            cont = cont + jnp.sum((dA @ xs + bh[k - 1] - bh[k]) ** 2)
        return pen + 1e3 * cont

    vg_l = jax.jit(jax.value_and_grad(penalty, argnums=1))
    vg_g = jax.jit(jax.value_and_grad(penalty, argnums=0))
    g = np.concatenate([K0.ravel(), w0.ravel()])
    l0 = np.tile(np.eye(n_x)[tril], n_p)
    last = None
    for sigma in sigma_grid:
        rho_t = 0.5 * (1.0 + np.exp(sigma * T_min))
        l = l0.copy()
        gg = g.copy()
        for _ in range(rounds):
            l = lbfgs(lambda v: vg_l(gg, v, sigma, rho_t), l, maxiter=500).x
            gg = lbfgs(lambda v: vg_g(v, l, sigma, rho_t), gg, maxiter=500).x
        K, w = (np.asarray(a) for a in unpack_gains(jnp.asarray(gg)))
        Q = np.asarray(unpack_Q(jnp.asarray(l)))
        Q = 0.5 * (Q + np.transpose(Q, (0, 2, 1)))
        ctrl = TrackingController(K, w)
        rho = max(1.0, minimal_rho(Q)) * (1.0 + 1e-9)
        cert = TrackingCertificate(Q, rho, sigma, T_min, z)
        try:
            checked = verify_certificate(system, ctrl, cert, tol_continuity=1e-6)
        except CertificateInputError:
            continue
        last = checked
        if checked.verdict:
            return ctrl, checked
    msg = "no certificate found; widen grid or relax z"
    if last is not None and last.failures:
        msg += f" (last failure: {last.failures[0]})"
    raise ControllerSynthesisError(msg)
