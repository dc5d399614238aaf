"""Conic state-space partitions built from samples of a periodic orbit.

A partition is a cyclic list of hyperplanes ``C_i x = d_i`` that all contain
a common apex set (a point for two states, a line for three, an affine
subspace of dimension ``n_x - 2`` beyond that).  Region ``P_i`` is the
half-open wedge

    P_i = {x : C_i x >= d_i  and  C_{i+1} x < d_{i+1}},

with cyclic indexing.  Regions are numbered from 0 in this package, so the
first region of the text ``P_1`` is index 0 here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import null_space

__all__ = [
    "SampleSet",
    "Hyperplane",
    "ConicPartition",
    "SampleSegmentation",
    "PartitionReport",
    "GeometryError",
    "compute_center",
    "fit_separating_plane",
    "select_breakpoints",
    "segment_samples",
    "build_partition",
    "locate",
    "locate_all",
    "validate_partition",
]

_TWO_PI = 2.0 * np.pi


class GeometryError(ValueError):
    """Raised when a sample set or partition cannot be constructed."""


@dataclass(frozen=True)
class SampleSet:
    """Timestamped samples along one period of an orbit.

    Parameters
    ----------
    points : array_like, shape (n_F, n_x)
        States in orbit order.
    times : array_like, shape (n_F,)
        Strictly increasing timestamps.
    period_T : float
        Orbit period.
    dt_nominal : float, optional
        Nominal sampling step.  Defaults to ``period_T / n_F``.
    """

    points: np.ndarray
    times: np.ndarray
    period_T: float
    dt_nominal: Optional[float] = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        ts = np.asarray(self.times, dtype=float).reshape(-1)
        n_F, n_x = pts.shape
        if ts.shape[0] != n_F:
            raise GeometryError("times and points have different lengths")
        if n_F < 4 * n_x:
            raise GeometryError(
                f"too few samples: n_F={n_F} must be at least 4*n_x={4 * n_x}"
            )
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(ts)):
            raise GeometryError("samples must be finite")
        if np.any(np.diff(ts) <= 0):
            raise GeometryError("timestamps must be strictly increasing")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise GeometryError("two consecutive samples are identical")
        T = float(self.period_T)
        if not T > ts[-1] - ts[0]:
            raise GeometryError("period must exceed the sampled time span")
        dt = T / n_F if self.dt_nominal is None else float(self.dt_nominal)
        if not 0.0 < dt < 1.0:
            raise GeometryError("dt_nominal must lie in (0, 1)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "times", ts)
        object.__setattr__(self, "period_T", T)
        object.__setattr__(self, "dt_nominal", dt)

    @property
    def n_F(self) -> int:
        return self.points.shape[0]

    @property
    def n_x(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        """True when the grid is uniform and closes over one period."""
        gaps = np.append(np.diff(self.times), self.times[0] + self.period_T - self.times[-1])
        return bool(np.allclose(gaps, self.dt_nominal, rtol=0.0, atol=1e-9))

    @classmethod
    def uniform(cls, points, period_T: float, t0: float = 0.0) -> "SampleSet":
        """Build a sample set on the uniform grid ``t0 + k T / n_F``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n_F = pts.shape[0]
        dt = period_T / n_F
        return cls(pts, t0 + dt * np.arange(n_F), period_T, dt)


@dataclass(frozen=True)
class Hyperplane:
    """The set ``{x : C x = d}``.

    The user-facing ``normal`` and ``offset`` are preserved as given;
    ``unit_normal`` and ``unit_offset`` are the same plane scaled so the
    normal has unit Euclidean norm.
    """

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        C = np.asarray(self.normal, dtype=float).reshape(-1)
        nrm = np.linalg.norm(C)
        if not np.isfinite(nrm) or nrm == 0.0:
            raise GeometryError("hyperplane normal must be nonzero")
        object.__setattr__(self, "normal", C)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def unit_normal(self) -> np.ndarray:
        return self.normal / np.linalg.norm(self.normal)

    @property
    def unit_offset(self) -> float:
        return self.offset / float(np.linalg.norm(self.normal))

    def residual(self, x) -> np.ndarray:
        """Signed residual ``C x - d`` for one state or a stack of states."""
        return np.asarray(x, dtype=float) @ self.normal - self.offset

    def distance(self, x) -> np.ndarray:
        """Signed Euclidean distance to the plane."""
        return np.asarray(x, dtype=float) @ self.unit_normal - self.unit_offset


@dataclass(frozen=True)
class ConicPartition:
    """Cyclic set of hyperplanes sharing a common apex.

    Parameters
    ----------
    boundaries : list of Hyperplane
        Boundary ``i`` separates region ``i - 1`` from region ``i``.
    center : ndarray, shape (n_x,)
        The point ``x_s`` contained in every boundary.
    axis_direction : ndarray or None
        Unit normal of the fitted plane for ``n_x >= 3``; it spans the apex
        line together with ``center``.
    axis_subspace_basis : ndarray or None
        Additional apex directions, shape ``(n_x - 3, n_x)``, for ``n_x > 3``.
    """

    boundaries: Tuple[Hyperplane, ...]
    center: np.ndarray
    axis_direction: Optional[np.ndarray] = None
    axis_subspace_basis: Optional[np.ndarray] = None

    def __post_init__(self):
        bnds = tuple(self.boundaries)
        xs = np.asarray(self.center, dtype=float).reshape(-1)
        if len(bnds) < 3:
            raise GeometryError("a partition needs n_p >= 3 boundaries")
        for k, h in enumerate(bnds):
            if h.normal.shape[0] != xs.shape[0]:
                raise GeometryError(f"boundary {k} has the wrong dimension")
            scale = 1.0 + np.linalg.norm(xs)
            if abs(h.distance(xs)) > 1e-9 * scale:
                raise GeometryError(f"boundary {k} does not contain the center")
        object.__setattr__(self, "boundaries", bnds)
        object.__setattr__(self, "center", xs)
        if self.axis_direction is not None:
            object.__setattr__(
                self, "axis_direction", np.asarray(self.axis_direction, float).reshape(-1)
            )
        if self.axis_subspace_basis is not None:
            object.__setattr__(
                self,
                "axis_subspace_basis",
                np.atleast_2d(np.asarray(self.axis_subspace_basis, float)),
            )

    @property
    def n_p(self) -> int:
        return len(self.boundaries)

    @property
    def n_x(self) -> int:
        return self.center.shape[0]

    @property
    def C(self) -> np.ndarray:
        """Boundary normals stacked as rows, shape ``(n_p, n_x)``."""
        return np.array([h.normal for h in self.boundaries])

    @property
    def d(self) -> np.ndarray:
        return np.array([h.offset for h in self.boundaries])

    def apex_directions(self) -> np.ndarray:
        """Directions spanning the apex set, shape ``(n_x - 2, n_x)``."""
        if self.n_x == 2:
            return np.zeros((0, 2))
        if self.axis_direction is not None:
            rows = [self.axis_direction]
            if self.axis_subspace_basis is not None:
                rows.extend(self.axis_subspace_basis)
            return np.array(rows)
        # Recover the apex set as the common null space of all normals.
        ns = null_space(self.C)
        return ns.T

    def projection_basis(self) -> np.ndarray:
        """Orthonormal basis ``U`` (n_x x 2) of the complement of the apex set."""
        D = self.apex_directions()
        if D.shape[0] == 0:
            return np.eye(2)
        U = null_space(D)
        if U.shape[1] != 2:
            raise GeometryError("apex set does not have codimension two")
        return U


@dataclass(frozen=True)
class SampleSegmentation:
    """Split of the samples into consecutive subsets starting at breakpoints."""

    breakpoint_indices: np.ndarray
    subsets: Tuple[np.ndarray, ...]
    dwell_intervals: np.ndarray


@dataclass
class PartitionReport:
    """Outcome of :func:`validate_partition`.

    Attributes
    ----------
    one_sample_per_boundary : bool
        Every boundary holds exactly one sample.
    samples_on_boundary : list of int
    adjacent_union_convex : bool
        The union of every pair of adjacent regions is convex.
    union_angles : ndarray
        Opening angle of each adjacent-region union in the projected plane.
    region_counts : ndarray
        Number of samples per region.
    monotone_traversal : bool
        The samples visit the regions in cyclic order without backtracking.
    """

    one_sample_per_boundary: bool
    samples_on_boundary: List[int]
    adjacent_union_convex: bool
    union_angles: np.ndarray
    region_counts: np.ndarray
    monotone_traversal: bool
    messages: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (
            self.one_sample_per_boundary
            and self.adjacent_union_convex
            and self.monotone_traversal
            and bool(np.all(self.region_counts > 0))
        )


def compute_center(samples: SampleSet, mode: str = "midpoint") -> np.ndarray:
    """Per-coordinate center of the samples.

    Parameters
    ----------
    samples : SampleSet
    mode : {"midpoint", "half_range"}
        ``midpoint`` returns ``(max + min) / 2``.  ``half_range`` returns the
        literal ``(max - min) / 2`` variant.

    Returns
    -------
    ndarray, shape (n_x,)
    """
    P = samples.points
    hi, lo = P.max(axis=0), P.min(axis=0)
    if np.all(hi == lo):
        raise GeometryError("samples collinear/degenerate")
    if mode == "midpoint":
        return 0.5 * (hi + lo)
    if mode == "half_range":
        return 0.5 * (hi - lo)
    raise ValueError(f"unknown center mode {mode!r}")


def fit_separating_plane(samples: SampleSet, center) -> Tuple[Hyperplane, float]:
    """Least-squares plane through ``center`` closest to the samples.

    Minimizes ``sum_l (Omega (x_l - x_s))^2`` subject to ``||Omega|| = 1``.
    The minimizer is the eigenvector for the smallest eigenvalue of the
    scatter matrix of the samples about the center.

    Returns
    -------
    plane : Hyperplane
        Unit normal ``Omega`` with offset ``eps = Omega x_s``.
    residual : float
        Root of the summed squared distances at the optimum.
    """
    xs = np.asarray(center, dtype=float).reshape(-1)
    if samples.n_x < 3:
        raise GeometryError("plane fit needs n_x >= 3")
    Y = samples.points - xs
    if np.allclose(Y, 0.0):
        raise GeometryError("plane fit undefined")
    w, V = np.linalg.eigh(Y.T @ Y)
    omega = V[:, 0]
    k = int(np.argmax(np.abs(omega)))
    if omega[k] < 0:
        omega = -omega
    res = float(np.sqrt(max(w[0], 0.0)))
    return Hyperplane(omega, float(omega @ xs)), res


def select_breakpoints(samples: SampleSet, n_p: int) -> np.ndarray:
    """Choose ``n_p`` breakpoint indices with balanced cyclic dwell times.

    The first breakpoint is sample 0.  Among all splits the routine attains
    the smallest possible maximum dwell interval, preferring the split whose
    breakpoints sit closest to the uniform times ``t_0 + k T / n_p``.
    """
    n_F = samples.n_F
    if n_p < 3:
        raise GeometryError("n_p must be at least 3")
    if n_p > n_F:
        raise GeometryError("n_p cannot exceed the number of samples")
    t = samples.times - samples.times[0]
    T = samples.period_T
    t_ext = np.append(t, T)

    best = _minimax_split(t_ext, n_p)
    target = np.arange(n_p) * T / n_p
    cand = np.clip(np.searchsorted(t, target), 0, n_F - 1)
    # Snap to the nearer neighbour of each target time.
    lower = np.clip(cand - 1, 0, n_F - 1)
    pick = np.where(np.abs(t[lower] - target) <= np.abs(t[cand] - target), lower, cand)
    pick[0] = 0
    if np.all(np.diff(pick) > 0) and pick[-1] < n_F:
        if _max_dwell(t_ext, pick) <= best[1] + 1e-12:
            idx = pick
        else:
            idx = best[0]
    else:
        idx = best[0]
    if _max_dwell(t_ext, idx) >= 1.0:
        raise GeometryError("increase n_p: a dwell interval is not below 1")
    return np.asarray(idx, dtype=int)


def _max_dwell(t_ext: np.ndarray, idx: np.ndarray) -> float:
    edges = np.append(t_ext[np.asarray(idx)], t_ext[-1])
    return float(np.max(np.diff(edges)))


def _minimax_split(t_ext: np.ndarray, n_p: int) -> Tuple[np.ndarray, float]:
    """Exact minimax split with index 0 fixed, by bisection over gap values."""
    n_F = t_ext.shape[0] - 1
    diffs = np.unique((t_ext[None, :] - t_ext[:, None])[np.triu_indices(n_F + 1, 1)])

    def greedy(D):
        idx = [0]
        cur = 0
        while True:
            # furthest index reachable within D, never beyond the closing time
            j = int(np.searchsorted(t_ext, t_ext[cur] + D * (1 + 1e-14) + 1e-15, side="right")) - 1
            if j >= n_F:
                return idx
            if j <= cur:
                return None
            idx.append(j)
            cur = j
            if len(idx) > n_p:
                return None

    lo, hi = 0, len(diffs) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if greedy(diffs[mid]) is not None:
            hi = mid
        else:
            lo = mid + 1
    idx = greedy(diffs[lo])
    # Refine to exactly n_p breakpoints by splitting the longest intervals.
    idx = list(idx)
    while len(idx) < n_p:
        edges = idx + [n_F]
        lens = [t_ext[edges[k + 1]] - t_ext[edges[k]] if edges[k + 1] - edges[k] > 1 else -1.0
                for k in range(len(idx))]
        k = int(np.argmax(lens))
        a, b = edges[k], edges[k + 1]
        mid_t = 0.5 * (t_ext[a] + t_ext[b])
        m = int(np.clip(np.argmin(np.abs(t_ext[a + 1:b] - mid_t)) + a + 1, a + 1, b - 1))
        idx.insert(k + 1, m)
    idx = np.array(idx, dtype=int)
    return idx, _max_dwell(t_ext, idx)


def segment_samples(samples: SampleSet, breakpoints: Sequence[int]) -> SampleSegmentation:
    """Split the samples into the subsets ``F_i`` that start at each breakpoint."""
    idx = np.asarray(breakpoints, dtype=int)
    if idx.ndim != 1 or idx.size < 3 or idx[0] != 0 or np.any(np.diff(idx) <= 0):
        raise GeometryError("breakpoints must start at 0 and increase strictly")
    if idx[-1] >= samples.n_F:
        raise GeometryError("breakpoint index out of range")
    edges = np.append(idx, samples.n_F)
    subsets = tuple(np.arange(edges[k], edges[k + 1]) for k in range(idx.size))
    t_ext = np.append(samples.times, samples.times[0] + samples.period_T)
    dwell = t_ext[edges[1:]] - t_ext[edges[:-1]]
    return SampleSegmentation(idx, subsets, dwell)


def _complete_apex_basis(omega: np.ndarray) -> np.ndarray:
    """Apex directions ``Omega*, Omega_2, ...`` for ``n_x > 3``.

    Coordinate axes are orthogonalized against the directions already chosen;
    at each step the axis with the largest remaining component is taken, so
    the two axes most aligned with the chosen span are the ones left out.
    """
    n = omega.shape[0]
    chosen = [omega / np.linalg.norm(omega)]
    remaining = list(range(n))
    while len(chosen) < n - 2:
        Qm = np.array(chosen)
        best_k, best_v, best_n = None, None, -1.0
        for k in remaining:
            e = np.zeros(n)
            e[k] = 1.0
            v = e - Qm.T @ (Qm @ e)
            nv = np.linalg.norm(v)
            if nv > best_n + 1e-12:
                best_k, best_v, best_n = k, v, nv
        remaining.remove(best_k)
        chosen.append(best_v / best_n)
    return np.array(chosen)


def build_partition(
    samples: SampleSet,
    center,
    breakpoints: Sequence[int],
    axis: Optional[Hyperplane] = None,
) -> ConicPartition:
    """Construct the conic partition through ``center`` and the breakpoints.

    Each boundary is the hyperplane spanned by the apex set and one
    breakpoint sample.  Normals are oriented so that the samples following
    breakpoint ``i`` satisfy ``C_i x >= d_i``, which makes region ``i`` hold
    the subset that starts at breakpoint ``i``.

    Parameters
    ----------
    samples : SampleSet
    center : array_like
        Apex point ``x_s``.
    breakpoints : sequence of int
        Indices of the samples ``x_hat_i``, in orbit order.
    axis : Hyperplane, optional
        Fitted plane for ``n_x >= 3``.  Computed with
        :func:`fit_separating_plane` when omitted.
    """
    xs = np.asarray(center, dtype=float).reshape(-1)
    n_x = samples.n_x
    if xs.shape[0] != n_x:
        raise GeometryError("center has the wrong dimension")
    idx = np.asarray(breakpoints, dtype=int)
    P = samples.points
    scale = 1.0 + np.max(np.abs(P))
    if np.any(np.linalg.norm(P - xs, axis=1) <= 1e-12 * scale):
        raise GeometryError("the center coincides with a sample")

    omega, extra = None, None
    if n_x == 2:
        D = np.zeros((0, 2))
    else:
        if axis is None:
            axis, _ = fit_separating_plane(samples, xs)
        omega = axis.unit_normal
        D = _complete_apex_basis(omega)
        if n_x > 3:
            extra = D[1:]
        # No sample may lie on the apex set.
        U = null_space(D)
        if np.any(np.linalg.norm((P - xs) @ U, axis=1) <= 1e-12 * scale):
            raise GeometryError("a sample lies on the apex set; perturb the fitted plane")

    U = np.eye(2) if n_x == 2 else null_space(D)
    proj = (P - xs) @ U
    ang = np.arctan2(proj[:, 1], proj[:, 0])
    bang = ang[idx]
    steps = np.angle(np.exp(1j * (np.roll(bang, -1) - bang)))
    turn = np.sign(np.sum(steps)) if np.sum(steps) != 0 else 1.0
    if not (np.all(steps * turn > 0) and abs(abs(np.sum(steps)) - _TWO_PI) < 1e-6):
        raise GeometryError("partition invalid (self-intersecting orbit): "
                            "breakpoint angles are not monotone")

    bounds = []
    for i in idx:
        v = P[i] - xs
        M = np.vstack([D, v[None, :]]) if D.shape[0] else v[None, :]
        ns = null_space(M)
        if ns.shape[1] != 1:
            raise GeometryError("degenerate breakpoint direction")
        C = ns[:, 0]
        # Orient so that rotating from this breakpoint along the orbit
        # direction enters the positive side.
        u = U.T @ C
        pv = U.T @ v
        cross = pv[0] * u[1] - pv[1] * u[0]
        if cross * turn < 0:
            C = -C
        bounds.append(Hyperplane(C, float(C @ xs)))

    for k, (h, i) in enumerate(zip(bounds, idx)):
        res = np.abs(h.distance(P))
        res[i] = np.inf
        if np.any(res <= 1e-9 * scale):
            raise GeometryError(f"boundary violation: boundary {k} contains a second sample")

    return ConicPartition(tuple(bounds), xs, omega, extra)


def locate(partition: ConicPartition, x) -> int:
    """Region index of a single state (0-based)."""
    return int(locate_all(partition, np.atleast_2d(np.asarray(x, float)))[0])


def locate_all(partition: ConicPartition, X) -> np.ndarray:
    """Vectorized :func:`locate` for a stack of states, shape ``(m, n_x)``.

    Membership follows the half-open rule ``C_i x >= d_i`` and
    ``C_{i+1} x < d_{i+1}``.  Residuals within rounding of zero (relative
    ``1e-12``) count as exactly on the boundary, so a state on boundary
    ``i`` belongs to region ``i``.  States on the apex set go to region 0.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    R = X @ partition.C.T - partition.d  # (m, n_p)
    scale = 1.0 + np.abs(X).max(axis=1)
    on = np.abs(R) <= 1e-12 * scale[:, None] * (
        np.linalg.norm(partition.C, axis=1) + np.abs(partition.d))
    R = np.where(on, 0.0, R)
    member = (R >= 0.0) & (np.roll(R, -1, axis=1) < 0.0)
    out = np.argmax(member, axis=1)
    n_hit = member.sum(axis=1)
    apex = np.all(on, axis=1)
    out[apex] = 0
    bad = (n_hit != 1) & ~apex
    if np.any(bad):
        # Only reachable for partitions whose wedges open by pi or more.
        out[bad] = _locate_by_angle(partition, X[bad])
    return out


def _locate_by_angle(partition: ConicPartition, X: np.ndarray) -> np.ndarray:
    U = partition.projection_basis()
    Y = (X - partition.center) @ U
    rays = np.array([_ray_direction(partition, k) for k in range(partition.n_p)])
    ray_ang = np.arctan2(rays[:, 1], rays[:, 0])
    steps = np.angle(np.exp(1j * (np.roll(ray_ang, -1) - ray_ang)))
    turn = 1.0 if np.sum(steps) > 0 else -1.0
    a = np.arctan2(Y[:, 1], Y[:, 0])
    rel = np.mod(turn * (a[:, None] - ray_ang[None, :]), _TWO_PI)
    return np.argmin(rel, axis=1)


def _ray_direction(partition: ConicPartition, k: int) -> np.ndarray:
    """Projected ray of boundary ``k`` pointing into the wedge of region ``k``.

    The ray is the boundary line in the projected plane, oriented so that
    region ``k - 1`` lies on the negative side of boundary ``k``, i.e. the
    ray of boundary ``k`` is the one on which region ``k`` starts.
    """
    U = partition.projection_basis()
    c = U.T @ partition.boundaries[k].unit_normal
    c_next = U.T @ partition.boundaries[(k + 1) % partition.n_p].unit_normal
    r = np.array([c[1], -c[0]])
    # Region k touches boundary k along the ray where C_{k+1} x < d_{k+1}.
    if r @ c_next > 0:
        r = -r
    return r


def validate_partition(partition: ConicPartition, samples: SampleSet) -> PartitionReport:
    """Diagnostics for a partition against its sample set.

    Checks one sample per boundary, convexity of every union of two adjacent
    regions, per-region sample counts, and monotone cyclic traversal of the
    samples.  The union check uses the opening angle of the wedge
    ``P_{i-1} u P_i`` in the plane orthogonal to the apex set, which must be
    below pi.
    """
    msgs = []
    P = samples.points
    scale = 1.0 + np.max(np.abs(P))
    on_b = []
    for h in partition.boundaries:
        on_b.append(int(np.sum(np.abs(h.distance(P)) <= 1e-9 * scale)))
    one = all(c == 1 for c in on_b)
    if not one:
        msgs.append(f"samples per boundary {on_b}; expected exactly one each")

    rays = np.array([_ray_direction(partition, k) for k in range(partition.n_p)])
    ray_ang = np.arctan2(rays[:, 1], rays[:, 0])
    steps = np.angle(np.exp(1j * (np.roll(ray_ang, -1) - ray_ang)))
    turn = 1.0 if np.sum(steps) >= 0 else -1.0
    gaps = np.mod(turn * (np.roll(ray_ang, -1) - ray_ang), _TWO_PI)
    # union of regions k-1 and k spans gaps[k-1] + gaps[k]
    union = np.roll(gaps, 1) + gaps
    convex = bool(np.all(union < np.pi - 1e-12)) and abs(np.sum(gaps) - _TWO_PI) < 1e-6
    if not convex:
        msgs.append("a union of adjacent regions opens by pi or more")

    reg = locate_all(partition, P)
    counts = np.bincount(reg, minlength=partition.n_p)
    if np.any(counts == 0):
        msgs.append("a region holds no samples")
    jumps = np.mod(np.diff(np.append(reg, reg[0])), partition.n_p)
    monotone = bool(np.all((jumps == 0) | (jumps == 1))) and int(np.sum(jumps == 1)) == partition.n_p
    if not monotone:
        msgs.append("samples do not traverse the regions in cyclic order")
    return PartitionReport(one, on_b, convex, union, counts, monotone, msgs)
