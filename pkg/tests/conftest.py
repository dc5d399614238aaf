import numpy as np
import pytest

from limitforge import io
from limitforge.datagen import orbit_samples, vanderpol
from limitforge.geometry import build_partition, compute_center, segment_samples, select_breakpoints

# Starting phase of the Van der Pol corpus, in samples after the downward
# section crossing.  See README for how it was chosen.
VDP_SHIFT = 60
VDP_NF = 199

# Wall-clock seconds of the session-scoped pipeline stages.
TIMINGS = {}


@pytest.fixture(scope="session")
def tracking_example():
    """Six-region reference system, controller and certificate shipped as fixtures."""
    system = io.model_from_dict(io.load_json(io.fixture_path("tracking_model.json")))
    ctrl = io.controller_from_dict(io.load_json(io.fixture_path("tracking_controller.json")))
    cert = io.tracking_certificate_from_dict(
        io.load_json(io.fixture_path("tracking_certificate.json")))
    return system, ctrl, cert


@pytest.fixture(scope="session")
def vdp_corpus():
    """Van der Pol (mu = 1) samples rescaled to period 1.4, with an 8-region partition."""
    import time

    t0 = time.perf_counter()
    S = orbit_samples(vanderpol(1.0), [2.0, 0.0], VDP_NF, rescale_period=1.4, shift=VDP_SHIFT)
    xs = compute_center(S)
    bp = select_breakpoints(S, 8)
    part = build_partition(S, xs, bp)
    seg = segment_samples(S, bp)
    TIMINGS["corpus"] = time.perf_counter() - t0
    return S, part, seg


@pytest.fixture(scope="session")
def vdp_synthesis(vdp_corpus):
    """Synthesis results for n_d = 9 and n_d = 4 on the Van der Pol corpus."""
    import time

    from limitforge.synth import build_problem, solve

    S, part, seg = vdp_corpus
    out = {}
    for nd in (9, 4):
        t0 = time.perf_counter()
        res = solve(build_problem(S, part, seg, nd))
        out[nd] = (res, time.perf_counter() - t0)
    return out


def sectors(n_p, center=(0.0, 0.0), phase=0.0):
    """Equal angular sectors; region i spans the angles between rays i and i + 1."""
    from limitforge.geometry import ConicPartition, Hyperplane

    xs = np.asarray(center, float)
    bnds = []
    for i in range(n_p):
        th = phase + 2 * np.pi * i / n_p
        c = np.array([-np.sin(th), np.cos(th)])
        bnds.append(Hyperplane(c, float(c @ xs)))
    return ConicPartition(tuple(bnds), xs)


def quadrant_system(scale=1.0, wave=None):
    """Continuous piecewise-linear field on four quadrants, contractive for Q = I."""
    from limitforge.sim import SwitchingAffineSystem

    part = sectors(4)
    C = part.C
    A0 = scale * np.array([[-0.5, -1.0], [1.0, -0.5]])
    u = scale * np.array([0.2, -0.1])
    v = scale * np.array([-0.1, 0.15])
    # Rank-one jumps alpha_k c_k^T that close around the apex (c_2 = -c_0, c_3 = -c_1).
    A = [A0]
    for k, a in zip((1, 2, 3), (v, u, v)):
        A.append(A[-1] - np.outer(a, C[k]))
    return SwitchingAffineSystem(part, np.array(A), np.zeros((4, 2)), np.array([1.0, 0.5]),
                                 wave)


def linear_orbit(A, b, Bv, T, n_F, times=None):
    """Exact samples of the periodic solution of ``x' = A x + b + B u`` under the square wave."""
    from limitforge.geometry import SampleSet
    from limitforge.matfun import SquareWave, affine_reach, expm_reference

    n = A.shape[0]
    w = SquareWave(T)
    M = expm_reference(A, T)
    v = affine_reach(A, b, Bv, w, np.zeros(n), T)
    x0 = np.linalg.solve(np.eye(n) - M, v)
    ts = T * np.arange(n_F) / n_F if times is None else np.asarray(times, float)
    pts = np.array([affine_reach(A, b, Bv, w, x0, t) for t in ts])
    return SampleSet(pts, ts, T)


def random_stable(rng, n, scale=1.0):
    M = rng.standard_normal((n, n))
    return scale * (M - (np.max(np.linalg.eigvalsh(0.5 * (M + M.T))) + 0.5) * np.eye(n))
