"""Matrix exponential kernels, the affine reach map and definiteness checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

__all__ = [
    "SquareWave",
    "DefinitenessReport",
    "expm_taylor",
    "expm_reference",
    "phi_taylor",
    "phi_reference",
    "affine_reach",
    "check_definite",
    "square_wave_value",
    "wave_segments",
    "MAX_TAYLOR_ORDER",
]

MAX_TAYLOR_ORDER = 30
_REF_ORDER = 20
_REF_THRESHOLD = 0.5


@dataclass(frozen=True)
class SquareWave:
    """Unit square wave of period ``period_T``.

    ``minus_first`` is -1 on ``[kT, (k+1/2)T)`` and +1 on the second half.
    ``plus_first`` is its negation.
    """

    period_T: float
    phase: str = "minus_first"
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.period_T > 0:
            raise ValueError("square wave period must be positive")
        if self.phase not in ("minus_first", "plus_first"):
            raise ValueError(f"unknown square wave phase {self.phase!r}")

    @property
    def first_value(self) -> float:
        return -self.amplitude if self.phase == "minus_first" else self.amplitude


@dataclass(frozen=True)
class DefinitenessReport:
    """Eigenvalue test of a symmetrized matrix against a margin."""

    matrix_symmetrized: bool
    extreme_eigenvalue: float
    margin: float
    sense: str
    verdict: bool

    @property
    def passed(self) -> bool:
        return self.verdict


def _check_order(order: int) -> int:
    order = int(order)
    if not 1 <= order <= MAX_TAYLOR_ORDER:
        raise ValueError(f"Taylor order must lie in [1, {MAX_TAYLOR_ORDER}]")
    return order


def expm_taylor(A, t: float, order: int) -> np.ndarray:
    """Truncated series ``I + sum_{j=1}^{order} (A t)^j / j!``.

    Evaluated in Horner form ``I + At(I + At/2(I + ... (I + At/order)))``.
    """
    order = _check_order(order)
    M = np.asarray(A, dtype=float) * float(t)
    n = M.shape[0]
    eye = np.eye(n)
    acc = eye.copy()
    for j in range(order, 0, -1):
        acc = eye + (M @ acc) / j
    return acc


def phi_taylor(A, t: float, order: int) -> np.ndarray:
    """Truncated series of ``int_0^t exp(A s) ds``.

    Equals ``sum_{j=1}^{order} t^j A^{j-1} / j!``, which is exactly
    ``(expm_taylor(A, t, order) - I) A^{-1}`` whenever ``A`` is invertible,
    without forming the inverse.
    """
    order = _check_order(order)
    A = np.asarray(A, dtype=float)
    t = float(t)
    n = A.shape[0]
    eye = np.eye(n)
    acc = eye.copy()
    for j in range(order, 1, -1):
        acc = eye + (A @ acc) * (t / j)
    return acc * t


def expm_reference(A, t: float) -> np.ndarray:
    """Scaling-and-squaring exponential used as an accuracy oracle.

    The argument is halved until ``||A t||_1 <= 0.5``, an order-20 Taylor
    polynomial is applied and the result is squared back.
    """
    M = np.asarray(A, dtype=float) * float(t)
    nrm = np.linalg.norm(M, 1)
    s = 0
    if nrm > _REF_THRESHOLD:
        s = int(math.ceil(math.log2(nrm / _REF_THRESHOLD)))
    E = expm_taylor(M / (2.0 ** s), 1.0, _REF_ORDER)
    for _ in range(s):
        E = E @ E
    return E


def phi_reference(A, t: float) -> np.ndarray:
    """``int_0^t exp(A s) ds`` from the exponential of an augmented matrix."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = A
    M[:n, n:] = np.eye(n)
    return expm_reference(M, t)[:n, n:]


def square_wave_value(wave: SquareWave, t: float) -> float:
    """Value of the square wave at time ``t``."""
    frac = np.mod(float(t) / wave.period_T, 1.0)
    first = wave.first_value
    return first if frac < 0.5 else -first


def wave_segments(wave: SquareWave, t0: float, t1: float) -> List[Tuple[float, float]]:
    """Split ``[t0, t1]`` into ``(duration, value)`` pieces of constant input."""
    T = wave.period_T
    half = 0.5 * T
    out = []
    t = float(t0)
    t1 = float(t1)
    while t1 - t > 1e-15 * max(1.0, abs(t1)):
        k = math.floor(t / half + 1e-12)
        edge = (k + 1) * half
        stop = min(edge, t1)
        mid = 0.5 * (t + stop)
        out.append((stop - t, square_wave_value(wave, mid)))
        t = stop
    return out


def affine_reach(A, b, B, wave: SquareWave, x0, t: float, backend: str = "reference",
                 order: int = 9, t0: float = 0.0) -> np.ndarray:
    """State reached from ``x0`` after time ``t`` under ``A x + b + B u``.

    The input is the square wave, and the start time ``t0`` fixes its phase
    (``t0 = 0`` starts at the beginning of a period).  Each constant-input
    piece is advanced with the closed form
    ``x <- e^{A tau} x + (e^{A tau} - I) A^{-1} (b + B u)``.

    Parameters
    ----------
    backend : {"reference", "taylor"}
        Exponential used for each piece.  ``taylor`` uses ``order`` terms.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    Bv = np.asarray(B, dtype=float).reshape(-1)
    if Bv.shape != b.shape:
        raise ValueError("the closed-form reach map needs a single input column")
    if np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("reach map undefined: A is numerically singular")
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    for tau, u in wave_segments(wave, t0, t0 + t):
        if backend == "taylor":
            E, Phi = expm_taylor(A, tau, order), phi_taylor(A, tau, order)
        elif backend == "reference":
            E, Phi = expm_reference(A, tau), phi_reference(A, tau)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        x = E @ x + Phi @ (b + Bv * u)
    return x


def check_definite(M, sense: str = "neg", margin: float = 1e-8) -> DefinitenessReport:
    """Test ``(M + M^T)/2`` for negative or positive definiteness.

    ``neg`` passes when the largest eigenvalue is below ``-margin``; ``pos``
    passes when the smallest eigenvalue exceeds ``margin``.
    """
    M = np.asarray(M, dtype=float)
    S = 0.5 * (M + M.T)
    sym = bool(np.array_equal(S, M))
    w = np.linalg.eigvalsh(S)
    if sense == "neg":
        ext = float(w[-1])
        ok = ext < -margin
    elif sense == "pos":
        ext = float(w[0])
        ok = ext > margin
    else:
        raise ValueError("sense must be 'neg' or 'pos'")
    return DefinitenessReport(sym, ext, float(margin), sense, bool(ok))
