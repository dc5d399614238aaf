"""JAX setup and smooth matrix penalties shared by the optimizers."""

from __future__ import annotations

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402
from scipy.optimize import minimize  # noqa: E402

__all__ = ["jax", "jnp", "pos_part_sq", "sym_eigvals", "lbfgs"]


@jax.custom_vjp
def pos_part_sq(S):
    """``sum_k max(0, lambda_k)^2`` over the eigenvalues of symmetric ``S``.

    This is ``||[S]_+||_F^2``, a continuously differentiable spectral
    function with gradient ``2 [S]_+``.  The custom rule avoids the
    eigenvector derivative, which is undefined at repeated eigenvalues.
    """
    w = jnp.linalg.eigvalsh(0.5 * (S + S.T))
    return jnp.sum(jnp.maximum(w, 0.0) ** 2)


def _pps_fwd(S):
    Ssym = 0.5 * (S + S.T)
    w, V = jnp.linalg.eigh(Ssym)
    wp = jnp.maximum(w, 0.0)
    return jnp.sum(wp ** 2), (V, wp)


def _pps_bwd(res, g):
    V, wp = res
    return (g * 2.0 * (V * wp) @ V.T,)


pos_part_sq.defvjp(_pps_fwd, _pps_bwd)


@jax.custom_jvp
def sym_eigvals(S):
    """Ascending eigenvalues of symmetric ``S``.

    The tangent uses ``d lambda_k = v_k^T dS v_k`` only, so no eigenvector
    derivative (which blows up at repeated eigenvalues) is formed.
    """
    return jnp.linalg.eigvalsh(S)


@sym_eigvals.defjvp
def _sym_eigvals_jvp(primals, tangents):
    (S,), (dS,) = primals, tangents
    w, V = jnp.linalg.eigh(S)
    return w, jnp.einsum("ik,ij,jk->k", V, dS, V)


def lbfgs(fun_and_grad, z0, maxiter=2000, gtol=1e-10):
    """Run scipy's L-BFGS-B on a JAX ``value_and_grad`` function."""

    def f(z):
        v, g = fun_and_grad(z)
        v = float(v)
        g = np.asarray(g, dtype=float)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return np.inf, np.zeros_like(g)
        return v, g

    return minimize(
        f,
        np.asarray(z0, dtype=float),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": maxiter, "maxfun": 2 * maxiter, "ftol": 0.0, "gtol": gtol},
    )
