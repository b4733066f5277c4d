"""Small dense linear-algebra helpers used throughout the package.

All routines accept arrays with arbitrary leading batch dimensions; the
matrix axes are always the trailing two.
"""

import numpy as np

from .errors import NotPositiveDefinite

# Relative jitter added once to a failing Cholesky before giving up.
JITTER_SCALE = 1e-10


def symmetrize(a):
    """Return (a + a^T)/2 over the trailing two axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def chol_pd(a, index=None):
    """Batched lower Cholesky factor with a single jitter retry.

    On failure, adds ``JITTER_SCALE * trace/D`` to the diagonal once; if the
    factorization still fails, raises :class:`NotPositiveDefinite`.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    d = a.shape[-1]
    tr = np.trace(a, axis1=-2, axis2=-1)
    jitter = JITTER_SCALE * tr[..., None, None] / d * np.eye(d)
    try:
        return np.linalg.cholesky(a + jitter)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(index=index) from None


def logdet_from_chol(chol):
    """log|A| from a lower Cholesky factor of A."""
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    return 2.0 * np.sum(np.log(diag), axis=-1)


def solve_pd(a, b, index=None):
    """Solve a x = b for symmetric PD ``a`` (batched), validating PD first."""
    chol_pd(a, index=index)  # PD check with jitter policy
    return np.linalg.solve(symmetrize(a), b)


def inv_pd(a, index=None):
    d = a.shape[-1]
    eye = np.broadcast_to(np.eye(d), a.shape).copy()
    return solve_pd(a, eye, index=index)


def tri_solve(chol, b, trans=False):
    """Batched triangular solve against a lower Cholesky factor.

    numpy has no batched triangular solve, so this falls back to
    ``np.linalg.solve``; for the small D used here the cost is negligible.
    """
    mat = np.swapaxes(chol, -1, -2) if trans else chol
    return np.linalg.solve(mat, b)


def chol_vjp(chol, chol_bar):
    """Reverse-mode derivative of S -> chol(S).

    Given L = chol(S) and the gradient ``chol_bar`` of a scalar with respect
    to L, returns the gradient with respect to S (as an unconstrained matrix,
    evaluated at symmetric S).
    """
    lt_lbar = np.swapaxes(chol, -1, -2) @ chol_bar
    d = chol.shape[-1]
    # lower-triangular half with the diagonal halved
    phi = np.tril(lt_lbar) - 0.5 * lt_lbar * np.eye(d)
    # S_bar = L^{-T} Phi L^{-1}, then symmetrized
    y = tri_solve(chol, phi, trans=True)          # L^{-T} Phi
    s_bar = np.swapaxes(tri_solve(chol, np.swapaxes(y, -1, -2), trans=True), -1, -2)
    return symmetrize(s_bar)


def gauss_hermite_nodes(nodes_per_dim, dim):
    """Tensor-product Gauss-Hermite rule for N(0, I_dim).

    Returns (z, w) with z of shape (K, dim) and w of shape (K,), where
    K = nodes_per_dim ** dim and sum(w) = 1.
    """
    x, w = np.polynomial.hermite_e.hermegauss(nodes_per_dim)
    w = w / np.sqrt(2.0 * np.pi)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    z = np.stack([g.reshape(-1) for g in grids], axis=-1)
    weights = np.ones(z.shape[0])
    for axis_w in np.meshgrid(*([w] * dim), indexing="ij"):
        weights = weights * axis_w.reshape(-1)
    return z, weights
