"""Observation models: Gaussian and Poisson emissions with expected
log-likelihood hooks.

``expected_log_likelihood`` integrates log p(y | x) against a Gaussian
marginal N(m, S): in closed form for the Gaussian model, by Gauss-Hermite
quadrature under the reparameterization x = m + chol(S) z for the Poisson
models.  Gradients with respect to (m, S) come from the same nodes, so they
are exact derivatives of the returned value.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import QuadratureOverflow, RateNonPositive
from .linalg import chol_pd, chol_vjp, gauss_hermite_nodes, symmetrize

RATE_FLOOR = 1e-10
MAX_LOG_RATE = 30.0


class ObservationModel:
    """Interface: sample(x, rng), expected_log_likelihood(m, S, y)."""

    n_out = None
    kind = "observation"

    def log_density(self, x, y):
        raise NotImplementedError

    def sample(self, x, rng):
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianObservation(ObservationModel):
    """y ~ N(C x + d, R) with diagonal R."""

    C: np.ndarray
    d: np.ndarray
    R_diag: np.ndarray
    kind = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float))
        r = np.asarray(self.R_diag, dtype=float)
        if np.any(r <= 0):
            raise ValueError("observation noise variances must be positive")
        object.__setattr__(self, "R_diag", r)

    @property
    def n_out(self):
        return self.C.shape[0]

    @property
    def dim(self):
        return self.C.shape[1]

    def sample(self, x, rng):
        mean = x @ self.C.T + self.d
        return mean + np.sqrt(self.R_diag) * rng.standard_normal(mean.shape)

    def log_density(self, x, y):
        resid = y - x @ self.C.T - self.d
        return -0.5 * np.sum(resid ** 2 / self.R_diag, axis=-1) - 0.5 * np.sum(
            np.log(2.0 * np.pi * self.R_diag)
        )

    def expected_log_likelihood(self, m, S, y, want_grads=True):
        """Closed form: -1/2 ||y - Cm - d||^2_{R^-1} - 1/2 tr(C^T R^-1 C S) - 1/2 log|2 pi R|.

        Returns (value, grad_m, grad_S); arguments may carry leading batch
        dimensions.
        """
        C, rd = self.C, self.R_diag
        resid = y - m @ C.T - self.d
        CtRinv = (C / rd[:, None]).T  # (D, N)
        quad = np.einsum("...n,...n->...", resid ** 2, 1.0 / rd)
        ctrc = C.T @ (C / rd[:, None])  # (D, D)
        trace = np.einsum("ab,...ab->...", ctrc, S)
        value = -0.5 * (quad + trace) - 0.5 * np.sum(np.log(2.0 * np.pi * rd))
        grad_m = np.einsum("dn,...n->...d", CtRinv, resid)
        grad_S = -0.5 * np.broadcast_to(ctrc, S.shape)
        return value, grad_m, grad_S


def _poisson_log_pmf(y, rate):
    return y * np.log(rate) - rate - gammaln(y + 1.0)


@dataclass(frozen=True)
class PoissonRBFObservation(ObservationModel):
    """Poisson counts with radial-basis tuning curves.

    Rate of unit n at latent location x:
        r_n(x) = peak * exp(-||x - c_n||^2 / (2 width^2)) + baseline.
    """

    centers: np.ndarray  # (N, D)
    width: float
    peak: float
    baseline: float
    ell_nodes_per_dim: int = 6
    kind = "poisson_rbf"

    def __post_init__(self):
        object.__setattr__(self, "centers", np.asarray(self.centers, dtype=float))
        if self.baseline <= 0:
            raise ValueError("baseline rate must be positive")

    @property
    def n_out(self):
        return self.centers.shape[0]

    @property
    def dim(self):
        return self.centers.shape[1]

    @property
    def quad_count(self):
        return self.ell_nodes_per_dim ** self.dim

    def _sq_dist(self, x):
        x = np.asarray(x, dtype=float)
        xn = np.sum(x ** 2, axis=-1)[..., None]
        cn = np.sum(self.centers ** 2, axis=-1)
        return np.maximum(xn - 2.0 * (x @ self.centers.T) + cn, 0.0)

    def rates(self, x):
        sq = self._sq_dist(x)
        return self.peak * np.exp(-0.5 * sq / self.width ** 2) + self.baseline

    def rate_grads(self, x):
        """d r_n / d x: (..., N, D)."""
        diff = x[..., None, :] - self.centers
        sq = np.sum(diff ** 2, axis=-1)
        bump = self.peak * np.exp(-0.5 * sq / self.width ** 2)
        return -bump[..., None] * diff / self.width ** 2

    def rates_and_grads(self, x):
        """(rates, d rates / d x) sharing one exponential evaluation."""
        diff = np.asarray(x)[..., None, :] - self.centers
        sq = np.sum(diff ** 2, axis=-1)
        bump = self.peak * np.exp(-0.5 * sq / self.width ** 2)
        return bump + self.baseline, -bump[..., None] * diff / self.width ** 2

    def ell_node_terms(self, x, y):
        """Per-node log-likelihood and its state gradient, without
        materializing per-unit gradient arrays."""
        sq = self._sq_dist(x)
        bump = self.peak * np.exp(-0.5 * sq / self.width ** 2)
        r = bump + self.baseline
        r_cl = np.maximum(r, RATE_FLOOR)
        val = np.sum(y * np.log(r_cl) - r_cl - gammaln(y + 1.0), axis=-1)
        coeff = np.where(r > RATE_FLOOR, y / r_cl - 1.0, -1.0)
        cb = coeff * bump / self.width ** 2  # (..., N)
        gx = cb @ self.centers - cb.sum(axis=-1)[..., None] * np.asarray(x)
        return val, gx

    def sample(self, x, rng):
        r = self.rates(x)
        if np.any(r <= 0):
            raise RateNonPositive("Poisson rate underflowed to <= 0")
        return rng.poisson(r).astype(float)

    def log_density(self, x, y):
        r = np.maximum(self.rates(x), RATE_FLOOR)
        return np.sum(_poisson_log_pmf(y, r), axis=-1)

    def expected_log_likelihood(self, m, S, y, want_grads=True):
        return _poisson_ell_quadrature(self, m, S, y, self.ell_nodes_per_dim,
                                       want_grads=want_grads)


@dataclass(frozen=True)
class PoissonExpObservation(ObservationModel):
    """Poisson counts with exponential link: r(x) = exp(C x + d)."""

    C: np.ndarray
    d: np.ndarray
    ell_nodes_per_dim: int = 6
    kind = "poisson_exp"

    def __post_init__(self):
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float))

    @property
    def n_out(self):
        return self.C.shape[0]

    @property
    def dim(self):
        return self.C.shape[1]

    def rates(self, x):
        log_rate = x @ self.C.T + self.d
        if np.any(log_rate > MAX_LOG_RATE):
            raise QuadratureOverflow("exponential-link rate overflowed")
        return np.exp(log_rate)

    def rate_grads(self, x):
        return self.rates(x)[..., None] * self.C

    def rates_and_grads(self, x):
        r = self.rates(x)
        return r, r[..., None] * self.C

    def ell_node_terms(self, x, y):
        r = self.rates(x)
        r_cl = np.maximum(r, RATE_FLOOR)
        val = np.sum(y * np.log(r_cl) - r_cl - gammaln(y + 1.0), axis=-1)
        coeff = np.where(r > RATE_FLOOR, y / r_cl - 1.0, -1.0)
        gx = (coeff * r) @ self.C
        return val, gx

    def sample(self, x, rng):
        return rng.poisson(self.rates(x)).astype(float)

    def log_density(self, x, y):
        r = np.maximum(self.rates(x), RATE_FLOOR)
        return np.sum(_poisson_log_pmf(y, r), axis=-1)

    @property
    def quad_count(self):
        return self.ell_nodes_per_dim ** self.dim

    def expected_log_likelihood(self, m, S, y, want_grads=True):
        return _poisson_ell_quadrature(self, m, S, y, self.ell_nodes_per_dim,
                                       want_grads=want_grads)


def _poisson_ell_quadrature(model, m, S, y, nodes_per_dim, want_grads=True):
    """E[log p(y|x)] and gradients for Poisson models by Gauss-Hermite.

    Nodes are x_k = m + chol(S) z_k; the m-gradient is the node average of
    the state gradient of log p(y|x); the S-gradient follows by the
    Cholesky reverse rule, so both are exact derivatives of the quadrature
    value.  Rates are clamped at RATE_FLOOR inside the log.
    """
    m = np.asarray(m, dtype=float)
    S = np.asarray(S, dtype=float)
    dim = m.shape[-1]
    z, w = gauss_hermite_nodes(nodes_per_dim, dim)
    A = chol_pd(S)
    x = m[..., None, :] + z @ np.swapaxes(A, -1, -2)  # (..., K, D)
    yb = np.asarray(y, dtype=float)[..., None, :]     # broadcast over nodes
    g, gx = model.ell_node_terms(x, yb)
    if not np.all(np.isfinite(g)):
        raise QuadratureOverflow("rate overflowed at quadrature nodes")
    value = g @ w
    if not want_grads:
        return value, None, None
    grad_m = np.einsum("k,...kd->...d", w, gx)
    a_bar = np.swapaxes(w[:, None] * gx, -1, -2) @ z
    grad_S = chol_vjp(A, a_bar)
    return value, grad_m, grad_S


def simulate_observations(model, latents, grid, seed):
    """Draw observations at masked grid indices for each trial.

    Returns (trials, T+1, N) with zeros at unobserved indices; deterministic
    given the seed (one counter-based stream per trial).
    """
    from .dynamics import trial_rng

    trials = latents.shape[0]
    n = latents.shape[1]
    out = np.zeros((trials, n, model.n_out))
    idx = np.nonzero(grid.obs_mask)[0]
    for trial in range(trials):
        rng = trial_rng(seed, trial)
        if idx.size:
            out[trial, idx] = model.sample(latents[trial, idx], rng)
    return out


OBSERVATION_KINDS = {
    "gaussian": GaussianObservation,
    "poisson_rbf": PoissonRBFObservation,
    "poisson_exp": PoissonExpObservation,
}
