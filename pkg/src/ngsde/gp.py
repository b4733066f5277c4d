"""Sparse Gaussian-process drift estimation with inducing points.

Each output dimension of the drift carries an independent GP prior with a
shared RBF kernel; a variational posterior q(u_d) = N(m_u^d, S_u^d) over
function values at fixed inducing locations gives closed-form coordinate
updates, posterior drift evaluation at unseen points, and slow-point
probabilities.  Kernel expectations under Gaussian marginals are analytic
for the RBF kernel.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .dynamics import DriftModel
from .errors import SingularInputGram
from .linalg import chol_pd, logdet_from_chol, inv_pd, symmetrize

KZZ_JITTER = 1e-6


@dataclass(frozen=True)
class RBFKernel:
    """k(x, x') = outputscale * exp(-||x - x'||^2 / (2 lengthscale^2))."""

    lengthscale: float = 1.0
    outputscale: float = 1.0

    def __post_init__(self):
        if self.lengthscale <= 0 or self.outputscale <= 0:
            raise ValueError("kernel hyperparameters must be positive")

    def __call__(self, x, z):
        """Cross Gram values k(x, z_m): x (..., D) against z (M, D) -> (..., M)."""
        diff = np.asarray(x)[..., None, :] - np.asarray(z)
        sq = np.sum(diff ** 2, axis=-1)
        return self.outputscale * np.exp(-0.5 * sq / self.lengthscale ** 2)

    def cross_grad(self, x, z):
        """d k(x, z_m) / d x: (..., M, D) for a single x per batch entry."""
        diff = np.asarray(x)[..., None, :] - np.asarray(z)
        sq = np.sum(diff ** 2, axis=-1)
        k = self.outputscale * np.exp(-0.5 * sq / self.lengthscale ** 2)
        return -k[..., None] * diff / self.lengthscale ** 2


@dataclass(frozen=True)
class InducingPoints:
    """Fixed inducing locations with a cached, jittered Gram factor."""

    Z: np.ndarray
    kernel: RBFKernel

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        object.__setattr__(self, "Z", Z)
        gram = self.kernel(Z, Z)
        gram = gram + KZZ_JITTER * self.kernel.outputscale * np.eye(Z.shape[0])
        object.__setattr__(self, "Kzz", gram)
        object.__setattr__(self, "chol", chol_pd(gram))
        object.__setattr__(self, "Kzz_inv", inv_pd(gram))

    @property
    def count(self):
        return self.Z.shape[0]

    @property
    def dim(self):
        return self.Z.shape[1]

    @classmethod
    def grid(cls, kernel, lo, hi, per_dim, dim):
        axes = [np.linspace(lo, hi, per_dim) for _ in range(dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        Z = np.stack([g.reshape(-1) for g in mesh], axis=-1)
        return cls(Z=Z, kernel=kernel)


@dataclass(frozen=True)
class InducingPosterior:
    """q(u_d) = N(m_u[:, d], S_u[d]) per output dimension."""

    m_u: np.ndarray   # (M, D_out)
    S_u: np.ndarray   # (D_out, M, M)

    @classmethod
    def prior(cls, inducing, dim_out):
        m = inducing.count
        return cls(
            m_u=np.zeros((m, dim_out)),
            S_u=np.broadcast_to(inducing.Kzz, (dim_out, m, m)).copy(),
        )


def kernel_expectations(kernel, Z, m, S):
    """Analytic RBF-kernel expectations under N(m, S).

    Returns (psi1, psi2, dpsi):
        psi1 = E[k_zx]                (..., M)
        psi2 = E[k_zx k_xz]           (..., M, M)
        dpsi = E[d k_zx / d x]        (..., M, D)
    Leading batch dimensions of (m, S) are supported.
    """
    m = np.asarray(m, dtype=float)
    S = np.asarray(S, dtype=float)
    d = m.shape[-1]
    ell2 = kernel.lengthscale ** 2
    eye = np.eye(d)
    # psi1: Gaussian integral of one RBF bump
    W1 = inv_pd(S + ell2 * eye)
    det1 = np.linalg.det(S / ell2 + eye)
    diff = m[..., None, :] - Z  # (..., M, D)
    quad1 = np.einsum("...md,...de,...me->...m", diff, W1, diff)
    psi1 = kernel.outputscale * det1[..., None] ** -0.5 * np.exp(-0.5 * quad1)
    # dpsi: E[(x - z) k] = (mu_prod - z) psi1 with the product-form mean
    mu_prod_minus_z = diff - np.einsum(
        "...de,...me->...md", S @ W1, diff
    )  # (m - z) - S W1 (m - z) ... equals mu_prod - z
    dpsi = -(mu_prod_minus_z / ell2) * psi1[..., None]
    # psi2: product of two bumps is a bump at the pair midpoint
    W2 = inv_pd(S + 0.5 * ell2 * eye)
    det2 = np.linalg.det(2.0 * S / ell2 + eye)
    zbar = 0.5 * (Z[:, None, :] + Z[None, :, :])  # (M, M, D)
    diff2 = m[..., None, None, :] - zbar
    quad2 = np.einsum("...mnd,...de,...mne->...mn", diff2, W2, diff2)
    zdist = np.sum((Z[:, None, :] - Z[None, :, :]) ** 2, axis=-1)
    psi2 = (
        kernel.outputscale ** 2
        * np.exp(-0.25 * zdist / ell2)
        * det2[..., None, None] ** -0.5
        * np.exp(-0.5 * quad2)
    )
    return psi1, psi2, dpsi


def accumulate_update_stats(kernel, inducing, mu, deltas, sigma_diag=None,
                            offsets=None, time_chunk=None):
    """Sums over trials and intervals needed by the q(u) update.

    mu is the chain MeanParams with batched (trials, T+1, ...) moments.
    Returns (Psi_w, B, var_const) where
        Psi_w = sum_i Delta_i E[k_zx k_xz]                     (M, M)
        B     = sum_i [ psi1 (m_{i+1}-m_i)^T + dpsi (S_{i,i+1}-S_i) ]  (M, D)
        var_const = sum_i Delta_i (sigma_f^2 - tr(Kzz^{-1} psi2_i)),
    the f-independent part of the integrated conditional variance.
    ``offsets`` (trials, T, D) subtracts known input effects from the
    increment targets.
    """
    m = mu.m
    S = mu.covs
    X = mu.cross_covs  # Cov(x_{i+1}, x_i)
    ntr, n, d = m.shape
    nt = n - 1
    M = inducing.count
    Psi_w = np.zeros((M, M))
    B = np.zeros((M, d))
    var_const = 0.0
    if time_chunk is None:
        time_chunk = max(1, int(2e7 / max(ntr * M * M, 1)))
    Kzz_inv = inducing.Kzz_inv
    for lo in range(0, nt, time_chunk):
        hi = min(lo + time_chunk, nt)
        psi1, psi2, dpsi = kernel_expectations(
            kernel, inducing.Z, m[:, lo:hi], S[:, lo:hi]
        )
        w = deltas[lo:hi]
        Psi_w += np.einsum("t,btmn->mn", w, psi2)
        dm = m[:, lo + 1:hi + 1] - m[:, lo:hi]
        if offsets is not None:
            dm = dm - w[:, None] * offsets[:, lo:hi]
        B += np.einsum("btm,btd->md", psi1, dm)
        # S_{i,i+1} - S_i = X_i^T - S_i
        dS = np.swapaxes(X[:, lo:hi], -1, -2) - S[:, lo:hi]
        B += np.einsum("btme,bted->md", dpsi, dS)
        var_const += float(
            np.einsum("t,bt->", w,
                      kernel.outputscale
                      - np.einsum("mn,btnm->bt", Kzz_inv, psi2))
        )
    return symmetrize(Psi_w), B, var_const


def update_inducing_posterior(kernel, inducing, mu, deltas, sigma_diag,
                              offsets=None):
    """Closed-form maximizer of the collapsed objective over q(u).

        S_u^d = Kzz (Kzz + (1/sigma_d^2) Psi_w)^{-1} Kzz
        m_u^d = Kzz (Kzz + (1/sigma_d^2) Psi_w)^{-1} B_d / sigma_d^2
    """
    Psi_w, B, _ = accumulate_update_stats(kernel, inducing, mu, deltas,
                                          offsets=offsets)
    d = B.shape[1]
    M = inducing.count
    m_u = np.empty((M, d))
    S_u = np.empty((d, M, M))
    for dd in range(d):
        s2 = sigma_diag[dd]
        lhs = inducing.Kzz + Psi_w / s2
        chol_pd(lhs)
        sol = np.linalg.solve(lhs, np.concatenate(
            [B[:, dd:dd + 1] / s2, inducing.Kzz], axis=1))
        m_u[:, dd] = inducing.Kzz @ sol[:, 0]
        S_u[dd] = symmetrize(inducing.Kzz @ sol[:, 1:])
    return InducingPosterior(m_u=m_u, S_u=S_u)


def inducing_kl(inducing, post):
    """sum_d KL(q(u_d) || N(0, Kzz))."""
    M = inducing.count
    logdet_k = logdet_from_chol(inducing.chol)
    total = 0.0
    for dd in range(post.m_u.shape[1]):
        S = post.S_u[dd]
        chol_s = chol_pd(S)
        logdet_s = logdet_from_chol(chol_s)
        mvec = post.m_u[:, dd]
        total += 0.5 * (
            np.trace(inducing.Kzz_inv @ S)
            + mvec @ inducing.Kzz_inv @ mvec - M + logdet_k - logdet_s
        )
    return float(total)


def collapsed_objective(kernel, inducing, post, Psi_w, B, var_const,
                        sigma_diag):
    """The q(u)-dependent part of the collapsed ELBO given fixed q(x).

    Equals sum_d [ B_d^T Kzz^{-1} m_u^d - 1/2 (m_u^T Q m_u + tr(Q S_u))
    - var_const/2 ] / sigma_d^2 - sum_d KL(q(u_d) || p(u_d)) with
    Q = Kzz^{-1} Psi_w Kzz^{-1}; constants independent of q(u) are dropped.
    """
    Kinv = inducing.Kzz_inv
    Q = symmetrize(Kinv @ Psi_w @ Kinv)
    total = 0.0
    for dd in range(post.m_u.shape[1]):
        s2 = sigma_diag[dd]
        mvec = post.m_u[:, dd]
        alpha = Kinv @ mvec
        total += (
            B[:, dd] @ alpha
            - 0.5 * (mvec @ Q @ mvec + np.einsum("mn,nm->", Q, post.S_u[dd]))
            - 0.5 * var_const
        ) / s2
    return float(total) - inducing_kl(inducing, post)


def posterior_drift(x_star, inducing, post):
    """Posterior mean and variance of each drift output at x_star (..., D)."""
    x = np.asarray(x_star)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    kx = inducing.kernel(xb, inducing.Z)  # (..., M)
    Kinv = inducing.Kzz_inv
    mean = kx @ (Kinv @ post.m_u)  # (..., D_out)
    kappa = inducing.kernel.outputscale
    base = np.einsum("...m,mn,...n->...", kx, Kinv, kx)
    var = np.empty(mean.shape)
    for dd in range(post.m_u.shape[1]):
        W = Kinv @ post.S_u[dd] @ Kinv
        var[..., dd] = kappa - base + np.einsum("...m,mn,...n->...", kx, W, kx)
    if single:
        return mean[0], var[0]
    return mean, var


def slow_point_probability(x_star, inducing, post, epsilon):
    """prod_d P[|f_d(x*)| < epsilon] under the posterior drift."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    mean, var = posterior_drift(x_star, inducing, post)
    sd = np.sqrt(np.maximum(var, 1e-300))
    p = ndtr((epsilon - mean) / sd) - ndtr((-epsilon - mean) / sd)
    return np.prod(p, axis=-1)


def input_effect_update(mu, inputs, deltas, drift_Ef):
    """Least-squares-optimal input matrix B for drift f(x) + B v(t).

    drift_Ef is E_{q(f), q(x_i)}[f(x_i)] per (trial, interval): (trials, T, D).
    Raises :class:`SingularInputGram` when sum_i v_i v_i^T is singular.
    """
    v = np.asarray(inputs, dtype=float)  # (T, I)
    dm = mu.m[:, 1:] - mu.m[:, :-1] - deltas[:, None] * drift_Ef
    lhs = np.einsum("t,ti,tj->ij", deltas, v, v) * mu.m.shape[0]
    rhs = np.einsum("btd,ti->di", dm, v)
    try:
        chol_pd(lhs)
    except Exception as exc:
        raise SingularInputGram("input Gram matrix is singular") from exc
    cond = np.linalg.cond(lhs)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularInputGram("input Gram matrix is singular")
    return np.linalg.solve(lhs.T, rhs.T).T


# ---------------------------------------------------------------------------
# GP-posterior-backed drift model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GPDrift(DriftModel):
    """Drift whose value is the sparse-GP posterior mean, with variance hooks.

    The transition-expectation machinery adds the per-dimension posterior
    variance to the f^T Sigma^{-1} f term through ``posterior_variance`` /
    ``posterior_variance_jac``.
    """

    inducing: InducingPoints
    post: InducingPosterior
    kind = "gp_posterior"

    def __post_init__(self):
        Kinv = self.inducing.Kzz_inv
        object.__setattr__(self, "_alpha", Kinv @ self.post.m_u)  # (M, D)
        W = np.stack([
            Kinv @ (self.inducing.Kzz - self.post.S_u[dd]) @ Kinv
            for dd in range(self.post.m_u.shape[1])
        ])
        object.__setattr__(self, "_W", symmetrize(W))  # (D, M, M)

    @property
    def dim(self):
        return self.post.m_u.shape[1]

    def value(self, x):
        k = self.inducing.kernel(x, self.inducing.Z)
        return k @ self._alpha

    def jacobian(self, x):
        dk = self.inducing.kernel.cross_grad(x, self.inducing.Z)  # (..., M, D)
        return np.einsum("md,...mj->...dj", self._alpha, dk)

    def posterior_variance(self, x):
        k = self.inducing.kernel(x, self.inducing.Z)
        kappa = self.inducing.kernel.outputscale
        quad = np.einsum("...m,dmn,...n->...d", k, self._W, k)
        return np.maximum(kappa - quad, 0.0)

    def posterior_variance_jac(self, x):
        """(..., D_out, D_in): row d is d v_d / d x."""
        k = self.inducing.kernel(x, self.inducing.Z)
        dk = self.inducing.kernel.cross_grad(x, self.inducing.Z)
        wk = np.einsum("dmn,...n->...dm", self._W, k)
        return -2.0 * np.einsum("...dm,...mj->...dj", wk, dk)
