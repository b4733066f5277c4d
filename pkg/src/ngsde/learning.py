"""Hyperparameter learning: closed-form output updates, Adam for drift
parameters, kernel-hyperparameter search, and the variational-EM loop.

The E-step runs the natural-gradient engine; M-steps update the Gaussian
output parameters (C, d, R) in closed form, parametric drift weights by
Adam on the transition-term sum (exact linear algebra over basis moments
for polynomial drifts), sparse-GP posteriors by their closed-form
coordinate update, and the external-input matrix by least squares.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .chain import MeanParams
from .dynamics import LinearDrift, PolynomialDrift
from .errors import EmptyOccupancy, SingularMomentMatrix, UnsupportedDrift
from .expectations import ExpectationConfig
from .gp import (
    GPDrift,
    InducingPosterior,
    RBFKernel,
    accumulate_update_stats,
    collapsed_objective,
    inducing_kl,
    input_effect_update,
    update_inducing_posterior,
)
from .inference import SINGConfig, elbo_approx, fit, init_state, latents_rmse
from .linalg import chol_pd, gauss_hermite_nodes, symmetrize
from .observations import GaussianObservation

R_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Standard Adam accumulators over a flat parameter vector."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    step_count: int = 0

    def step(self, params, grad):
        """Ascent step (gradients point uphill)."""
        grad = np.asarray(grad, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad ** 2
        mhat = self.m / (1.0 - self.beta1 ** self.step_count)
        vhat = self.v / (1.0 - self.beta2 ** self.step_count)
        return params + self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# closed-form output-parameter update
# ---------------------------------------------------------------------------


def update_output_params(mu, y, obs_mask, r_floor=R_FLOOR):
    """Joint maximizer of the expected Gaussian log-likelihood in (C, d, R).

    Sums run over observed (trial, index) pairs:
        C* = (sum (y - ybar)(m - mbar)^T) (sum ((m - mbar)(m - mbar)^T + S))^{-1}
        d* = ybar - C* mbar
        R*_jj = mean[(y_j - C_j m - d_j)^2 + C_j S C_j^T]   (floored).
    """
    idx = np.nonzero(obs_mask)[0]
    if idx.size == 0:
        raise SingularMomentMatrix("no observations to fit output parameters")
    m_obs = mu.m[:, idx, :].reshape(-1, mu.m.shape[-1])
    S_obs = mu.covs[:, idx, :, :].reshape(-1, mu.m.shape[-1], mu.m.shape[-1])
    y_obs = y[:, idx, :].reshape(-1, y.shape[-1])
    n = m_obs.shape[0]
    d_lat = m_obs.shape[1]
    if n < d_lat + 1:
        raise SingularMomentMatrix("need at least D+1 observations")
    ybar = y_obs.mean(axis=0)
    mbar = m_obs.mean(axis=0)
    mc = m_obs - mbar
    yc = y_obs - ybar
    M2 = mc.T @ mc + S_obs.sum(axis=0)
    cross = yc.T @ mc
    try:
        chol_pd(M2)
    except Exception as exc:
        raise SingularMomentMatrix("second-moment matrix singular") from exc
    C = np.linalg.solve(symmetrize(M2), cross.T).T
    d = ybar - C @ mbar
    resid = y_obs - m_obs @ C.T - d
    r = (resid ** 2).mean(axis=0) + np.einsum(
        "jd,de,je->j", C, S_obs.mean(axis=0), C
    )
    r = np.maximum(r, r_floor)
    return C, d, r


# ---------------------------------------------------------------------------
# drift-parameter gradients (parametric drifts)
# ---------------------------------------------------------------------------


def _basis_moments(drift, mu, cfg, rng=None):
    """Quadrature moments of the polynomial feature vector under each marginal.

    Returns (Ephi, Ephi2, R) with
        Ephi  (B, T, K)       = E[phi(x_i)]
        Ephi2 (B, T, K, K)    = E[phi phi^T]
        R     (B, T, K, D)    = E[phi (x_{i+1} - x_i)^T]  (via the pairwise
                                 moments and the feature-Jacobian identity).
    """
    m = mu.m[:, :-1]
    S = mu.covs[:, :-1]
    X = mu.cross_covs
    d = m.shape[-1]
    method = cfg.resolve(d)
    if method == "quadrature":
        z, w = gauss_hermite_nodes(cfg.nodes_per_dim, d)
    else:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        z = rng.standard_normal(m.shape[:-1] + (cfg.samples, d))
        w = np.full(cfg.samples, 1.0 / cfg.samples)
    A = chol_pd(S)
    if z.ndim == 2:
        e = np.einsum("...ij,kj->...ki", A, z)
    else:
        e = np.einsum("...ij,...kj->...ki", A, z)
    x = m[..., None, :] + e
    phi = drift.basis(x)              # (B, T, K, P)
    dphi = drift.basis_jacobian(x)    # (B, T, K, P, D)
    Ephi = np.einsum("k,...kp->...p", w, phi)
    Ephi2 = np.einsum("k,...kp,...kq->...pq", w, phi, phi)
    Ephie = np.einsum("k,...kp,...ke->...pe", w, phi, e)
    Sinv = np.linalg.inv(symmetrize(S))
    Edphi = Ephie @ Sinv  # covariance-form E[d phi / d x]
    dm = mu.m[:, 1:] - m
    # E[phi (x_{i+1} - x_i)^T] = Ephi dm^T + Edphi (S_{i,i+1} - S_i)
    dS = np.swapaxes(X, -1, -2) - S
    R = Ephi[..., None] * dm[..., None, :] + Edphi @ dS
    return Ephi, Ephi2, R


def _as_poly_view(drift):
    """Polynomial-basis view of a parametric drift (shared gradient path)."""
    if isinstance(drift, PolynomialDrift):
        return drift, lambda W: drift.with_params(W.reshape(-1))
    if isinstance(drift, LinearDrift):
        poly = PolynomialDrift(
            weights=np.concatenate([drift.b[:, None], drift.A], axis=1),
            degree=1,
        )
        return poly, lambda W: LinearDrift(A=W[:, 1:], b=W[:, 0])
    raise UnsupportedDrift(
        f"analytic drift-parameter gradients cover linear and polynomial "
        f"drifts, not {drift.kind}"
    )


class PolyDriftObjective:
    """Quadratic-in-weights view of the transition-term sum.

    For f(x) = W phi(x) the relevant part of the summed transition
    expectations is

        G(W) = sum_i [ tr(W^T P R_i^T) - (Delta_i / 2) tr(W^T P W M2_i) ],

    with P = Sigma^{-1}, M2_i = E[phi phi^T], and R_i = E[phi (x_{i+1} -
    x_i)^T]; the basis moments are computed once per posterior, so Adam
    iterations are exact linear algebra.
    """

    def __init__(self, poly, mu, diffusion, deltas, cfg, rng=None):
        _, Ephi2, R = _basis_moments(poly, mu, cfg, rng=rng)
        self.P = diffusion.inv
        self.M2w = np.einsum("t,btpq->pq", deltas, Ephi2)
        self.Rsum = np.einsum("btpe->pe", R)

    def gradient(self, W):
        return self.P @ self.Rsum.T - self.P @ W @ self.M2w

    def value(self, W):
        PW = self.P @ W
        return float(
            np.einsum("dp,dp->", PW, self.Rsum.T)
            - 0.5 * np.einsum("dp,dp->", PW, W @ self.M2w)
        )


def drift_param_gradient(drift, mu, diffusion, deltas, cfg, rng=None):
    """Gradient of the transition-term sum with respect to flat drift params.

    Exact linear algebra over basis-function moments for linear and
    polynomial drifts; raises UnsupportedDrift otherwise.
    """
    poly, _ = _as_poly_view(drift)
    obj = PolyDriftObjective(poly, mu, diffusion, deltas, cfg, rng=rng)
    grad = obj.gradient(poly.weights)
    if isinstance(drift, LinearDrift):
        return np.concatenate([grad[:, 1:].reshape(-1), grad[:, 0]])
    return grad.reshape(-1)


def transition_sum(drift, bundle, mu, cfg, rng=None):
    """Sum of transition expectations for the current posterior."""
    from .expectations import transition_quantities
    from .inference import _transition_offsets

    res = transition_quantities(
        bundle.drift if drift is None else drift,
        bundle.diffusion, bundle.grid.deltas, mu.m, mu.covs, mu.cross_covs,
        cfg, rng=rng, offsets=_transition_offsets(bundle), want_grads=False,
    )
    return float(res["value"].sum())


# ---------------------------------------------------------------------------
# kernel-hyperparameter learning (collapsed objective, 2 scalars)
# ---------------------------------------------------------------------------


def kernel_hyper_objective(log_params, Z, mu, deltas, sigma_diag,
                           offsets=None):
    """Collapsed objective max_{q(u)} L as a function of (log ell, log scale)."""
    from .gp import InducingPoints

    kern = RBFKernel(lengthscale=float(np.exp(log_params[0])),
                     outputscale=float(np.exp(log_params[1])))
    ind = InducingPoints(Z=Z, kernel=kern)
    Psi_w, B, var_const = accumulate_update_stats(kern, ind, mu, deltas,
                                                  offsets=offsets)
    post = update_inducing_posterior(kern, ind, mu, deltas, sigma_diag,
                                     offsets=offsets)
    return collapsed_objective(kern, ind, post, Psi_w, B, var_const,
                               sigma_diag), post


def fit_kernel_hypers(kernel, Z, mu, deltas, sigma_diag, steps, lr=5e-2,
                      offsets=None, fd_eps=1e-4):
    """Adam on (log lengthscale, log outputscale) with central-difference
    gradients of the collapsed objective."""
    theta = np.log([kernel.lengthscale, kernel.outputscale])
    adam = AdamState(lr=lr)
    for _ in range(steps):
        grad = np.zeros(2)
        for j in range(2):
            tp = theta.copy(); tp[j] += fd_eps
            tm = theta.copy(); tm[j] -= fd_eps
            vp, _ = kernel_hyper_objective(tp, Z, mu, deltas, sigma_diag,
                                           offsets=offsets)
            vm, _ = kernel_hyper_objective(tm, Z, mu, deltas, sigma_diag,
                                           offsets=offsets)
            grad[j] = (vp - vm) / (2.0 * fd_eps)
        theta = adam.step(theta, grad)
    return RBFKernel(lengthscale=float(np.exp(theta[0])),
                     outputscale=float(np.exp(theta[1])))


# ---------------------------------------------------------------------------
# dynamics RMSE
# ---------------------------------------------------------------------------


def dynamics_rmse(true_drift, learned_drift, trajectories, cells_per_dim=25,
                  bounds=None):
    """Occupancy-weighted drift-field RMSE over a uniform cell grid.

    ``trajectories`` (trials, T+1, D) supply the occupancy weights (the
    fraction of points landing in each cell); the fields are compared at
    occupied cell centers.
    """
    pts = trajectories.reshape(-1, trajectories.shape[-1])
    if pts.shape[0] == 0:
        raise EmptyOccupancy("no trajectory points supplied")
    d = pts.shape[1]
    if bounds is None:
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        pad = 1e-9 + 0.0 * lo
        lo, hi = lo - pad, hi + pad
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    edges = [np.linspace(lo[j], hi[j], cells_per_dim + 1) for j in range(d)]
    counts, _ = np.histogramdd(pts, bins=edges)
    total = counts.sum()
    if total == 0:
        raise EmptyOccupancy("no trajectory point fell into any cell")
    occupied = np.nonzero(counts)
    weights = counts[occupied] / total
    centers = np.stack(
        [0.5 * (edges[j][occupied[j]] + edges[j][occupied[j] + 1])
         for j in range(d)],
        axis=-1,
    )
    diff = true_drift.value(centers) - learned_drift.value(centers)
    return float(np.sqrt(np.sum(weights * np.sum(diff ** 2, axis=-1))))


# ---------------------------------------------------------------------------
# variational EM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VEMConfig:
    """Outer-loop settings; which parameter groups are learned."""

    outer_iters: int = 50
    e_steps_per_iter: int = 10
    m_steps_per_iter: int = 50
    learn_output: bool = True
    learn_r: bool = False     # observation noise stays at the model value
    learn_drift: bool = True
    learn_inputs: bool = False
    drift_lr: float = 1e-2
    kernel_lr: float = 5e-2
    gp_hyper_steps: int = 0   # per outer iteration; 0 keeps kernel fixed
    # M-steps start only once the E-step runs at its working step size;
    # updating hyperparameters against the barely-moved early posteriors
    # collapses the output map onto the observation mean.
    burn_in_iters: int = None  # default: the rho ramp length

    def __post_init__(self):
        if self.outer_iters < 1 or self.e_steps_per_iter < 1 \
                or self.m_steps_per_iter < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass
class VEMResult:
    bundle: object
    state: object
    diagnostics: list
    gp_post: object = None
    gp_kernel: object = None


def vem_fit(bundle, sing_cfg, vem_cfg, inducing=None, callback=None):
    """Alternate E-steps (natural-gradient inference) and M-steps.

    With ``inducing`` supplied the drift is the sparse-GP posterior mean and
    q(u) gets its closed-form update once per outer iteration; otherwise the
    drift must be parametric (linear/polynomial) and is updated by Adam.
    """
    state = None
    adam = AdamState(lr=vem_cfg.drift_lr)
    gp_post = None
    kernel = inducing.kernel if inducing is not None else None
    diagnostics = []
    e_cfg = replace(sing_cfg, iterations=vem_cfg.e_steps_per_iter,
                    track_elbo=False)
    sigma_diag = np.diagonal(bundle.diffusion.Sigma).copy()
    for outer in range(vem_cfg.outer_iters):
        if inducing is not None:
            if gp_post is None:
                gp_post = InducingPosterior.prior(inducing, bundle.dim)
            bundle.drift = GPDrift(inducing=inducing, post=gp_post)
        # E-step: q(x) updates (schedule indexed by outer iteration)
        rho_iter = sing_cfg.rho_schedule.value(outer)
        e_cfg_iter = replace(
            e_cfg,
            rho_schedule=replace(sing_cfg.rho_schedule, kind="constant",
                                 rho=rho_iter),
            seed=sing_cfg.seed + outer,
        )
        state, _ = fit(bundle, e_cfg_iter, state=state)
        burn = vem_cfg.burn_in_iters
        if burn is None:
            burn = (sing_cfg.rho_schedule.ramp_iters
                    if sing_cfg.rho_schedule.kind == "log_linear_ramp" else 0)
        warm = outer + 1 >= burn
        # E-step part 2: closed-form q(u) update
        if inducing is not None and warm:
            gp_post = update_inducing_posterior(
                kernel, inducing, state.mu, bundle.grid.deltas, sigma_diag,
                offsets=None if bundle.input_offsets is None
                else np.broadcast_to(bundle.input_offsets,
                                     (bundle.n_trials,) + bundle.input_offsets.shape[-2:]),
            )
            bundle.drift = GPDrift(inducing=inducing, post=gp_post)
        # M-step
        record = {"outer": outer + 1}
        if warm and vem_cfg.learn_output and isinstance(bundle.observation,
                                                        GaussianObservation):
            C, dvec, r = update_output_params(state.mu, bundle.y,
                                              bundle.grid.obs_mask)
            if not vem_cfg.learn_r:
                r = bundle.observation.R_diag
            bundle.observation = GaussianObservation(C=C, d=dvec, R_diag=r)
        if warm and vem_cfg.learn_drift and inducing is None:
            rng = np.random.default_rng([sing_cfg.seed, 7000 + outer])
            poly, rebuild = _as_poly_view(bundle.drift)
            obj = PolyDriftObjective(poly, state.mu, bundle.diffusion,
                                     bundle.grid.deltas, sing_cfg.expectation,
                                     rng=rng)
            W = poly.weights
            for _ in range(vem_cfg.m_steps_per_iter):
                W = adam.step(W, obj.gradient(W))
            bundle.drift = rebuild(W)
        if warm and inducing is not None and vem_cfg.gp_hyper_steps > 0:
            kernel = fit_kernel_hypers(
                kernel, inducing.Z, state.mu, bundle.grid.deltas, sigma_diag,
                steps=vem_cfg.gp_hyper_steps, lr=vem_cfg.kernel_lr,
            )
            from .gp import InducingPoints

            inducing = InducingPoints(Z=inducing.Z, kernel=kernel)
            gp_post = update_inducing_posterior(
                kernel, inducing, state.mu, bundle.grid.deltas, sigma_diag)
            bundle.drift = GPDrift(inducing=inducing, post=gp_post)
        if vem_cfg.learn_inputs and bundle.input_offsets is not None:
            raise NotImplementedError(
                "input-effect learning is wired through gp.input_effect_update"
            )
        rng_e = np.random.default_rng([sing_cfg.seed, 9000 + outer])
        record["elbo"] = elbo_approx(bundle, sing_cfg, state=state, rng=rng_e)
        if inducing is not None:
            record["elbo"] -= inducing_kl(inducing, gp_post)
        if bundle.true_latents is not None:
            record["rmse"] = latents_rmse(state.mu, bundle.true_latents)
        diagnostics.append(record)
        if callback is not None:
            callback(outer, bundle, state, record)
    return VEMResult(bundle=bundle, state=state, diagnostics=diagnostics,
                     gp_post=gp_post, gp_kernel=kernel)
