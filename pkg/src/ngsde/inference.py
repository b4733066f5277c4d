"""Natural-gradient variational inference loop for latent SDE models.

One natural-gradient step mixes the current natural parameters with the
moment-space gradients of the expected log-likelihood, prior-transition,
and initial-state terms:

    (h_i, J_i) <- (1 - rho)(h_i, J_i) + rho * grad wrt (mu_{i,1}, mu_{i,2}),
    L_i        <- (1 - rho) L_i       + rho * grad wrt mu_{i,3},

with the gradients assembled through the local change of variables
m_i = mu_{i,1}, S_i = mu_{i,2} - mu_{i,1} mu_{i,1}^T,
S_{i+1,i} = mu_{i,3} - mu_{i+1,1} mu_{i,1}^T.  In the conjugate
(linear-drift, Gaussian-observation) case a single step with rho = 1 lands
exactly on the discrete posterior.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .chain import (
    MeanParams,
    NaturalParams,
    em_discretize_linear,
    kl_divergence,
    lds_chain,
    log_normalizer_parallel,
    log_normalizer_sequential,
    natural_mean_inner,
    natural_to_mean,
)
from .dynamics import LinearDrift
from .errors import NotPositiveDefinite, StepFailed, UnsupportedDrift
from .expectations import ExpectationConfig, transition_quantities
from .linalg import inv_pd, symmetrize

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RhoSchedule:
    """Step-size schedule: constant or log-linear ramp then hold."""

    kind: str = "constant"
    rho: float = 1.0
    rho_start: float = 1e-3
    rho_end: float = 10 ** -1.5
    ramp_iters: int = 10

    def __post_init__(self):
        if self.kind not in ("constant", "log_linear_ramp"):
            raise ValueError(f"unknown rho schedule: {self.kind}")
        for v in (self.rho, self.rho_start, self.rho_end):
            if not 0.0 < v <= 1.0:
                raise ValueError("step sizes must lie in (0, 1]")

    def value(self, iteration):
        if self.kind == "constant":
            return self.rho
        if iteration >= self.ramp_iters - 1:
            return self.rho_end
        frac = iteration / max(self.ramp_iters - 1, 1)
        return float(np.exp(
            (1.0 - frac) * np.log(self.rho_start) + frac * np.log(self.rho_end)
        ))


@dataclass(frozen=True)
class SINGConfig:
    """Inference-loop settings: iterations, step sizes, expectations, backoff."""

    iterations: int = 100
    rho_schedule: RhoSchedule = field(default_factory=RhoSchedule)
    expectation: ExpectationConfig = field(default_factory=ExpectationConfig)
    max_halvings: int = 10
    conversion: str = "auto"  # "sequential" | "parallel" | "auto"
    seed: int = 0
    track_elbo: bool = True


@dataclass
class ModelBundle:
    """Generative-model pieces plus data, shared by inference and learning."""

    drift: object
    diffusion: object
    initial: object
    observation: object
    grid: object
    y: np.ndarray                   # (trials, T+1, N); zeros where unobserved
    input_offsets: np.ndarray = None  # optional (T, D) or (trials, T, D)
    true_latents: np.ndarray = None   # optional (trials, T+1, D)

    @property
    def n_trials(self):
        return self.y.shape[0]

    @property
    def dim(self):
        return self.initial.dim


@dataclass
class InferenceState:
    """Per-trial natural parameters with a consistent mean-parameter cache."""

    eta: NaturalParams
    mu: MeanParams
    iteration: int = 0
    elbo_trace: list = field(default_factory=list)
    total_halvings: int = 0

    @property
    def means(self):
        return self.mu.m

    @property
    def covs(self):
        return self.mu.covs


def pick_conversion(conversion, eta):
    if conversion != "auto":
        return conversion
    batch = int(np.prod(eta.batch_shape)) if eta.batch_shape else 1
    return "parallel" if (eta.num_steps + 1 >= 256 and batch <= 8) else "sequential"


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def prior_chain(bundle, batch=True):
    """Natural parameters of the discretized prior, linearized about nu.

    For a linear drift this is the prior chain itself; otherwise the drift
    is replaced by its tangent affine map at the initial mean.  Unstable
    tangent maps are shifted to be strictly stable: the literal
    linearization of e.g. an oscillator about a repelling fixed point makes
    the prior-chain moments overflow on long horizons, while a stabilized
    affine map keeps the start both positive definite and well conditioned.
    """
    drift, init = bundle.drift, bundle.initial
    if isinstance(drift, LinearDrift):
        A, b = drift.A, drift.b
    else:
        A = drift.jacobian(init.nu)
        b = drift.value(init.nu) - A @ init.nu
        max_re = float(np.max(np.real(np.linalg.eigvals(A))))
        if max_re > -0.1:
            A = A - (max_re + 1.0) * np.eye(A.shape[0])
            b = drift.value(init.nu) - A @ init.nu
    At, bt, Q = em_discretize_linear(A, b, bundle.diffusion.Sigma,
                                     bundle.grid.deltas)
    eta = lds_chain(At, bt, Q, init.nu, init.V)
    if batch and bundle.n_trials > 1:
        reps = (bundle.n_trials,) + (1,) * eta.h.ndim
        eta = NaturalParams(
            h=np.tile(eta.h, (bundle.n_trials, 1, 1)),
            J=np.tile(eta.J, (bundle.n_trials, 1, 1, 1)),
            L=np.tile(eta.L, (bundle.n_trials, 1, 1, 1)),
        )
    elif batch:
        eta = NaturalParams(h=eta.h[None], J=eta.J[None], L=eta.L[None])
    return eta


def init_state(bundle, cfg=None):
    eta = prior_chain(bundle)
    method = pick_conversion(cfg.conversion if cfg else "auto", eta)
    mu = natural_to_mean(eta, method=method)
    return InferenceState(eta=eta, mu=mu)


# ---------------------------------------------------------------------------
# per-term values and gradients
# ---------------------------------------------------------------------------


def observation_terms(bundle, m, S, want_grads=True, time_chunk=None):
    """Masked expected log-likelihood per grid index, with moment gradients.

    Returns (value, grad_m, grad_S) of shapes (B, T+1), (B, T+1, D),
    (B, T+1, D, D); entries at unobserved indices are zero.
    """
    mask = bundle.grid.obs_mask
    idx = np.nonzero(mask)[0]
    batch = m.shape[:-2]
    n, d = m.shape[-2], m.shape[-1]
    value = np.zeros(batch + (n,))
    gm = np.zeros(batch + (n, d))
    gS = np.zeros(batch + (n, d, d))
    if idx.size == 0:
        return value, gm, gS
    if time_chunk is None:
        k_nodes = getattr(bundle.observation, "quad_count", 1)
        per_index = max(int(np.prod(batch)) * bundle.observation.n_out * k_nodes, 1)
        time_chunk = max(1, int(5e6 / per_index))
    for lo in range(0, idx.size, time_chunk):
        sel = idx[lo:lo + time_chunk]
        out = bundle.observation.expected_log_likelihood(
            m[..., sel, :], S[..., sel, :, :], bundle.y[..., sel, :],
            want_grads=want_grads,
        )
        value[..., sel] = out[0]
        if want_grads:
            gm[..., sel, :] = out[1]
            gS[..., sel, :, :] = out[2]
    return value, gm, gS


def initial_terms(bundle, m0, S0):
    """E[log N(x_0 | nu, V)] and gradients wrt (m_0, S_0)."""
    init = bundle.initial
    d = init.dim
    Vinv = inv_pd(init.V)
    sign, logdetV = np.linalg.slogdet(init.V)
    diff = m0 - init.nu
    quad = np.einsum("...d,de,...e->...", diff, Vinv, diff)
    trace = np.einsum("de,...de->...", Vinv, S0)
    value = -0.5 * (d * LOG_2PI + logdetV + quad + trace)
    gm = -diff @ Vinv
    gS = np.broadcast_to(-0.5 * Vinv, S0.shape)
    return value, gm, gS


def _transition_offsets(bundle):
    off = bundle.input_offsets
    if off is None:
        return None
    off = np.asarray(off, dtype=float)
    if off.ndim == 2:
        return np.broadcast_to(off, (bundle.n_trials,) + off.shape)
    return off


def elbo_approx(bundle, cfg, eta=None, mu=None, state=None, rng=None,
                method=None):
    """Discrete-time ELBO: expected log-lik + transition + initial terms
    plus the entropy of q; summed over trials."""
    if state is not None:
        eta, mu = state.eta, state.mu
    if mu is None:
        mu = natural_to_mean(eta, method=pick_conversion(cfg.conversion, eta))
    m, S, X = mu.m, mu.covs, mu.cross_covs
    trans = transition_quantities(
        bundle.drift, bundle.diffusion, bundle.grid.deltas, m, S, X,
        cfg.expectation, rng=rng, offsets=_transition_offsets(bundle),
        want_grads=False,
    )
    obs_val, _, _ = observation_terms(bundle, m, S, want_grads=False)
    init_val, _, _ = initial_terms(bundle, m[..., 0, :], S[..., 0, :, :])
    method = method or pick_conversion(cfg.conversion, eta)
    A = (log_normalizer_parallel(eta) if method == "parallel"
         else log_normalizer_sequential(eta))
    ent = A - natural_mean_inner(eta, mu)
    total = (trans["value"].sum(axis=-1) + obs_val.sum(axis=-1) + init_val + ent)
    return float(np.sum(total))


# ---------------------------------------------------------------------------
# the natural-gradient step
# ---------------------------------------------------------------------------


def moment_gradients(bundle, cfg, mu, rng=None):
    """Assemble per-index gradients of the target terms wrt (mu1, mu2, mu3).

    Returns (g1, G2, G3): g1 (B, T+1, D), G2 (B, T+1, D, D) symmetric,
    G3 (B, T, D, D).
    """
    m, S, X = mu.m, mu.covs, mu.cross_covs
    trans = transition_quantities(
        bundle.drift, bundle.diffusion, bundle.grid.deltas, m, S, X,
        cfg.expectation, rng=rng, offsets=_transition_offsets(bundle),
        want_grads=True,
    )
    _, obs_gm, obs_gS = observation_terms(bundle, m, S)
    _, init_gm, init_gS = initial_terms(bundle, m[..., 0, :], S[..., 0, :, :])
    a_tot = obs_gm.copy()
    B_tot = obs_gS.copy()
    a_tot[..., :-1, :] += trans["dm_l"]
    a_tot[..., 1:, :] += trans["dm_r"]
    B_tot[..., :-1, :, :] += trans["dS_l"]
    B_tot[..., 1:, :, :] += trans["dS_r"]
    a_tot[..., 0, :] += init_gm
    B_tot[..., 0, :, :] += init_gS
    B_tot = symmetrize(B_tot)
    C = trans["dX"]
    # local change of variables (mu1, mu2, mu3) -> (m, S, S_cross)
    g1 = a_tot - 2.0 * np.einsum("...iab,...ib->...ia", B_tot, m)
    g1[..., :-1, :] -= np.einsum("...iba,...ib->...ia", C, m[..., 1:, :])
    g1[..., 1:, :] -= np.einsum("...iab,...ib->...ia", C, m[..., :-1, :])
    return g1, B_tot, C


def apply_update(eta, g1, G2, G3, rho):
    """Convex combination of eta with the moment-space gradient in
    (h, J, L) coordinates."""
    return NaturalParams(
        h=(1.0 - rho) * eta.h + rho * g1,
        J=(1.0 - rho) * eta.J - 2.0 * rho * G2,
        L=(1.0 - rho) * eta.L - rho * G3,
    )


def ngvi_step(state, bundle, cfg, rho, rng=None):
    """One natural-gradient step with step-size-halving backoff.

    Returns the updated state; raises :class:`StepFailed` when the step
    cannot re-enter the PD cone within ``cfg.max_halvings`` halvings.
    """
    if rho == 0.0:
        return state
    g1, G2, G3 = moment_gradients(bundle, cfg, state.mu, rng=rng)
    method = pick_conversion(cfg.conversion, state.eta)
    halvings = 0
    cur_rho = rho
    while True:
        eta_new = apply_update(state.eta, g1, G2, G3, cur_rho)
        try:
            mu_new = natural_to_mean(eta_new, method=method)
            break
        except NotPositiveDefinite:
            halvings += 1
            if halvings > cfg.max_halvings:
                raise StepFailed(state.iteration, halvings - 1) from None
            cur_rho *= 0.5
    return InferenceState(
        eta=eta_new, mu=mu_new, iteration=state.iteration + 1,
        elbo_trace=state.elbo_trace,
        total_halvings=state.total_halvings + halvings,
    )


def latents_rmse(mu, true_latents):
    """Posterior latents RMSE: sqrt of the mean over trials and time of
    E_q ||x_i - x_i^true||^2 = tr(S_i) + ||m_i - x_i^true||^2."""
    S = mu.covs
    per_index = np.trace(S, axis1=-2, axis2=-1) + np.sum(
        (mu.m - true_latents) ** 2, axis=-1
    )
    return float(np.sqrt(np.mean(per_index)))


def fit(bundle, cfg, state=None, callback=None):
    """Run the configured number of natural-gradient iterations.

    Returns (state, diagnostics) where diagnostics is a list of per-iteration
    records (iteration, rho, elbo, rmse, halvings, seconds).
    """
    if state is None:
        state = init_state(bundle, cfg)
    diagnostics = []
    for j in range(cfg.iterations):
        rho = cfg.rho_schedule.value(j)
        rng = np.random.default_rng([cfg.seed, state.iteration])
        t0 = time.perf_counter()
        prev_halvings = state.total_halvings
        state = ngvi_step(state, bundle, cfg, rho, rng=rng)
        record = {
            "iteration": state.iteration,
            "rho": rho,
            "halvings": state.total_halvings - prev_halvings,
            "seconds": time.perf_counter() - t0,
        }
        if cfg.track_elbo:
            rng_e = np.random.default_rng([cfg.seed, state.iteration - 1])
            record["elbo"] = elbo_approx(bundle, cfg, state=state, rng=rng_e)
            state.elbo_trace.append(record["elbo"])
        if bundle.true_latents is not None:
            record["rmse"] = latents_rmse(state.mu, bundle.true_latents)
        diagnostics.append(record)
        if callback is not None:
            callback(state, record)
    return state, diagnostics


# ---------------------------------------------------------------------------
# discretization study (empirical order of the ELBO gap)
# ---------------------------------------------------------------------------


def _linear_pieces(drift):
    if not isinstance(drift, LinearDrift):
        raise UnsupportedDrift(
            "the discretization study requires a linear prior drift"
        )
    return drift.A, drift.b


def continuous_elbo_reference(bundle, var_A, var_b, m0, S0, refine=100):
    """High-accuracy continuous-time ELBO for a fixed linear variational SDE.

    Rolls out the variational moments on a ``refine``-times finer grid with
    the same Euler-Maruyama transition family, accumulates the per-step KL
    increments (Delta/2) E||f - f_q||^2_{Sigma^-1} in closed form, and adds
    the expected log-likelihood at observation times plus the initial KL.
    """
    A_p, b_p = _linear_pieces(bundle.drift)
    Sigma = bundle.diffusion.Sigma
    P = bundle.diffusion.inv
    grid = bundle.grid
    Dmat = A_p - var_A
    c = b_p - var_b
    d = m0.shape[-1]
    total_kl = np.zeros(bundle.y.shape[0])
    m = np.broadcast_to(m0, bundle.y.shape[:1] + (d,)).copy()
    S = np.broadcast_to(S0, bundle.y.shape[:1] + (d, d)).copy()
    obs_sum = np.zeros(m.shape[:-1])
    eye = np.eye(d)
    for i in range(grid.num_steps + 1):
        if grid.obs_mask[i]:
            val, _, _ = bundle.observation.expected_log_likelihood(
                m, S, bundle.y[:, i, :]
            )
            obs_sum += val
        if i == grid.num_steps:
            break
        dt_f = grid.deltas[i] / refine
        Atil = eye + dt_f * var_A
        for _ in range(refine):
            quad = np.einsum("...d,de,...e->...",
                             m @ Dmat.T + c, P, m @ Dmat.T + c)
            trace = np.einsum("ab,...ab->...", Dmat.T @ P @ Dmat, S)
            total_kl += 0.5 * dt_f * (quad + trace)
            m = m @ Atil.T + dt_f * var_b
            S = Atil @ S @ Atil.T + dt_f * Sigma
    # initial KL(q0 || p0)
    init = bundle.initial
    Vinv = inv_pd(init.V)
    diff = m0 - init.nu
    sign, logdetV = np.linalg.slogdet(init.V)
    sign, logdetS0 = np.linalg.slogdet(S0)
    kl0 = 0.5 * (
        np.trace(Vinv @ S0) + diff @ Vinv @ diff - d + logdetV - logdetS0
    )
    return float(np.sum(obs_sum) - np.sum(total_kl) - bundle.y.shape[0] * kl0)


def approx_elbo_on_grid(bundle, var_A, var_b, m0, S0):
    """Discrete ELBO of the fixed linear variational chain on bundle.grid."""
    A_p, b_p = _linear_pieces(bundle.drift)
    grid = bundle.grid
    At_q, bt_q, Q = em_discretize_linear(var_A, var_b, bundle.diffusion.Sigma,
                                         grid.deltas)
    At_p, bt_p, _ = em_discretize_linear(A_p, b_p, bundle.diffusion.Sigma,
                                         grid.deltas)
    ntr = bundle.y.shape[0]
    m0b = np.broadcast_to(m0, (ntr, m0.shape[-1]))
    eta_q = lds_chain(At_q, bt_q, Q, m0b, S0)
    eta_p = lds_chain(At_p, bt_p, Q,
                      np.broadcast_to(bundle.initial.nu, m0b.shape),
                      bundle.initial.V)
    mu_q = natural_to_mean(eta_q, method="sequential")
    obs_val, _, _ = observation_terms(bundle, mu_q.m, mu_q.covs,
                                      want_grads=False)
    kl = kl_divergence(eta_q, eta_p, mu1=mu_q)
    return float(np.sum(obs_val) - np.sum(kl))


def discretization_study(bundle_factory, dt_list, var_A, var_b, m0, S0,
                         refine=100):
    """Gap |L_cont - L_approx(dt)| per dt for a fixed variational drift.

    ``bundle_factory(dt)`` must return a ModelBundle on the grid with step
    dt carrying the same observations.  Returns a list of (dt, gap) and the
    fitted log-log slope.
    """
    finest = min(dt_list)
    ref_bundle = bundle_factory(finest)
    l_cont = continuous_elbo_reference(ref_bundle, var_A, var_b, m0, S0,
                                       refine=refine)
    rows = []
    for dt in dt_list:
        bundle = bundle_factory(dt)
        l_approx = approx_elbo_on_grid(bundle, var_A, var_b, m0, S0)
        rows.append((float(dt), abs(l_cont - l_approx)))
    logs = np.log(np.array([[dt, gap] for dt, gap in rows if gap > 0]))
    slope = float(np.polyfit(logs[:, 0], logs[:, 1], 1)[0]) if len(logs) > 1 else float("nan")
    return rows, slope
