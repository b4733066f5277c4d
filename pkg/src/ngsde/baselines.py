"""Reference inference methods: exact Kalman/RTS smoothing for the conjugate
discretized model, and the Lagrange-multiplier smoother of Archambeau-style
variational diffusion fitting (here called VDP) for comparisons.

The VDP implementation performs coordinate ascent on the same discrete-time
ELBO as the natural-gradient engine: forward moment recursions of the
Euler-Maruyama chain act as constraints, backward multiplier recursions with
observation jumps update the adjoints, and the variational drift (A_i, b_i)
plus initial state get closed-form (optionally softened) updates.  At a
fixed point the updates satisfy

    A_i = E[J_f] - 2 Sigma Psi_i,
    b_i = E[f] - A_i m_i - Sigma lambda_i,
    m_0 = nu - V lambda_0,        S_0 = (2 Psi_0 + V^{-1})^{-1},

with the multipliers accumulated backward with right-limit jumps at
observation indices.
"""

from dataclasses import dataclass

import numpy as np

from .chain import MeanParams
from .dynamics import LinearDrift
from .errors import Diverged, NotPositiveDefinite
from .expectations import drift_mean_and_covjac, residual_energy
from .inference import latents_rmse, observation_terms
from .linalg import chol_pd, chol_vjp, inv_pd, symmetrize

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Kalman filtering / RTS smoothing
# ---------------------------------------------------------------------------


def kalman_smooth(bundle):
    """Exact posterior of the Euler-Maruyama linear-Gaussian chain.

    Requires a linear drift and Gaussian observations.  Returns
    (MeanParams, log_evidence) with log_evidence summed over trials.
    """
    drift = bundle.drift
    if not isinstance(drift, LinearDrift):
        raise ValueError("Kalman smoothing requires a linear drift")
    obs = bundle.observation
    if obs.kind != "gaussian":
        raise ValueError("Kalman smoothing requires Gaussian observations")
    grid = bundle.grid
    y = bundle.y
    ntr = y.shape[0]
    d = bundle.initial.dim
    n = grid.num_steps + 1
    eye = np.eye(d)
    C, dvec, rd = obs.C, obs.d, obs.R_diag

    deltas = grid.deltas
    A_t = eye + deltas[:, None, None] * drift.A          # (T, D, D)
    b_t = deltas[:, None] * drift.b
    Q_t = deltas[:, None, None] * bundle.diffusion.Sigma

    m_pred = np.broadcast_to(bundle.initial.nu, (ntr, d)).copy()
    P_pred = np.broadcast_to(bundle.initial.V, (ntr, d, d)).copy()
    m_filt = np.empty((ntr, n, d))
    P_filt = np.empty((ntr, n, d, d))
    log_ev = np.zeros(ntr)
    nobs = C.shape[0]
    for i in range(n):
        if grid.obs_mask[i]:
            resid = y[:, i, :] - m_pred @ C.T - dvec
            Sg = C @ P_pred @ C.T + np.diag(rd)
            chol = chol_pd(Sg, index=i)
            sol = np.linalg.solve(symmetrize(Sg), resid[..., None])[..., 0]
            logdet = 2.0 * np.sum(
                np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1
            )
            log_ev += -0.5 * (
                nobs * LOG_2PI + logdet + np.einsum("bn,bn->b", resid, sol)
            )
            K = P_pred @ C.T @ np.linalg.inv(symmetrize(Sg))
            m_f = m_pred + np.einsum("bde,be->bd", K, resid)
            # Joseph form for numerical symmetry
            IKC = eye - K @ C
            P_f = IKC @ P_pred @ np.swapaxes(IKC, -1, -2) + np.einsum(
                "bde,e,bfe->bdf", K, rd, K
            )
        else:
            m_f, P_f = m_pred, P_pred
        m_filt[:, i] = m_f
        P_filt[:, i] = symmetrize(P_f)
        if i < n - 1:
            m_pred = m_f @ A_t[i].T + b_t[i]
            P_pred = A_t[i] @ P_f @ A_t[i].swapaxes(-1, -2) + Q_t[i]
            P_pred = symmetrize(P_pred)
    # RTS backward pass
    m_s = np.empty_like(m_filt)
    P_s = np.empty_like(P_filt)
    X = np.empty((ntr, n - 1, d, d)) if n > 1 else np.zeros((ntr, 0, d, d))
    m_s[:, -1] = m_filt[:, -1]
    P_s[:, -1] = P_filt[:, -1]
    for i in range(n - 2, -1, -1):
        P_pred_i = symmetrize(
            A_t[i] @ P_filt[:, i] @ A_t[i].T + Q_t[i]
        )
        G = P_filt[:, i] @ A_t[i].T @ inv_pd(P_pred_i, index=i)
        m_pred_i = m_filt[:, i] @ A_t[i].T + b_t[i]
        m_s[:, i] = m_filt[:, i] + np.einsum(
            "bde,be->bd", G, m_s[:, i + 1] - m_pred_i
        )
        P_s[:, i] = symmetrize(
            P_filt[:, i]
            + G @ (P_s[:, i + 1] - P_pred_i) @ np.swapaxes(G, -1, -2)
        )
        # Cov(x_{i+1}, x_i | y) = P^s_{i+1} G_i^T
        X[:, i] = P_s[:, i + 1] @ np.swapaxes(G, -1, -2)
    mu = MeanParams.from_moments(m_s, P_s, X)
    return mu, float(np.sum(log_ev))


# ---------------------------------------------------------------------------
# VDP: Lagrange-multiplier smoother with interleaved drift updates
# ---------------------------------------------------------------------------


@dataclass
class VDPState:
    """Variational drift (A, b), marginal moments, multipliers, init state.

    ``lam[i]`` / ``psi[i]`` are the multipliers attached to the constraints
    of interval i (right-limit values at tau_i); the drift of interval i is
    updated from the multipliers at i+1.
    """

    A: np.ndarray        # (trials, T, D, D)
    b: np.ndarray        # (trials, T, D)
    m0: np.ndarray       # (trials, D)
    S0: np.ndarray       # (trials, D, D)
    m: np.ndarray = None
    S: np.ndarray = None
    lam: np.ndarray = None   # (trials, T+1, D)
    psi: np.ndarray = None   # (trials, T+1, D, D)
    iteration: int = 0


def vdp_init(bundle):
    """Initialize the variational drift at the prior linearized about nu."""
    drift, init = bundle.drift, bundle.initial
    if isinstance(drift, LinearDrift):
        A0, b0 = drift.A, drift.b
    else:
        A0 = drift.jacobian(init.nu)
        b0 = drift.value(init.nu) - A0 @ init.nu
    ntr = bundle.n_trials
    nt = bundle.grid.num_steps
    d = init.dim
    return VDPState(
        A=np.broadcast_to(A0, (ntr, nt, d, d)).copy(),
        b=np.broadcast_to(b0, (ntr, nt, d)).copy(),
        m0=np.broadcast_to(init.nu, (ntr, d)).copy(),
        S0=np.broadcast_to(init.V, (ntr, d, d)).copy(),
    )


def vdp_forward(state, bundle):
    """Propagate (m_i, S_i) through the Euler-Maruyama variational chain."""
    grid = bundle.grid
    nt = grid.num_steps
    ntr, d = state.m0.shape
    eye = np.eye(d)
    m = np.empty((ntr, nt + 1, d))
    S = np.empty((ntr, nt + 1, d, d))
    m[:, 0] = state.m0
    S[:, 0] = state.S0
    Sigma = bundle.diffusion.Sigma
    for i in range(nt):
        dt = grid.deltas[i]
        Atil = eye + dt * state.A[:, i]
        m[:, i + 1] = np.einsum("bde,be->bd", Atil, m[:, i]) + dt * state.b[:, i]
        S_next = symmetrize(Atil @ S[:, i] @ np.swapaxes(Atil, -1, -2) + dt * Sigma)
        try:
            chol_pd(S_next, index=i)
        except NotPositiveDefinite:
            raise Diverged(
                state.iteration, f"marginal covariance lost PD at index {i + 1}"
            ) from None
        S[:, i + 1] = S_next
    state.m, state.S = m, S
    return m, S


class _NodeCache:
    """Per-index drift values and Jacobians at reparameterized nodes.

    Precomputed in time chunks so the backward sweep only does small
    per-index contractions.  For a linear drift everything is closed form
    and no nodes are materialized.
    """

    def __init__(self, drift, diffusion, m, S, cfg, rng=None, chunk_budget=2e7):
        self.linear = isinstance(drift, LinearDrift)
        self.m = m
        self.S = S
        self.P = diffusion.inv
        if self.linear:
            self.A_p, self.b_p = drift.A, drift.b
            return
        d = m.shape[-1]
        method = cfg.resolve(d)
        if method == "quadrature":
            from .linalg import gauss_hermite_nodes

            self.z, self.w = gauss_hermite_nodes(cfg.nodes_per_dim, d)
        else:
            if rng is None:
                rng = np.random.default_rng(cfg.seed)
            self.z = rng.standard_normal(m.shape[:-1] + (cfg.samples, d))
            self.w = np.full(cfg.samples, 1.0 / cfg.samples)
        self.chol = chol_pd(S)
        if self.z.ndim == 2:
            e = np.einsum("btij,kj->btki", self.chol, self.z)
        else:
            e = np.einsum("btij,btkj->btki", self.chol, self.z)
        self.e = e
        x = m[..., None, :] + e
        # chunk the drift evaluation to bound peak memory
        nt = m.shape[1]
        k = e.shape[-2]
        step = max(1, int(chunk_budget / max(m.shape[0] * k * d * d, 1)))
        self.f = np.empty_like(e)
        self.J = np.empty(e.shape + (d,))
        for lo in range(0, nt, step):
            hi = min(lo + step, nt)
            self.f[:, lo:hi] = drift.value(x[:, lo:hi])
            self.J[:, lo:hi] = drift.jacobian(x[:, lo:hi])
        self.Sinv = np.linalg.inv(symmetrize(S))

    def mean_and_covjac(self, i):
        """(E[f], E[f(x-m)^T] S^{-1}) at index i."""
        if self.linear:
            Ef = self.m[:, i] @ self.A_p.T + self.b_p
            GJ = np.broadcast_to(self.A_p, self.S[:, i].shape)
            return Ef, GJ
        f, e = self.f[:, i], self.e[:, i]
        Ef = np.einsum("k,bkd->bd", self.w, f) if self.z.ndim == 2 else np.einsum(
            "k,bkd->bd", self.w, f
        )
        Efe = np.einsum("k,bkd,bke->bde", self.w, f, e)
        return Ef, Efe @ self.Sinv[:, i]

    def residual_grads(self, i, A, b):
        """Gradients of E||f - (A x + b)||^2_P wrt (m_i, S_i)."""
        P = self.P
        if self.linear:
            Dm = self.A_p - A
            c = self.m[:, i] @ self.A_p.T + self.b_p - np.einsum(
                "bde,be->bd", A, self.m[:, i]
            ) - b
            grad_m = 2.0 * np.einsum("bed,be->bd", Dm @ P, c)
            grad_S = np.swapaxes(Dm, -1, -2) @ P @ Dm
            return grad_m, grad_S
        f, e = self.f[:, i], self.e[:, i]
        x = self.m[:, i][:, None, :] + e
        g = f - np.einsum("bde,bke->bkd", A, x) - b[:, None, :]
        gP = g @ P
        Jres = self.J[:, i] - A[:, None, :, :]
        gx = 2.0 * np.einsum("bkde,bkd->bke", Jres, gP)
        grad_m = np.einsum("k,bkd->bd", self.w, gx)
        if self.z.ndim == 2:
            a_bar = np.einsum("k,bkd,kj->bdj", self.w, gx, self.z)
        else:
            a_bar = np.einsum("k,bkd,bkj->bdj", self.w, gx, self.z[:, i])
        grad_S = chol_vjp(self.chol[:, i], a_bar)
        return grad_m, grad_S


def vdp_sweep(state, bundle, cfg, omega, rng=None):
    """One forward/backward pass with interleaved soft drift updates.

    The backward multiplier recursion at interval i uses the freshly
    blended (A_i, b_i), so the drift update is self-limiting (Riccati-like)
    rather than an explosive open-loop correction.
    """
    grid = bundle.grid
    nt = grid.num_steps
    ntr, d = state.m0.shape
    eye = np.eye(d)
    Sigma = bundle.diffusion.Sigma
    P = bundle.diffusion.inv
    vdp_forward(state, bundle)
    cache = _NodeCache(bundle.drift, bundle.diffusion, state.m[:, :-1],
                       state.S[:, :-1], cfg.expectation, rng=rng)
    _, obs_gm, obs_gS = observation_terms(bundle, state.m, state.S)
    lam = np.zeros((ntr, nt + 1, d))
    psi = np.zeros((ntr, nt + 1, d, d))
    lam_cur = -obs_gm[:, nt]
    psi_cur = -obs_gS[:, nt]
    lam[:, nt] = lam_cur
    psi[:, nt] = psi_cur
    for i in range(nt - 1, -1, -1):
        dt = grid.deltas[i]
        Ef, GJ = cache.mean_and_covjac(i)
        lhs = P + 2.0 * dt * psi_cur
        rhs = P @ GJ - 2.0 * psi_cur
        try:
            A_hard = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError:
            raise Diverged(state.iteration, f"drift update singular at index {i}") from None
        state.A[:, i] += omega * (A_hard - state.A[:, i])
        b_hard = Ef - np.einsum("bde,be->bd", state.A[:, i], state.m[:, i]) \
            - lam_cur @ Sigma
        b_old = state.b[:, i].copy()
        state.b[:, i] += omega * (b_hard - state.b[:, i])
        # the multiplier step keeps the pre-update offset: substituting the
        # fresh b would cancel the data-driven damping of the lambda recursion
        e_gm, e_gS = cache.residual_grads(i, state.A[:, i], b_old)
        Atil = eye + dt * state.A[:, i]
        lam_cur = (
            np.einsum("bed,be->bd", Atil, lam_cur)
            + 0.5 * dt * e_gm - obs_gm[:, i]
        )
        psi_cur = symmetrize(
            np.swapaxes(Atil, -1, -2) @ psi_cur @ Atil
            + 0.5 * dt * e_gS - obs_gS[:, i]
        )
        if not np.all(np.isfinite(lam_cur)):
            raise Diverged(state.iteration, f"multipliers overflowed at index {i}")
        lam[:, i] = lam_cur
        psi[:, i] = psi_cur
    state.lam, state.psi = lam, psi
    # initial-state updates (soft)
    init = bundle.initial
    Vinv = inv_pd(init.V)
    m0_hard = init.nu - np.einsum("de,be->bd", init.V, lam[:, 0])
    try:
        S0_hard = inv_pd(2.0 * psi[:, 0] + Vinv)
    except NotPositiveDefinite:
        raise Diverged(state.iteration, "initial covariance update lost PD") from None
    state.m0 = state.m0 + omega * (m0_hard - state.m0)
    state.S0 = symmetrize(state.S0 + omega * (S0_hard - state.S0))
    return state


def vdp_elbo(state, bundle, cfg, rng=None):
    """Discrete ELBO of the chain induced by the current (A, b, m0, S0)."""
    e_val, _, _ = residual_energy(
        bundle.drift, bundle.diffusion, state.m[:, :-1], state.S[:, :-1],
        state.A, state.b, cfg.expectation, rng=rng,
    )
    obs_val, _, _ = observation_terms(bundle, state.m, state.S,
                                      want_grads=False)
    init = bundle.initial
    d = state.m0.shape[-1]
    Vinv = inv_pd(init.V)
    diff = state.m0 - init.nu
    sign, logdetV = np.linalg.slogdet(init.V)
    sign, logdetS0 = np.linalg.slogdet(state.S0)
    kl0 = 0.5 * (
        np.einsum("ae,bea->b", Vinv, state.S0)
        + np.einsum("bd,de,be->b", diff, Vinv, diff)
        - d + logdetV - logdetS0
    )
    kl_path = 0.5 * np.einsum("t,bt->b", bundle.grid.deltas, e_val)
    return float(np.sum(obs_val) - np.sum(kl0) - np.sum(kl_path))


def vdp_marginals(state):
    """MeanParams view of the current forward moments (zero lag-one blocks)."""
    ntr, n, d = state.m.shape
    return MeanParams.from_moments(
        state.m, state.S, np.zeros((ntr, max(n - 1, 0), d, d))
    )


def vdp_fit(bundle, cfg, iterations, omega, state=None, record_rmse=True):
    """Run interleaved VDP sweeps with soft factor ``omega``.

    Raises :class:`Diverged` (with the iteration index) when the forward
    moments lose positive definiteness or the multipliers overflow; this is
    expected behavior for aggressive omega.  Returns (state, diagnostics).
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    if state is None:
        state = vdp_init(bundle)
    diagnostics = []
    # transients can pass through enormous values before the multipliers
    # self-limit; overflow is caught by the finiteness checks
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(iterations):
            state.iteration = it
            rng = np.random.default_rng([cfg.seed, it])
            vdp_sweep(state, bundle, cfg, omega, rng=rng)
            vdp_forward(state, bundle)  # refresh moments under the new drift
            record = {"iteration": it + 1, "omega": omega}
            rng_e = np.random.default_rng([cfg.seed, it])
            record["elbo"] = vdp_elbo(state, bundle, cfg, rng=rng_e)
            if record_rmse and bundle.true_latents is not None:
                record["rmse"] = latents_rmse(vdp_marginals(state),
                                              bundle.true_latents)
            diagnostics.append(record)
    return state, diagnostics
