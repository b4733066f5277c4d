"""Shared oracles and generators for the test suite.

The dense oracles here are intentionally independent of the chain code
paths they check: full matrices, np.linalg factorizations, brute-force
quadrature.
"""

import numpy as np

from ngsde.chain import NaturalParams, lds_chain, em_discretize_linear
from ngsde.linalg import gauss_hermite_nodes


def random_chain(T, D, rng, batch=(), dt=0.05, h_scale=0.3):
    """Random PD chain built from a stable linear system plus a perturbed
    linear term (guaranteed valid natural parameters)."""
    G = rng.standard_normal((D, D)) / np.sqrt(D)
    shift = max(np.real(np.linalg.eigvals(G)).max(), 0.0) + 0.5
    A = G - shift * np.eye(D)
    b = 0.1 * rng.standard_normal(D)
    At, bt, Q = em_discretize_linear(A, b, np.eye(D), np.full(T, dt))
    eta = lds_chain(At, bt, Q, rng.standard_normal(D), np.eye(D))
    h = eta.h + h_scale * rng.standard_normal(batch + eta.h.shape)
    J = np.broadcast_to(eta.J, batch + eta.J.shape).copy()
    L = np.broadcast_to(eta.L, batch + eta.L.shape).copy()
    return NaturalParams(h=h, J=J, L=L)


def dense_precision(eta):
    """Full (T+1)D x (T+1)D precision matrix of a single chain."""
    n, d = eta.h.shape[-2], eta.h.shape[-1]
    P = np.zeros((n * d, n * d))
    for i in range(n):
        P[i * d:(i + 1) * d, i * d:(i + 1) * d] = eta.J[i]
    for i in range(n - 1):
        P[(i + 1) * d:(i + 2) * d, i * d:(i + 1) * d] = eta.L[i]
        P[i * d:(i + 1) * d, (i + 1) * d:(i + 2) * d] = eta.L[i].T
    return P


def dense_log_normalizer(eta):
    """Oracle: A(eta) through the full Cholesky of the dense precision."""
    P = dense_precision(eta)
    h = eta.h.reshape(-1)
    L = np.linalg.cholesky(P)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    n = h.size
    return 0.5 * n * np.log(2 * np.pi) - 0.5 * logdet + 0.5 * h @ np.linalg.solve(P, h)


def dense_marginals(eta):
    """Oracle marginal moments from the dense joint covariance."""
    P = dense_precision(eta)
    C = np.linalg.inv(P)
    n, d = eta.h.shape[-2], eta.h.shape[-1]
    m = (C @ eta.h.reshape(-1)).reshape(n, d)
    S = np.stack([C[i * d:(i + 1) * d, i * d:(i + 1) * d] for i in range(n)])
    X = (np.stack([C[(i + 1) * d:(i + 2) * d, i * d:(i + 1) * d]
                   for i in range(n - 1)])
         if n > 1 else np.zeros((0, d, d)))
    return m, S, X


def dense_kl(eta1, eta2):
    """Oracle KL between the dense joint Gaussians of two chains."""
    P1, P2 = dense_precision(eta1), dense_precision(eta2)
    C1 = np.linalg.inv(P1)
    m1 = C1 @ eta1.h.reshape(-1)
    m2 = np.linalg.solve(P2, eta2.h.reshape(-1))
    n = m1.size
    s1, ld1 = np.linalg.slogdet(C1)
    s2, ld2 = np.linalg.slogdet(np.linalg.inv(P2))
    diff = m2 - m1
    return 0.5 * (np.trace(P2 @ C1) + diff @ P2 @ diff - n + ld2 - ld1)


def random_marginal(D, rng, scale=0.4, floor=0.25):
    m = rng.standard_normal(D)
    Q = rng.standard_normal((D, D)) * scale
    return m, Q @ Q.T + floor * np.eye(D)


def random_pairwise(D, rng, scale=0.4, floor=0.5):
    """Consistent pairwise moments (m1, S1, m2, S2, Cov(x2, x1))."""
    m1 = rng.standard_normal(D)
    m2 = rng.standard_normal(D)
    Q = rng.standard_normal((2 * D, 2 * D)) * scale
    JJ = Q @ Q.T + floor * np.eye(2 * D)
    return m1, JJ[:D, :D], m2, JJ[D:, D:], JJ[D:, :D]


def joint_quadrature_transition(drift, diffusion, delta, m1, S1, m2, S2, X,
                                nodes=8):
    """Oracle: E[log N(x2 | x1 + delta f(x1), delta Sigma)] by quadrature
    over the full 2D-dimensional joint Gaussian."""
    D = m1.size
    mj = np.concatenate([m1, m2])
    Sj = np.zeros((2 * D, 2 * D))
    Sj[:D, :D] = S1
    Sj[D:, D:] = S2
    Sj[D:, :D] = X
    Sj[:D, D:] = X.T
    L = np.linalg.cholesky(Sj)
    z, w = gauss_hermite_nodes(nodes, 2 * D)
    pts = mj + z @ L.T
    x1 = pts[:, :D]
    x2 = pts[:, D:]
    resid = x2 - x1 - delta * drift.value(x1)
    P = diffusion.inv
    quad_form = np.einsum("kd,de,ke->k", resid, P, resid)
    logpdf = (-0.5 * D * np.log(2 * np.pi * delta) - 0.5 * diffusion.logdet
              - quad_form / (2 * delta))
    return float(w @ logpdf)


def spiral_system(dt, dim_obs=10, theta=np.pi / 250, decay=0.997, seed=42,
                  r_diag=0.35):
    """The stable-spiral linear system used across conjugate tests."""
    from ngsde.dynamics import LinearDrift, DiffusionSpec, InitialState
    from ngsde.observations import GaussianObservation

    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    A = (decay * rot - np.eye(2)) / dt
    rng = np.random.default_rng(seed)
    drift = LinearDrift(A=A, b=np.zeros(2))
    diffusion = DiffusionSpec(Sigma=np.eye(2))
    initial = InitialState(nu=np.zeros(2), V=np.eye(2))
    obs = GaussianObservation(C=rng.standard_normal((dim_obs, 2)),
                              d=rng.standard_normal(dim_obs),
                              R_diag=r_diag * np.ones(dim_obs))
    return drift, diffusion, initial, obs


def spiral_bundle(T=200, trials=3, dt=1e-3, seed=0):
    from ngsde.dynamics import euler_maruyama_sample
    from ngsde.grids import TimeGrid
    from ngsde.inference import ModelBundle
    from ngsde.observations import simulate_observations

    drift, diffusion, initial, obs = spiral_system(dt)
    grid = TimeGrid.regular(dt, T * dt)
    latents = euler_maruyama_sample(drift, diffusion, initial, grid,
                                    seed=seed, trials=trials)
    y = simulate_observations(obs, latents, grid, seed=seed + 1)
    return ModelBundle(drift=drift, diffusion=diffusion, initial=initial,
                       observation=obs, grid=grid, y=y, true_latents=latents)
