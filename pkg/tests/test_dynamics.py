"""Drift models, diffusion, and Euler-Maruyama simulation."""

import numpy as np
import pytest

from ngsde.dynamics import (
    DiffusionSpec,
    DuffingDrift,
    EmbeddedLorenzDrift,
    InitialState,
    LinearDrift,
    LorenzDrift,
    PolynomialDrift,
    VanDerPolDrift,
    euler_maruyama_sample,
    monomial_exponents,
)
from ngsde.grids import TimeGrid

RNG = np.random.default_rng(2024)


def all_drift_kinds():
    return [
        LinearDrift(A=RNG.standard_normal((2, 2)), b=RNG.standard_normal(2)),
        PolynomialDrift(weights=0.4 * RNG.standard_normal((2, 10)), degree=3),
        LorenzDrift(),
        EmbeddedLorenzDrift(dim_total=5),
        VanDerPolDrift(tau=10.0, mu=2.0),
        DuffingDrift(),
    ]


class TestJacobians:
    @pytest.mark.parametrize("drift", all_drift_kinds(),
                             ids=lambda d: d.kind)
    def test_jacobian_matches_finite_differences(self, drift):
        rng = np.random.default_rng(5)
        d = drift.dim
        xs = rng.standard_normal((100, d))
        J = drift.jacobian(xs)
        eps = 1e-6
        for j in range(d):
            dp = np.zeros(d)
            dp[j] = eps
            fd = (drift.value(xs + dp) - drift.value(xs - dp)) / (2 * eps)
            np.testing.assert_allclose(fd, J[..., :, j], atol=1e-5)

    @pytest.mark.parametrize("drift", all_drift_kinds(),
                             ids=lambda d: d.kind)
    def test_jac_t_apply_consistent(self, drift):
        rng = np.random.default_rng(6)
        d = drift.dim
        x = rng.standard_normal((3, 8, d))
        v = rng.standard_normal((3, 8, d))
        ref = np.einsum("...de,...d->...e", drift.jacobian(x), v)
        np.testing.assert_allclose(drift.jac_t_apply(x, v), ref, atol=1e-12)


class TestPolynomialBasis:
    def test_degree_one_order(self):
        assert monomial_exponents(2, 1) == [(0, 0), (1, 0), (0, 1)]

    def test_duffing_exactly_representable(self):
        duffing = DuffingDrift(alpha=2.0, beta=1.0, gamma=0.1)
        poly = duffing.as_polynomial()
        xs = RNG.standard_normal((200, 2)) * 1.5
        np.testing.assert_allclose(poly.value(xs), duffing.value(xs),
                                   atol=1e-12)
        np.testing.assert_allclose(poly.jacobian(xs), duffing.jacobian(xs),
                                   atol=1e-12)

    def test_param_roundtrip(self):
        poly = PolynomialDrift(weights=RNG.standard_normal((2, 10)), degree=3)
        again = poly.with_params(poly.params)
        np.testing.assert_array_equal(again.weights, poly.weights)


class TestSimulation:
    def test_zero_noise_constant_drift(self):
        """Deterministic Euler on f = c gives x_i = x_0 + tau_i c."""
        c = np.array([0.5, -1.0])
        drift = LinearDrift(A=np.zeros((2, 2)), b=c)
        grid = TimeGrid.regular(0.1, 1.0)
        init = InitialState(nu=np.array([1.0, 2.0]), V=np.eye(2))
        path = euler_maruyama_sample(drift, DiffusionSpec.isotropic(2), init,
                                     grid, seed=0, trials=1,
                                     deterministic=True)[0]
        np.testing.assert_allclose(
            path, init.nu + grid.times[:, None] * c, atol=1e-12)

    def test_lorenz_origin_fixed_point(self):
        drift = LorenzDrift()
        grid = TimeGrid.regular(0.01, 0.5)
        init = InitialState(nu=np.zeros(3), V=np.eye(3))
        path = euler_maruyama_sample(drift, DiffusionSpec.isotropic(3), init,
                                     grid, seed=0, trials=1,
                                     deterministic=True)[0]
        np.testing.assert_allclose(path, 0.0, atol=1e-12)

    def test_duffing_stable_fixed_point(self):
        """(sqrt(alpha/beta), 0) is a fixed point of the double well."""
        drift = DuffingDrift(alpha=2.0, beta=1.0, gamma=0.1)
        x_star = np.array([np.sqrt(2.0), 0.0])
        np.testing.assert_allclose(drift.value(x_star), 0.0, atol=1e-12)
        grid = TimeGrid.regular(0.01, 1.0)
        init = InitialState(nu=x_star, V=np.eye(2))
        path = euler_maruyama_sample(drift, DiffusionSpec.isotropic(2), init,
                                     grid, seed=0, trials=1,
                                     deterministic=True)[0]
        assert np.abs(path - x_star).max() < 1e-10

    def test_deterministic_given_seed(self):
        drift = VanDerPolDrift()
        grid = TimeGrid.regular(0.01, 0.3)
        init = InitialState(nu=np.zeros(2), V=np.eye(2))
        diff = DiffusionSpec.isotropic(2)
        a = euler_maruyama_sample(drift, diff, init, grid, seed=7, trials=4)
        b = euler_maruyama_sample(drift, diff, init, grid, seed=7, trials=4)
        np.testing.assert_array_equal(a, b)
        c = euler_maruyama_sample(drift, diff, init, grid, seed=8, trials=4)
        assert not np.array_equal(a, c)

    def test_linear_moments_match_discrete_lds(self):
        """Sample mean/cov over many trials vs the exact discrete moments,
        within Monte-Carlo 3-sigma bands."""
        rng = np.random.default_rng(1)
        A = np.array([[-1.0, 0.4], [-0.3, -0.8]])
        b = np.array([0.2, -0.1])
        drift = LinearDrift(A=A, b=b)
        Sigma = np.array([[0.5, 0.1], [0.1, 0.4]])
        diff = DiffusionSpec(Sigma=Sigma)
        init = InitialState(nu=np.array([1.0, -1.0]), V=0.3 * np.eye(2))
        grid = TimeGrid.regular(0.02, 0.4)
        n_trials = 10_000
        paths = euler_maruyama_sample(drift, diff, init, grid, seed=3,
                                      trials=n_trials)
        # exact discrete moments
        m = init.nu.copy()
        S = init.V.copy()
        eye = np.eye(2)
        for dt in grid.deltas:
            At = eye + dt * A
            m = At @ m + dt * b
            S = At @ S @ At.T + dt * Sigma
        emp_m = paths[:, -1].mean(axis=0)
        emp_S = np.cov(paths[:, -1].T)
        se_m = np.sqrt(np.diag(S) / n_trials)
        np.testing.assert_array_less(np.abs(emp_m - m), 3 * se_m + 1e-12)
        # covariance entries: rough 3-sigma band via normal theory
        se_S = 3 * np.abs(S) * np.sqrt(2.0 / n_trials) + 3e-3
        np.testing.assert_array_less(np.abs(emp_S - S), se_S)


class TestSpecs:
    def test_diffusion_requires_pd(self):
        from ngsde.errors import NotPositiveDefinite

        with pytest.raises(NotPositiveDefinite):
            DiffusionSpec(Sigma=np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_initial_state_requires_pd(self):
        from ngsde.errors import NotPositiveDefinite

        with pytest.raises(NotPositiveDefinite):
            InitialState(nu=np.zeros(2), V=-np.eye(2))
