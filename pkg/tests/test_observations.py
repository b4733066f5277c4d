"""Observation models: sampling and expected log-likelihood hooks."""

import numpy as np
import pytest
from scipy.special import gammaln

from ngsde.dynamics import (
    DiffusionSpec,
    InitialState,
    LinearDrift,
    euler_maruyama_sample,
)
from ngsde.grids import TimeGrid
from ngsde.observations import (
    GaussianObservation,
    PoissonExpObservation,
    PoissonRBFObservation,
    simulate_observations,
)

RNG = np.random.default_rng(77)


def rand_marginal(d, rng, scale=0.3):
    m = rng.standard_normal(d)
    Q = rng.standard_normal((d, d)) * scale
    return m, Q @ Q.T + 0.2 * np.eye(d)


class TestGaussianObservation:
    def test_near_noiseless_identity_emission(self):
        obs = GaussianObservation(C=np.eye(2), d=np.zeros(2),
                                  R_diag=1e-12 * np.ones(2))
        x = RNG.standard_normal((40, 2))
        y = obs.sample(x, np.random.default_rng(0))
        np.testing.assert_allclose(y, x, atol=1e-5)

    def test_degenerate_marginal_is_plain_log_density(self):
        obs = GaussianObservation(C=RNG.standard_normal((4, 2)),
                                  d=RNG.standard_normal(4),
                                  R_diag=np.array([0.5, 0.7, 0.9, 1.1]))
        m, _ = rand_marginal(2, RNG)
        y = RNG.standard_normal(4)
        val, _, _ = obs.expected_log_likelihood(m, 1e-14 * np.eye(2), y)
        assert val == pytest.approx(obs.log_density(m, y), abs=1e-6)

    def test_gradients_match_finite_differences(self):
        obs = GaussianObservation(C=RNG.standard_normal((5, 2)),
                                  d=RNG.standard_normal(5),
                                  R_diag=0.4 * np.ones(5))
        m, S = rand_marginal(2, RNG)
        y = RNG.standard_normal(5)
        _, gm, gS = obs.expected_log_likelihood(m, S, y)
        eps = 1e-6
        for c in range(2):
            dp = np.zeros(2)
            dp[c] = eps
            f1, _, _ = obs.expected_log_likelihood(m + dp, S, y)
            f2, _, _ = obs.expected_log_likelihood(m - dp, S, y)
            assert (f1 - f2) / (2 * eps) == pytest.approx(gm[c], abs=1e-5)
        for a in range(2):
            for b in range(2):
                E = np.zeros((2, 2))
                E[a, b] = eps
                Es = E + E.T
                f1, _, _ = obs.expected_log_likelihood(m, S + Es, y)
                f2, _, _ = obs.expected_log_likelihood(m, S - Es, y)
                assert (f1 - f2) / (2 * eps) == pytest.approx(
                    gS[a, b] + gS[b, a], abs=1e-5)


def poisson_models():
    rng = np.random.default_rng(5)
    return [
        PoissonRBFObservation(centers=rng.standard_normal((6, 2)),
                              width=0.5, peak=2.5, baseline=0.25),
        PoissonExpObservation(C=0.4 * rng.standard_normal((6, 2)),
                              d=0.1 * rng.standard_normal(6)),
    ]


class TestPoissonObservations:
    @pytest.mark.parametrize("model", poisson_models(),
                             ids=lambda m: m.kind)
    def test_gradients_match_finite_differences(self, model):
        rng = np.random.default_rng(9)
        for _ in range(3):
            m, S = rand_marginal(2, rng)
            y = rng.poisson(1.0, size=6).astype(float)
            _, gm, gS = model.expected_log_likelihood(m, S, y)
            eps = 1e-6
            for c in range(2):
                dp = np.zeros(2)
                dp[c] = eps
                f1, _, _ = model.expected_log_likelihood(m + dp, S, y)
                f2, _, _ = model.expected_log_likelihood(m - dp, S, y)
                assert (f1 - f2) / (2 * eps) == pytest.approx(gm[c], abs=1e-5)
            for a in range(2):
                for b in range(a, 2):
                    E = np.zeros((2, 2))
                    E[a, b] = eps
                    Es = E + E.T
                    f1, _, _ = model.expected_log_likelihood(m, S + Es, y)
                    f2, _, _ = model.expected_log_likelihood(m, S - Es, y)
                    assert (f1 - f2) / (2 * eps) == pytest.approx(
                        gS[a, b] + gS[b, a], abs=1e-5)

    def test_constant_rate_closed_form(self):
        """With peak = 0 every rate is the baseline, and the expected
        log-likelihood is the x-independent Poisson log-pmf."""
        lam = 0.7
        model = PoissonRBFObservation(centers=np.zeros((3, 2)), width=0.5,
                                      peak=0.0, baseline=lam)
        m, S = rand_marginal(2, RNG)
        y = np.array([0.0, 2.0, 1.0])
        val, gm, gS = model.expected_log_likelihood(m, S, y)
        expected = float(np.sum(y * np.log(lam) - lam - gammaln(y + 1)))
        assert val == pytest.approx(expected, abs=1e-10)
        np.testing.assert_allclose(gm, 0.0, atol=1e-12)

    def test_exp_link_value_matches_closed_form(self):
        """The exponential link admits a closed-form expectation; the
        quadrature value must agree."""
        model = PoissonExpObservation(C=0.3 * RNG.standard_normal((5, 2)),
                                      d=0.1 * RNG.standard_normal(5))
        m, S = rand_marginal(2, RNG)
        y = RNG.poisson(1.0, size=5).astype(float)
        val, _, _ = model.expected_log_likelihood(m, S, y)
        mean_lr = model.C @ m + model.d
        var_lr = np.einsum("nd,de,ne->n", model.C, S, model.C)
        ref = float(y @ mean_lr - np.exp(mean_lr + 0.5 * var_lr).sum()
                    - gammaln(y + 1).sum())
        assert val == pytest.approx(ref, abs=5e-5 * abs(ref))

    def test_constant_rate_empirical_mean(self):
        """peak = 0: empirical mean count over many bins close to baseline."""
        lam = 0.25
        model = PoissonRBFObservation(centers=np.zeros((1, 2)), width=0.5,
                                      peak=0.0, baseline=lam)
        x = RNG.standard_normal((100_000, 2))
        y = model.sample(x, np.random.default_rng(11))
        se = np.sqrt(lam / y.size)
        assert abs(y.mean() - lam) < 3 * se


class TestSimulateObservations:
    def test_masked_indices_and_determinism(self):
        drift = LinearDrift(A=-np.eye(2), b=np.zeros(2))
        grid = TimeGrid.regular(0.1, 1.0)
        mask = np.zeros(11, dtype=bool)
        mask[::2] = True
        grid = grid.with_mask(mask)
        init = InitialState(nu=np.zeros(2), V=np.eye(2))
        lat = euler_maruyama_sample(drift, DiffusionSpec.isotropic(2), init,
                                    grid, seed=0, trials=3)
        obs = GaussianObservation(C=np.eye(2), d=np.zeros(2),
                                  R_diag=0.1 * np.ones(2))
        y1 = simulate_observations(obs, lat, grid, seed=5)
        y2 = simulate_observations(obs, lat, grid, seed=5)
        np.testing.assert_array_equal(y1, y2)
        assert np.all(y1[:, ~mask] == 0.0)
        assert np.any(y1[:, mask] != 0.0)
