"""M-step machinery: output updates, drift gradients, Adam, vEM, metrics."""

import numpy as np
import pytest
from dataclasses import replace

from ngsde.chain import MeanParams
from ngsde.dynamics import (
    DiffusionSpec,
    DuffingDrift,
    LinearDrift,
    PolynomialDrift,
    monomial_exponents,
)
from ngsde.errors import EmptyOccupancy, SingularMomentMatrix, UnsupportedDrift
from ngsde.expectations import ExpectationConfig, transition_quantities
from ngsde.learning import (
    AdamState,
    PolyDriftObjective,
    VEMConfig,
    drift_param_gradient,
    dynamics_rmse,
    update_output_params,
    vem_fit,
)
from ngsde.observations import GaussianObservation

RNG = np.random.default_rng(1234)
QUAD = ExpectationConfig(method="quadrature", nodes_per_dim=6)


def random_chain_moments(rng, ntr=2, T=30, D=2, s_scale=0.25):
    m = rng.standard_normal((ntr, T + 1, D)) * 0.7
    S = np.zeros((ntr, T + 1, D, D))
    X = np.zeros((ntr, T, D, D))
    for b in range(ntr):
        for t in range(T + 1):
            Q = rng.standard_normal((D, D)) * s_scale
            S[b, t] = Q @ Q.T + 0.2 * np.eye(D)
        for t in range(T):
            X[b, t] = 0.05 * rng.standard_normal((D, D))
    return MeanParams.from_moments(m, S, X)


class TestOutputParams:
    def test_noiseless_recovery(self):
        C_true = RNG.standard_normal((6, 2))
        d_true = RNG.standard_normal(6)
        m = RNG.standard_normal((3, 31, 2))
        mu = MeanParams.from_moments(
            m, np.broadcast_to(1e-14 * np.eye(2), (3, 31, 2, 2)),
            np.zeros((3, 30, 2, 2)))
        y = m @ C_true.T + d_true
        C, d, r = update_output_params(mu, y, np.ones(31, dtype=bool))
        np.testing.assert_allclose(C, C_true, atol=1e-6)
        np.testing.assert_allclose(d, d_true, atol=1e-6)
        assert np.all(r <= 1e-7)

    def test_single_dim_matches_normal_equations(self):
        m = RNG.standard_normal((1, 12, 1))
        S = 0.2 * np.ones((1, 12, 1, 1))
        mu = MeanParams.from_moments(m, S, np.zeros((1, 11, 1, 1)))
        y = 2.5 * m[..., 0:1] - 1.0 + 0.1 * RNG.standard_normal((1, 12, 1))
        C, d, r = update_output_params(mu, y, np.ones(12, dtype=bool))
        mm = m.reshape(-1)
        yy = y.reshape(-1)
        mc = mm - mm.mean()
        yc = yy - yy.mean()
        C_ref = (yc @ mc) / (mc @ mc + 0.2 * 12)
        assert C[0, 0] == pytest.approx(C_ref, abs=1e-10)

    def test_update_is_stationary_point(self):
        """FD gradients of the expected log-likelihood vanish in (C, d, R)
        at the closed-form update."""
        mu = random_chain_moments(RNG, ntr=3, T=30)
        C_true = RNG.standard_normal((5, 2))
        y = mu.m @ C_true.T + 0.3 * RNG.standard_normal((3, 31, 5))
        mask = np.ones(31, dtype=bool)
        C, d, r = update_output_params(mu, y, mask)

        def ell(C=C, d=d, r=r):
            obs = GaussianObservation(C=C, d=d, R_diag=r)
            v, _, _ = obs.expected_log_likelihood(mu.m, mu.covs, y)
            return float(np.sum(v))

        eps = 1e-5
        worst = 0.0
        for i in range(5):
            for j in range(2):
                Cp = C.copy()
                Cp[i, j] += eps
                Cm = C.copy()
                Cm[i, j] -= eps
                worst = max(worst, abs((ell(C=Cp) - ell(C=Cm)) / (2 * eps)))
            dp = d.copy()
            dp[i] += eps
            dm = d.copy()
            dm[i] -= eps
            worst = max(worst, abs((ell(d=dp) - ell(d=dm)) / (2 * eps)))
            rp = r.copy()
            rp[i] *= 1 + eps
            rm = r.copy()
            rm[i] *= 1 - eps
            worst = max(worst, abs((ell(r=rp) - ell(r=rm)) / (2 * eps * r[i])))
        assert worst < 1e-4

    def test_permutation_invariance(self):
        mu = random_chain_moments(RNG, ntr=4, T=10)
        y = mu.m @ RNG.standard_normal((3, 2)).T + 0.1 * RNG.standard_normal(
            (4, 11, 3))
        mask = np.ones(11, dtype=bool)
        C1, d1, r1 = update_output_params(mu, y, mask)
        perm = RNG.permutation(4)
        mu_p = MeanParams(m=mu.m[perm], mu2=mu.mu2[perm], mu3=mu.mu3[perm])
        C2, d2, r2 = update_output_params(mu_p, y[perm], mask)
        np.testing.assert_allclose(C1, C2, atol=1e-12)
        np.testing.assert_allclose(d1, d2, atol=1e-12)
        np.testing.assert_allclose(r1, r2, atol=1e-12)

    def test_too_few_observations(self):
        mu = random_chain_moments(RNG, ntr=1, T=1)
        y = RNG.standard_normal((1, 2, 3))
        mask = np.zeros(2, dtype=bool)
        mask[0] = True
        with pytest.raises(SingularMomentMatrix):
            update_output_params(mu, y, mask)


class TestDriftGradients:
    def test_polynomial_matches_finite_differences(self):
        mu = random_chain_moments(RNG)
        diff = DiffusionSpec(Sigma=0.5 * np.eye(2))
        deltas = np.full(30, 0.02)
        poly = PolynomialDrift(weights=0.1 * RNG.standard_normal((2, 10)),
                               degree=3)
        grad = drift_param_gradient(poly, mu, diff, deltas, QUAD)

        def trans_sum(drift):
            res = transition_quantities(drift, diff, deltas, mu.m, mu.covs,
                                        mu.cross_covs, QUAD,
                                        want_grads=False)
            return float(res["value"].sum())

        eps = 1e-6
        theta = poly.params
        for j in range(0, theta.size, 3):
            tp = theta.copy()
            tp[j] += eps
            tm = theta.copy()
            tm[j] -= eps
            fd = (trans_sum(poly.with_params(tp))
                  - trans_sum(poly.with_params(tm))) / (2 * eps)
            assert fd == pytest.approx(grad[j], abs=1e-5)

    def test_linear_matches_finite_differences(self):
        mu = random_chain_moments(RNG)
        diff = DiffusionSpec.isotropic(2)
        deltas = np.full(30, 0.02)
        lin = LinearDrift(A=0.3 * RNG.standard_normal((2, 2)),
                          b=0.2 * RNG.standard_normal(2))
        grad = drift_param_gradient(lin, mu, diff, deltas, QUAD)

        def trans_sum(drift):
            res = transition_quantities(drift, diff, deltas, mu.m, mu.covs,
                                        mu.cross_covs, QUAD,
                                        want_grads=False)
            return float(res["value"].sum())

        eps = 1e-6
        theta = lin.params
        for j in range(theta.size):
            tp = theta.copy()
            tp[j] += eps
            tm = theta.copy()
            tm[j] -= eps
            fd = (trans_sum(lin.with_params(tp))
                  - trans_sum(lin.with_params(tm))) / (2 * eps)
            assert fd == pytest.approx(grad[j], abs=1e-5)

    def test_unsupported_drift(self):
        mu = random_chain_moments(RNG)
        with pytest.raises(UnsupportedDrift):
            drift_param_gradient(DuffingDrift(), mu,
                                 DiffusionSpec.isotropic(2),
                                 np.full(30, 0.02), QUAD)

    def test_quadratic_term_vanishes_at_origin(self):
        """Zero-weight polynomial: the gradient reduces to the linear
        (increments) term; the quadratic part contributes nothing."""
        mu = random_chain_moments(RNG)
        diff = DiffusionSpec.isotropic(2)
        poly = PolynomialDrift.zeros(2, degree=3)
        obj = PolyDriftObjective(poly, mu, diff, np.full(30, 0.02), QUAD)
        g0 = obj.gradient(np.zeros_like(poly.weights))
        np.testing.assert_allclose(g0, diff.inv @ obj.Rsum.T, atol=1e-12)

    def test_gradient_near_zero_at_generative_optimum(self):
        """At the exact posterior of a long densely observed conjugate run,
        the drift-parameter gradient is within 3 Monte-Carlo standard
        errors of zero (Fisher-identity stationarity in expectation)."""
        from helpers import spiral_bundle
        from ngsde.baselines import kalman_smooth

        bundle = spiral_bundle(T=4000, trials=6, dt=1e-3)
        mu_k, _ = kalman_smooth(bundle)
        poly, _ = _poly_view(bundle.drift)
        obj = PolyDriftObjective(poly, mu_k, bundle.diffusion,
                                 bundle.grid.deltas, QUAD)
        grad = obj.gradient(poly.weights)
        # block standard error of the summed per-interval contributions;
        # smoothing correlates adjacent intervals, so blocks (not single
        # intervals) estimate the fluctuation scale of the total
        from ngsde.learning import _basis_moments

        Ephi, Ephi2, R = _basis_moments(poly, mu_k, QUAD)
        P = bundle.diffusion.inv
        dts = bundle.grid.deltas
        per = (np.einsum("de,btpe->btdp", P, R)
               - dts[:, None, None] * np.einsum(
                   "de,ep,btpq->btdq", P, poly.weights, Ephi2))
        flat = per.reshape(-1, per.shape[-2] * per.shape[-1])
        n_blocks = 40
        blocks = np.array_split(flat, n_blocks, axis=0)
        block_sums = np.stack([b.sum(axis=0) for b in blocks])
        se_total = block_sums.std(axis=0) * np.sqrt(n_blocks)
        bound = 3.0 * se_total + 1e-6
        assert np.all(np.abs(grad.reshape(-1)) <= bound)


def _poly_view(drift):
    from ngsde.learning import _as_poly_view

    return _as_poly_view(drift)


class TestAdam:
    def test_zero_gradient_identity(self):
        adam = AdamState(lr=0.1)
        theta = np.array([1.0, -2.0])
        np.testing.assert_array_equal(adam.step(theta, np.zeros(2)), theta)

    def test_ascends_quadratic(self):
        adam = AdamState(lr=0.2)
        theta = np.zeros(2)
        target = np.array([1.0, -0.5])
        for _ in range(300):
            theta = adam.step(theta, -(theta - target))
        np.testing.assert_allclose(theta, target, atol=1e-3)


class TestDynamicsRMSE:
    def test_exact_drift_zero(self):
        duffing = DuffingDrift()
        traj = RNG.standard_normal((2, 50, 2))
        assert dynamics_rmse(duffing, duffing, traj) == 0.0

    def test_constant_offset(self):
        base = LinearDrift(A=np.zeros((2, 2)), b=np.zeros(2))
        off = LinearDrift(A=np.zeros((2, 2)), b=np.array([0.3, -0.4]))
        traj = RNG.standard_normal((3, 60, 2))
        assert dynamics_rmse(off, base, traj) == pytest.approx(0.5,
                                                               abs=1e-12)

    def test_hand_instance_two_cells(self):
        """Two occupied cells with weights (1/4, 3/4) and known field gaps."""
        pts = np.array([[[0.25, 0.5]]] * 1 + [[[0.75, 0.5]]] * 3).reshape(1, 4, 2)
        true = LinearDrift(A=np.zeros((2, 2)), b=np.zeros(2))

        class Step(LinearDrift):
            def value(self, x):
                out = np.zeros_like(np.asarray(x, dtype=float))
                out[..., 0] = np.where(np.asarray(x)[..., 0] < 0.5, 1.0, 2.0)
                return out

        learned = Step(A=np.zeros((2, 2)), b=np.zeros(2))
        val = dynamics_rmse(true, learned, pts, cells_per_dim=2,
                            bounds=(np.array([0.0, 0.0]),
                                    np.array([1.0, 1.0])))
        assert val == pytest.approx(np.sqrt(0.25 * 1.0 + 0.75 * 4.0),
                                    abs=1e-12)

    def test_empty_occupancy(self):
        with pytest.raises(EmptyOccupancy):
            dynamics_rmse(DuffingDrift(), DuffingDrift(),
                          np.zeros((0, 0, 2)))


class TestVEM:
    def test_frozen_hyperparameters_equal_plain_fit(self):
        """With every parameter group frozen, vEM is exactly the inference
        loop (constant step size so the schedules coincide)."""
        from helpers import spiral_bundle
        from ngsde.inference import RhoSchedule, SINGConfig, fit

        bundle = spiral_bundle(T=40, trials=2)
        sing_cfg = SINGConfig(
            iterations=6,
            rho_schedule=RhoSchedule(kind="constant", rho=0.6),
            expectation=QUAD)
        vem_cfg = VEMConfig(outer_iters=3, e_steps_per_iter=2,
                            m_steps_per_iter=1, learn_output=False,
                            learn_drift=False, burn_in_iters=0)
        import copy

        bundle2 = copy.deepcopy(bundle)
        result = vem_fit(bundle2, sing_cfg, vem_cfg)
        state_plain, _ = fit(bundle, replace(sing_cfg, iterations=6))
        np.testing.assert_allclose(result.state.eta.h, state_plain.eta.h,
                                   atol=1e-12)
        np.testing.assert_allclose(result.state.eta.J, state_plain.eta.J,
                                   atol=1e-12)

    def test_output_update_never_decreases_elbo(self):
        """Closed-form (C, d, R) updates are exact maximizers of the
        expected log-likelihood, hence never decrease the ELBO given q."""
        mu = random_chain_moments(RNG, ntr=3, T=25)
        C0 = RNG.standard_normal((5, 2))
        y = mu.m @ C0.T + 0.4 * RNG.standard_normal((3, 26, 5))
        mask = np.ones(26, dtype=bool)

        def ell(obs):
            v, _, _ = obs.expected_log_likelihood(mu.m, mu.covs, y)
            return float(np.sum(v))

        before = ell(GaussianObservation(C=C0, d=np.zeros(5),
                                         R_diag=np.ones(5)))
        C, d, r = update_output_params(mu, y, mask)
        after = ell(GaussianObservation(C=C, d=d, R_diag=r))
        assert after >= before - 1e-8
