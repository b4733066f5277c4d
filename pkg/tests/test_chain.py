"""Exponential-family chain: log normalizers, marginals, KL, conversions.

Dense-matrix oracles (full Cholesky, full inverse, joint-Gaussian KL) live
in helpers.py and never touch the per-block code paths they validate.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ngsde.chain import (
    GaussianPotential,
    NaturalParams,
    combine_potentials,
    kl_divergence,
    log_normalizer_parallel,
    log_normalizer_sequential,
    mean_to_natural,
    natural_mean_inner,
    natural_to_mean,
)
from ngsde.errors import NotPositiveDefinite
from ngsde.parallel import ExecContext

from helpers import (
    dense_kl,
    dense_log_normalizer,
    dense_marginals,
    random_chain,
)


class TestPotentials:
    def test_unit_precision_combine(self):
        """Two unit-precision 1-D potentials integrate the middle variable to
        a combined precision of 2: logZ = log sqrt(pi)."""
        a = GaussianPotential(J1=np.eye(1), J2=np.eye(1), L=np.zeros((1, 1)),
                              h1=np.zeros(1), h2=np.zeros(1))
        c = combine_potentials(a, a)
        assert c.logZ == pytest.approx(0.5 * np.log(np.pi), abs=1e-12)

    def test_identity_neutral(self):
        rng = np.random.default_rng(0)
        a = GaussianPotential(
            J1=np.eye(2) * 1.5, J2=np.eye(2) * 2.0,
            L=0.3 * rng.standard_normal((2, 2)),
            h1=rng.standard_normal(2), h2=rng.standard_normal(2), logZ=0.7,
        )
        ident = GaussianPotential.identity(2)
        assert combine_potentials(a, ident) is a
        assert combine_potentials(ident, a) is a
        both = combine_potentials(ident, GaussianPotential.identity(2))
        assert both.is_identity

    def test_not_positive_definite(self):
        bad = GaussianPotential(J1=np.eye(1), J2=-np.eye(1),
                                L=np.zeros((1, 1)),
                                h1=np.zeros(1), h2=np.zeros(1))
        with pytest.raises(NotPositiveDefinite):
            combine_potentials(bad, bad)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 3))
    def test_associativity(self, seed, d):
        """(a o b) o c equals a o (b o c) on random PD triples."""
        rng = np.random.default_rng(seed)

        def rand_pot():
            q1 = rng.standard_normal((d, d)) * 0.4
            q2 = rng.standard_normal((d, d)) * 0.4
            return GaussianPotential(
                J1=q1 @ q1.T + 1.2 * np.eye(d),
                J2=q2 @ q2.T + 1.2 * np.eye(d),
                L=0.4 * rng.standard_normal((d, d)),
                h1=rng.standard_normal(d), h2=rng.standard_normal(d),
                logZ=rng.standard_normal(),
            )

        a, b, c = rand_pot(), rand_pot(), rand_pot()
        left = combine_potentials(combine_potentials(a, b), c)
        right = combine_potentials(a, combine_potentials(b, c))
        for field in ("J1", "J2", "L", "h1", "h2"):
            np.testing.assert_allclose(getattr(left, field),
                                       getattr(right, field), atol=1e-10)
        assert left.logZ == pytest.approx(right.logZ, abs=1e-10)

    def test_chain_fold_matches_dense(self):
        """Left fold of 4 potentials equals right fold and the dense joint."""
        rng = np.random.default_rng(3)
        eta = random_chain(4, 2, rng)
        a_seq = log_normalizer_sequential(eta)
        a_dense = dense_log_normalizer(eta)
        assert a_seq == pytest.approx(a_dense, rel=1e-10)


class TestLogNormalizer:
    def test_single_node_standard_normal(self):
        eta = NaturalParams(h=np.zeros((1, 1)), J=np.ones((1, 1, 1)),
                            L=np.zeros((0, 1, 1)))
        assert log_normalizer_sequential(eta) == pytest.approx(
            0.5 * np.log(2 * np.pi), abs=1e-12)
        assert log_normalizer_parallel(eta) == log_normalizer_sequential(eta)

    def test_two_node_hand_value(self):
        """Precision [[2,-1],[-1,2]] has determinant 3."""
        eta = NaturalParams(h=np.zeros((2, 1)),
                            J=np.array([[[2.0]], [[2.0]]]),
                            L=np.array([[[-1.0]]]))
        expected = np.log(2 * np.pi) - 0.5 * np.log(3.0)
        assert log_normalizer_sequential(eta) == pytest.approx(expected,
                                                               abs=1e-12)

    @pytest.mark.parametrize("T,D", [(0, 1), (1, 2), (8, 3), (15, 2),
                                     (16, 1), (17, 4), (64, 3)])
    def test_sequential_matches_dense(self, T, D):
        rng = np.random.default_rng(T * 10 + D)
        eta = random_chain(T, D, rng)
        assert log_normalizer_sequential(eta) == pytest.approx(
            dense_log_normalizer(eta), rel=1e-10)

    @pytest.mark.parametrize("T,D", [(0, 1), (2, 2), (15, 2), (16, 1),
                                     (17, 4), (31, 2), (100, 3)])
    def test_parallel_matches_sequential(self, T, D):
        rng = np.random.default_rng(T * 13 + D)
        eta = random_chain(T, D, rng)
        a_seq = log_normalizer_sequential(eta)
        a_par = log_normalizer_parallel(eta)
        assert a_par == pytest.approx(a_seq, rel=1e-9)

    def test_parallel_with_thread_context(self):
        rng = np.random.default_rng(5)
        eta = random_chain(300, 2, rng)
        ctx = ExecContext(threads=2)
        try:
            a_ctx = log_normalizer_parallel(eta, ctx=ctx)
        finally:
            ctx.close()
        assert a_ctx == pytest.approx(log_normalizer_sequential(eta), rel=1e-9)

    def test_not_positive_definite_raises(self):
        eta = NaturalParams(h=np.zeros((2, 1)),
                            J=np.array([[[1.0]], [[0.2]]]),
                            L=np.array([[[-5.0]]]))
        with pytest.raises(NotPositiveDefinite):
            log_normalizer_sequential(eta)
        with pytest.raises(NotPositiveDefinite):
            natural_to_mean(eta)


class TestMarginals:
    def test_two_node_hand_values(self):
        eta = NaturalParams(h=np.zeros((2, 1)),
                            J=np.array([[[2.0]], [[2.0]]]),
                            L=np.array([[[-1.0]]]))
        mu = natural_to_mean(eta)
        np.testing.assert_allclose(mu.m, 0.0, atol=1e-12)
        np.testing.assert_allclose(mu.covs[:, 0, 0], [2 / 3, 2 / 3],
                                   atol=1e-12)
        assert mu.cross_covs[0, 0, 0] == pytest.approx(1 / 3, abs=1e-12)

    @pytest.mark.parametrize("method", ["sequential", "parallel"])
    @pytest.mark.parametrize("T,D", [(1, 1), (7, 2), (17, 3), (40, 2)])
    def test_matches_dense(self, method, T, D):
        rng = np.random.default_rng(T * 7 + D)
        eta = random_chain(T, D, rng)
        mu = natural_to_mean(eta, method=method)
        m_ref, S_ref, X_ref = dense_marginals(eta)
        np.testing.assert_allclose(mu.m, m_ref, atol=1e-9)
        np.testing.assert_allclose(mu.covs, S_ref, atol=1e-9)
        np.testing.assert_allclose(mu.cross_covs, X_ref, atol=1e-9)

    def test_paths_agree_and_symmetric_pd(self):
        rng = np.random.default_rng(11)
        eta = random_chain(150, 3, rng)
        mu_s = natural_to_mean(eta, method="sequential")
        mu_p = natural_to_mean(eta, method="parallel")
        np.testing.assert_allclose(mu_s.m, mu_p.m, atol=1e-8)
        np.testing.assert_allclose(mu_s.mu2, mu_p.mu2, atol=1e-8)
        np.testing.assert_allclose(mu_s.mu3, mu_p.mu3, atol=1e-8)
        covs = mu_p.covs
        np.testing.assert_allclose(covs, np.swapaxes(covs, -1, -2),
                                   atol=1e-12)
        assert np.all(np.linalg.eigvalsh(covs) > 0)

    def test_uncorrelated_chain_zero_cross(self):
        """With all off-diagonal blocks zero, mu3 = m_{i+1} m_i^T exactly."""
        rng = np.random.default_rng(2)
        eta0 = random_chain(6, 2, rng)
        eta = NaturalParams(h=eta0.h, J=eta0.J, L=np.zeros_like(eta0.L))
        mu = natural_to_mean(eta)
        np.testing.assert_allclose(
            mu.mu3, mu.m[1:, :, None] * mu.m[:-1, None, :], atol=1e-12)

    def test_batched_matches_per_chain(self):
        rng = np.random.default_rng(4)
        eta = random_chain(9, 2, rng, batch=(5,))
        mu = natural_to_mean(eta, method="parallel")
        for b in range(5):
            mu_b = natural_to_mean(eta.map_batch(b), method="parallel")
            np.testing.assert_allclose(mu.m[b], mu_b.m, atol=1e-12)
            np.testing.assert_allclose(mu.mu2[b], mu_b.mu2, atol=1e-12)


class TestGradientIdentities:
    def test_finite_difference_of_log_normalizer_is_mean(self):
        """Central differences of A(eta) against every natural coordinate."""
        rng = np.random.default_rng(21)
        eta = random_chain(3, 2, rng)
        mu = natural_to_mean(eta)
        eps = 1e-5

        def A(e):
            return log_normalizer_sequential(e)

        for i in range(4):
            for a in range(2):
                hp, hm = eta.h.copy(), eta.h.copy()
                hp[i, a] += eps
                hm[i, a] -= eps
                fd = (A(NaturalParams(hp, eta.J, eta.L))
                      - A(NaturalParams(hm, eta.J, eta.L))) / (2 * eps)
                assert fd == pytest.approx(mu.m[i, a], abs=1e-4)
        # symmetric J perturbation: dA = -mu2[a,b] (off-diag), -mu2[a,a]/2
        for i in range(4):
            for a in range(2):
                for b in range(a, 2):
                    Jp, Jm = eta.J.copy(), eta.J.copy()
                    Jp[i, a, b] += eps
                    Jp[i, b, a] += eps
                    Jm[i, a, b] -= eps
                    Jm[i, b, a] -= eps
                    fd = (A(NaturalParams(eta.h, Jp, eta.L))
                          - A(NaturalParams(eta.h, Jm, eta.L))) / (2 * eps)
                    # the double-increment on the diagonal makes the
                    # expected slope -mu2[a,b] in both cases
                    assert fd == pytest.approx(-mu.mu2[i, a, b], abs=1e-4)
        for i in range(3):
            Lp, Lm = eta.L.copy(), eta.L.copy()
            Lp[i, 0, 1] += eps
            Lm[i, 0, 1] -= eps
            fd = (A(NaturalParams(eta.h, eta.J, Lp))
                  - A(NaturalParams(eta.h, eta.J, Lm))) / (2 * eps)
            assert fd == pytest.approx(-mu.mu3[i, 0, 1], abs=1e-4)

    def test_kl_mean_gradient_is_natural_difference(self):
        """FD of KL(eta1 || eta2) wrt mu1 through a mean->natural re-solve
        equals eta1 - eta2 (small instances)."""
        rng = np.random.default_rng(33)
        eta1 = random_chain(3, 2, rng)
        eta2 = random_chain(3, 2, rng)
        mu1 = natural_to_mean(eta1)
        eps = 1e-6

        def kl_of_mu(m, mu2, mu3):
            from ngsde.chain import MeanParams

            mu = MeanParams(m=m, mu2=mu2, mu3=mu3)
            return kl_divergence(mean_to_natural(mu), eta2, mu1=mu)

        base = (mu1.m.copy(), mu1.mu2.copy(), mu1.mu3.copy())
        # a few coordinates of each block
        for i, a in [(0, 0), (2, 1)]:
            mp = base[0].copy()
            mp[i, a] += eps
            mm = base[0].copy()
            mm[i, a] -= eps
            fd = (kl_of_mu(mp, base[1], base[2])
                  - kl_of_mu(mm, base[1], base[2])) / (2 * eps)
            assert fd == pytest.approx(eta1.h[i, a] - eta2.h[i, a], abs=1e-4)
        for i, a, b in [(1, 0, 1), (3, 0, 0)]:
            p2 = base[1].copy()
            m2 = base[1].copy()
            p2[i, a, b] += eps
            p2[i, b, a] += eps if a != b else 0.0
            m2[i, a, b] -= eps
            m2[i, b, a] -= eps if a != b else 0.0
            fd = (kl_of_mu(base[0], p2, base[2])
                  - kl_of_mu(base[0], m2, base[2])) / (2 * eps)
            # pairing: symmetric perturbation gives -(J1-J2)[a,b] off the
            # diagonal and half that on it (single-entry increment)
            expect = -(eta1.J[i, a, b] - eta2.J[i, a, b]) * (
                0.5 if a == b else 1.0)
            assert fd == pytest.approx(expect, abs=2e-4)
        for i, a, b in [(0, 1, 0), (2, 0, 1)]:
            p3 = base[2].copy()
            m3 = base[2].copy()
            p3[i, a, b] += eps
            m3[i, a, b] -= eps
            fd = (kl_of_mu(base[0], base[1], p3)
                  - kl_of_mu(base[0], base[1], m3)) / (2 * eps)
            expect = -(eta1.L[i, a, b] - eta2.L[i, a, b])
            assert fd == pytest.approx(expect, abs=2e-4)


class TestKL:
    def test_self_kl_zero(self):
        rng = np.random.default_rng(8)
        eta = random_chain(8, 2, rng)
        assert abs(kl_divergence(eta, eta)) < 1e-9

    def test_single_node_gaussians(self):
        """KL(N(0,1) || N(1,1)) = 1/2."""
        e1 = NaturalParams(h=np.zeros((1, 1)), J=np.ones((1, 1, 1)),
                           L=np.zeros((0, 1, 1)))
        e2 = NaturalParams(h=np.ones((1, 1)), J=np.ones((1, 1, 1)),
                           L=np.zeros((0, 1, 1)))
        assert kl_divergence(e1, e2) == pytest.approx(0.5, abs=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(14)
        eta1 = random_chain(8, 2, rng)
        eta2 = random_chain(8, 2, rng)
        kl = kl_divergence(eta1, eta2)
        assert kl == pytest.approx(dense_kl(eta1, eta2), abs=1e-8)
        assert kl >= 0


class TestConversions:
    def test_mean_to_natural_roundtrip(self):
        rng = np.random.default_rng(6)
        eta = random_chain(10, 3, rng)
        mu = natural_to_mean(eta)
        eta2 = mean_to_natural(mu)
        np.testing.assert_allclose(eta2.h, eta.h, atol=1e-8)
        np.testing.assert_allclose(eta2.J, eta.J, atol=1e-8)
        np.testing.assert_allclose(eta2.L, eta.L, atol=1e-8)

    def test_serialization_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        eta = random_chain(5, 2, rng, batch=(3,))
        path = tmp_path / "eta.npz"
        eta.save(path)
        loaded = NaturalParams.load(path)
        np.testing.assert_array_equal(loaded.h, eta.h)
        np.testing.assert_array_equal(loaded.J, eta.J)
        np.testing.assert_array_equal(loaded.L, eta.L)
        mu = natural_to_mean(eta)
        mu.save(tmp_path / "mu.npz")
        from ngsde.chain import MeanParams

        mu2 = MeanParams.load(tmp_path / "mu.npz")
        np.testing.assert_array_equal(mu2.m, mu.m)

    def test_inner_product_pairing(self):
        """entropy identity: A - <eta, mu> equals the dense differential
        entropy."""
        rng = np.random.default_rng(10)
        eta = random_chain(4, 2, rng)
        mu = natural_to_mean(eta)
        ent = log_normalizer_sequential(eta) - natural_mean_inner(eta, mu)
        from helpers import dense_precision

        P = dense_precision(eta)
        n = P.shape[0]
        sign, ld = np.linalg.slogdet(np.linalg.inv(P))
        ent_ref = 0.5 * (n * (1 + np.log(2 * np.pi)) + ld)
        assert ent == pytest.approx(ent_ref, rel=1e-9)
