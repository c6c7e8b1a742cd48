import math

import numpy as np
import pytest

from qvhi.constitutive import (ConstitutiveLaw, SymTensor2, check_growth,
                               check_strong_monotonicity, monotonicity_constant,
                               stress, stress_array, tangent_coefficients, tensor_norm)
from qvhi.errors import ParameterError


def random_sym(rng, scale=1.0):
    a = rng.normal(size=(2, 2)) * scale
    return 0.5 * (a + a.T)


class TestStress:
    def test_newtonian_identity(self):
        law = ConstitutiveLaw.newtonian(2.0)
        out = stress(law, SymTensor2.identity())
        assert (out.d11, out.d12, out.d22) == (2.0, 0.0, 2.0)

    def test_zero_tensor(self):
        for law in (ConstitutiveLaw.newtonian(1.0), ConstitutiveLaw.carreau(0.5, 2.0)):
            out = stress(law, SymTensor2(0.0, 0.0, 0.0))
            assert out.norm() == 0.0

    def test_carreau_at_unit_norm(self):
        law = ConstitutiveLaw.carreau(0.5, 2.0, kappa=1.0, q=1.5)
        D = SymTensor2(1.0, 0.0, 0.0)  # |D| = 1
        mu1 = 0.5 + 1.5 * 2.0 ** (-0.25)
        out = stress(law, D)
        assert out.d11 == pytest.approx(mu1, rel=1e-14)
        assert out.d22 == 0.0

    def test_newtonian_homogeneity(self):
        law = ConstitutiveLaw.newtonian(3.0)
        rng = np.random.default_rng(0)
        D = random_sym(rng)
        for t in (0.0, 0.5, 2.0, 7.7):
            np.testing.assert_allclose(stress_array(law, t * D),
                                       t * stress_array(law, D), atol=1e-13)

    def test_frame_indifference(self):
        rng = np.random.default_rng(1)
        for law in (ConstitutiveLaw.newtonian(1.5), ConstitutiveLaw.carreau(0.5, 1.5)):
            for _ in range(50):
                D = random_sym(rng, 2.0)
                th = rng.uniform(0, 2 * math.pi)
                R = np.array([[math.cos(th), -math.sin(th)],
                              [math.sin(th), math.cos(th)]])
                lhs = stress_array(law, R @ D @ R.T)
                rhs = R @ stress_array(law, D) @ R.T
                np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestMonotonicity:
    def test_newtonian_exact(self):
        rep = check_strong_monotonicity(ConstitutiveLaw.newtonian(2.0), seed=0)
        assert rep.passed
        assert rep.stat == pytest.approx(2.0, abs=1e-12)

    def test_carreau_above_declared(self):
        law = ConstitutiveLaw.carreau(0.5, 2.0, kappa=1.0, q=1.5)
        rep = check_strong_monotonicity(law, n_pairs=5000, radius=20.0, seed=1)
        assert rep.passed
        assert rep.stat >= law.mT - 1e-10

    def test_decreasing_viscosity_fails_with_witness(self):
        # mu(r) = 1/(1+r^2): (mu(r) r)' = (1-r^2)/(1+r^2)^2 < 0 past r = 1,
        # so collinear pairs there produce negative quotients
        law = ConstitutiveLaw(kind="generalized", a0=0.0, a1=1.0, mT=0.3,
                              mu=lambda r: 1.0 / (1.0 + r * r), mu_lo=1e-6, mu_hi=1.0,
                              mu2=0.3, label="decreasing")
        rep = check_strong_monotonicity(law, n_pairs=2000, radius=10.0, seed=2)
        assert not rep.passed
        assert rep.stat < 0
        assert rep.witness is not None

    def test_mildly_decreasing_viscosity_fails_declared_bound(self):
        # mu(r) = 1/(1+r) keeps (mu r)' = 1/(1+r)^2 > 0: monotone, but the
        # quotient drains to 0, so a positive declared constant is refuted
        law = ConstitutiveLaw(kind="generalized", a0=0.0, a1=1.0, mT=0.5,
                              mu=lambda r: 1.0 / (1.0 + r), mu_lo=1e-6, mu_hi=1.0,
                              mu2=0.5, label="draining")
        rep = check_strong_monotonicity(law, n_pairs=2000, radius=10.0, seed=2)
        assert not rep.passed
        assert 0 <= rep.stat < 0.5
        assert rep.witness is not None

    def test_constant_helper(self):
        assert monotonicity_constant(ConstitutiveLaw.newtonian(3.5)) == 3.5
        law = ConstitutiveLaw.carreau(0.5, 2.0)
        m = monotonicity_constant(law, seed=3)
        rep = check_strong_monotonicity(law, n_pairs=2000, radius=20.0, seed=3)
        assert m == pytest.approx(0.9 * rep.stat)  # sampled value with safety factor
        assert m > 0

    def test_quotient_never_below_declared_bulk(self):
        rng = np.random.default_rng(4)
        for law in (ConstitutiveLaw.newtonian(1.0), ConstitutiveLaw.carreau(0.4, 1.2)):
            C = np.array([random_sym(rng, 3.0) for _ in range(10_000)])
            D = np.array([random_sym(rng, 3.0) for _ in range(10_000)])
            diff = C - D
            dn2 = np.sum(diff * diff, axis=(-2, -1))
            keep = dn2 > 1e-14
            q = np.sum((stress_array(law, C) - stress_array(law, D)) * diff,
                       axis=(-2, -1))[keep] / dn2[keep]
            assert np.min(q) >= law.mT - 1e-10


class TestGrowth:
    def test_newtonian_passes(self):
        rep = check_growth(ConstitutiveLaw.newtonian(1.0), seed=0)
        assert rep.passed

    def test_carreau_bounded_by_mu_hi(self):
        rep = check_growth(ConstitutiveLaw.carreau(0.5, 2.0), seed=1)
        assert rep.passed  # a1 = mu_ref by construction

    def test_understated_a1_fails(self):
        law = ConstitutiveLaw(kind="generalized", a0=0.0, a1=0.5, mT=0.4,
                              mu=lambda r: np.full_like(np.asarray(r, dtype=float), 1.0),
                              mu_lo=1.0, mu_hi=1.0, mu2=0.4, label="understated")
        rep = check_growth(law, seed=2)
        assert not rep.passed
        assert rep.witness is not None


class TestTangent:
    def test_matches_finite_differences(self):
        law = ConstitutiveLaw.carreau(0.5, 2.0, kappa=0.7, q=1.8)
        rng = np.random.default_rng(5)
        for _ in range(30):
            D = random_sym(rng, 2.0) + 0.1 * np.eye(2)
            E = random_sym(rng, 1.0)
            mu, beta = tangent_coefficients(law, D)
            dT = mu * E + beta * np.sum(D * E) * D
            h = 1e-7
            fd = (stress_array(law, D + h * E) - stress_array(law, D - h * E)) / (2 * h)
            np.testing.assert_allclose(dT, fd, rtol=1e-5, atol=1e-7)

    def test_zero_state_has_no_rank_one_term(self):
        law = ConstitutiveLaw.carreau(0.5, 2.0)
        mu, beta = tangent_coefficients(law, np.zeros((2, 2)))
        assert beta == 0.0
        assert mu == pytest.approx(2.0)


class TestValidation:
    def test_sym_tensor_norm(self):
        assert SymTensor2(3.0, 0.0, 4.0).norm() == 5.0
        assert SymTensor2(0.0, 1.0, 0.0).norm() == pytest.approx(math.sqrt(2))

    def test_from_matrix_rejects_asymmetric(self):
        with pytest.raises(ParameterError):
            SymTensor2.from_matrix(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_bad_parameters(self):
        with pytest.raises(ParameterError):
            ConstitutiveLaw.newtonian(0.0)
        with pytest.raises(ParameterError):
            ConstitutiveLaw.carreau(2.0, 1.0)  # mu_inf > mu_ref
        with pytest.raises(ParameterError):
            ConstitutiveLaw.carreau(0.5, 1.0, q=2.5)

    def test_norm_helper(self):
        rng = np.random.default_rng(6)
        D = np.array([random_sym(rng) for _ in range(5)])
        expect = [np.linalg.norm(d) for d in D]
        np.testing.assert_allclose(tensor_norm(D), expect, rtol=1e-14)
