import numpy as np
import pytest

from bentmix.model import (
    ArCoefs,
    BentCableCoefs,
    IndividualParams,
    ModelSetupError,
    TransitionCoefs,
    ar_design,
    ar_stationary,
    bend_basis,
    bent_cable,
    conditional_loglik,
    conditional_loglik_arrays,
    critical_time_point,
    quasi_difference,
)
from bentmix.data import LongitudinalDataset, Profile


LIN = BentCableCoefs(244.0, 0.5, -0.75)
TRANS = TransitionCoefs(gamma=1.0, tau=4.0)


class TestBendBasis:
    def test_left_of_bend_is_zero(self):
        assert bend_basis(2.0, 1.0, 4.0) == 0.0

    def test_right_boundary(self):
        assert bend_basis(5.0, 1.0, 4.0) == pytest.approx(1.0, rel=1e-12)

    def test_centre(self):
        assert bend_basis(4.0, 1.0, 4.0) == pytest.approx(0.25, rel=1e-12)

    def test_broken_stick_hinge(self):
        assert bend_basis(5.0, 0.0, 4.0) == pytest.approx(1.0, rel=1e-12)
        assert bend_basis(4.0, 0.0, 4.0) == 0.0
        assert bend_basis(3.0, 0.0, 4.0) == 0.0

    def test_exact_zero_left_and_linear_right(self):
        t = np.linspace(-10, 3, 50)
        assert np.all(bend_basis(t, 1.0, 4.0) == 0.0)
        t = np.linspace(5, 40, 50)
        assert np.all(bend_basis(t, 1.0, 4.0) == t - 4.0)

    def test_c1_continuity_at_knots(self):
        gamma, tau, h = 1.3, 7.0, 1e-6
        for knot in (tau - gamma, tau + gamma):
            left = (bend_basis(knot, gamma, tau) - bend_basis(knot - h, gamma, tau)) / h
            right = (bend_basis(knot + h, gamma, tau) - bend_basis(knot, gamma, tau)) / h
            assert abs(left - right) < 1e-6

    def test_continuity_of_value_at_knots(self):
        gamma, tau = 2.5, 9.0
        for knot in (tau - gamma, tau + gamma):
            a = bend_basis(knot - 1e-12, gamma, tau)
            b = bend_basis(knot + 1e-12, gamma, tau)
            assert abs(a - b) < 1e-9

    def test_broken_stick_limit(self):
        t = np.linspace(0, 20, 401)
        gap = np.abs(bend_basis(t, 1e-6, 7.0) - np.maximum(t - 7.0, 0.0))
        assert gap.max() < 1e-6

    def test_limit_is_monotone_in_gamma(self):
        t = 7.3  # fixed point away from tau
        gaps = [
            abs(bend_basis(t, g, 7.0) - max(t - 7.0, 0.0))
            for g in (0.4, 0.2, 0.1, 0.05, 0.01)
        ]
        assert all(a >= b for a, b in zip(gaps, gaps[1:]))

    def test_broadcasting_mixed_widths(self):
        t = np.arange(10.0)
        gamma = np.array([[0.0], [2.0]])
        tau = np.array([[4.0], [4.0]])
        out = bend_basis(t, gamma, tau)
        assert out.shape == (2, 10)
        assert np.all(out[0] == np.where(t > 4.0, t - 4.0, 0.0))


class TestBentCable:
    def test_value_on_outgoing_phase(self):
        assert bent_cable(7.0, LIN, TRANS) == pytest.approx(245.25, rel=1e-12)

    def test_value_on_incoming_phase(self):
        assert bent_cable(0.0, LIN, TRANS) == pytest.approx(244.0, rel=1e-12)

    def test_outgoing_slope_by_finite_difference(self):
        h = 1e-6
        t = TRANS.tau + TRANS.gamma + 0.5
        slope = (bent_cable(t + h, LIN, TRANS) - bent_cable(t, LIN, TRANS)) / h
        assert slope == pytest.approx(-0.25, abs=1e-6)


class TestCriticalTimePoint:
    def test_gradual_formula(self):
        ctp = critical_time_point(LIN, TRANS)
        assert ctp == pytest.approx(4.0 - 1.0 + 2 * 0.5 / 0.75, rel=1e-12)

    def test_no_sign_change_is_undefined(self):
        lin = BentCableCoefs(244.0, 0.5, -0.3)
        assert critical_time_point(lin, TRANS) is None

    def test_abrupt_case_returns_tau(self):
        assert critical_time_point(LIN, TransitionCoefs(0.0, 4.0)) == pytest.approx(4.0)

    def test_population_scale_evaluation(self):
        # independent arithmetic oracle for the same expression
        b1, b2, gamma, tau = 0.003, -0.016, 9.46, 19.57
        expected = tau - gamma - 2.0 * b1 * gamma / b2
        got = critical_time_point(
            BentCableCoefs(37.38, b1, b2), TransitionCoefs(gamma, tau)
        )
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(13.657, abs=1e-3)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            b1 = rng.normal()
            b2 = rng.normal()
            trans = TransitionCoefs(abs(rng.normal()) + 0.1, abs(rng.normal()) + 1.0)
            c = rng.uniform(0.1, 10.0)
            a = critical_time_point(BentCableCoefs(0.0, b1, b2), trans)
            b = critical_time_point(BentCableCoefs(0.0, c * b1, c * b2), trans)
            if a is None:
                assert b is None
            else:
                assert a == pytest.approx(b, rel=1e-9)

    def test_zero_slope_difference_is_undefined(self):
        assert critical_time_point(BentCableCoefs(0.0, 0.5, 0.0), TRANS) is None


class TestArDesign:
    def test_order_zero_is_identity(self):
        t = np.arange(6.0)
        y = np.array([1.0, 4.0, 2.0, 8.0, 5.0, 7.0])
        design = ar_design(t, y, TRANS, ArCoefs(np.zeros(0)))
        assert np.array_equal(design.z, y)
        assert np.array_equal(design.x, t)
        assert np.array_equal(design.r, bend_basis(t, TRANS.gamma, TRANS.tau))
        assert design.intercept == 1.0

    def test_order_one_arithmetic(self):
        design = ar_design(
            [0.0, 1.0], [10.0, 11.0], TransitionCoefs(0.0, 5.0), ArCoefs([0.7])
        )
        assert design.z == pytest.approx([4.0])
        assert design.x == pytest.approx([1.0])
        assert design.intercept == pytest.approx(0.3)

    def test_order_two_arithmetic(self):
        z = quasi_difference(np.array([1.0, 1.0, 1.0]), np.array([0.8, -0.1]))
        assert z == pytest.approx([0.3])

    def test_too_short_profile_rejected(self):
        with pytest.raises(ModelSetupError):
            ar_design([0.0, 1.0], [1.0, 2.0], TRANS, ArCoefs([0.5, 0.1]))


class TestStationarity:
    def test_ar1_condition(self):
        assert ar_stationary([0.99])
        assert not ar_stationary([1.0])
        assert not ar_stationary([-1.01])

    def test_ar2_triangle(self):
        assert ar_stationary([0.8, -0.1])
        assert not ar_stationary([0.6, 0.5])    # phi1 + phi2 >= 1
        assert not ar_stationary([-0.6, 0.5])   # phi2 - phi1 >= 1
        assert not ar_stationary([0.0, -1.1])   # |phi2| >= 1

    def test_order_zero_trivially_stationary(self):
        assert ar_stationary(np.zeros(0))


def _params(beta, gamma, tau, sigma2):
    indicator = 1 if gamma > 0 else 0
    return IndividualParams(
        beta=BentCableCoefs(*beta),
        trans=TransitionCoefs(gamma, tau),
        indicator=indicator,
        sigma2=sigma2,
    )


class TestConditionalLoglik:
    def test_zero_residuals_unit_variance(self):
        t = np.arange(8.0)
        y = bent_cable(t, LIN, TRANS)
        ds = LongitudinalDataset(
            profiles=(
                Profile("a", t, y),
                Profile("b", t, y),
            )
        )
        params = [_params((244.0, 0.5, -0.75), 1.0, 4.0, 1.0)] * 2
        ll = conditional_loglik(ds, params, ArCoefs(np.zeros(0)))
        assert ll == pytest.approx(-(16 / 2) * np.log(2 * np.pi), rel=1e-12)

    def test_order_zero_matches_iid_regression(self):
        rng = np.random.default_rng(1)
        t = np.arange(10.0)
        y = bent_cable(t, LIN, TRANS) + rng.normal(size=10)
        ds = LongitudinalDataset(profiles=(Profile("a", t, y), Profile("b", t, y)))
        params = [_params((244.0, 0.5, -0.75), 1.0, 4.0, 2.0)] * 2
        resid = y - bent_cable(t, LIN, TRANS)
        expected = 2 * np.sum(
            -0.5 * (np.log(2 * np.pi * 2.0) + resid**2 / 2.0)
        )
        ll = conditional_loglik(ds, params, ArCoefs(np.zeros(0)))
        assert ll == pytest.approx(expected, rel=1e-12)

    def test_tiny_ar1_profile_against_direct_product(self):
        # one individual, n=3, p=1: multiply the two conditional densities
        t = np.array([0.0, 1.0, 2.0])
        y = np.array([5.0, 6.5, 7.1])
        beta = (5.0, 0.8, -0.5)
        gamma, tau, sigma2, phi = 0.6, 1.5, 0.7, 0.4
        f = bent_cable(t, BentCableCoefs(*beta), TransitionCoefs(gamma, tau))
        eps = y - f
        expected = 0.0
        for j in (1, 2):
            mean = f[j] + phi * eps[j - 1]
            expected += -0.5 * (np.log(2 * np.pi * sigma2) + (y[j] - mean) ** 2 / sigma2)
        ll = conditional_loglik_arrays(
            [(t, y)],
            np.array([beta]),
            np.array([gamma]),
            np.array([tau]),
            np.array([sigma2]),
            np.array([phi]),
        )
        assert ll == pytest.approx(expected, rel=1e-12)

    def test_additivity_across_individuals(self):
        rng = np.random.default_rng(2)
        t = np.arange(9.0)
        profiles = []
        for i in range(3):
            y = rng.normal(size=9) + 10
            profiles.append((t, y))
        beta = rng.normal(size=(3, 3))
        gamma = np.array([0.0, 1.0, 2.0])
        tau = np.array([3.0, 4.0, 5.0])
        sigma2 = np.array([1.0, 2.0, 0.5])
        phi = np.array([0.3])
        total = conditional_loglik_arrays(profiles, beta, gamma, tau, sigma2, phi)
        parts = sum(
            conditional_loglik_arrays(
                [profiles[i]], beta[i : i + 1], gamma[i : i + 1],
                tau[i : i + 1], sigma2[i : i + 1], phi,
            )
            for i in range(3)
        )
        assert total == pytest.approx(parts, rel=1e-12)

    def test_nonpositive_variance_rejected(self):
        t = np.arange(5.0)
        with pytest.raises(ValueError):
            conditional_loglik_arrays(
                [(t, t)], np.zeros((1, 3)), np.zeros(1), np.ones(1),
                np.array([0.0]), np.zeros(0),
            )


class TestDomainTypes:
    def test_indicator_width_consistency_enforced(self):
        with pytest.raises(ValueError):
            _params((0.0, 1.0, -2.0), 0.5, 3.0, 1.0).__class__(
                beta=BentCableCoefs(0.0, 1.0, -2.0),
                trans=TransitionCoefs(0.5, 3.0),
                indicator=0,
                sigma2=1.0,
            )
        with pytest.raises(ValueError):
            IndividualParams(
                beta=BentCableCoefs(0.0, 1.0, -2.0),
                trans=TransitionCoefs(0.0, 3.0),
                indicator=1,
                sigma2=1.0,
            )

    def test_transition_bounds(self):
        with pytest.raises(ValueError):
            TransitionCoefs(-0.1, 1.0)
        with pytest.raises(ValueError):
            TransitionCoefs(1.0, 0.0)

    def test_coefs_must_be_finite(self):
        with pytest.raises(ValueError):
            BentCableCoefs(np.nan, 0.0, 0.0)
