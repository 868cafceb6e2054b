import math

import numpy as np
import pytest

from levylab.coefficients import (CoefficientError, CoefficientSet,
                                  coefficients_from_config, family_from_config,
                                  linear_growth_report, log_lipschitz_report,
                                  require_linear_growth)


def test_zero_coefficients_constants():
    cs = coefficients_from_config({"name": "zero", "d": 2, "m": 2})
    rep = linear_growth_report(cs)
    assert rep["constant"] == 0.0
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.all(cs.b(0.0, x) == 0.0)
    assert np.all(cs.f(0.0, x) == 0.0)


def test_linear_drift_constant_near_one():
    # |x| <= C (1 + |x|) holds with C = 1; the probe-grid fit approaches it
    cs = coefficients_from_config({"name": "linear", "d": 1, "m": 1,
                                   "params": {"A": [[1.0]], "sigma": 0.0}})
    rep = linear_growth_report(cs)
    assert 0.9 <= rep["constant"] <= 1.0
    assert rep["witness"] is None


def test_declared_bound_violation_witnessed():
    cs = coefficients_from_config({"name": "linear", "d": 1, "m": 1,
                                   "params": {"A": [[4.0]], "sigma": 0.0},
                                   "growth_bound": 1.0})
    with pytest.raises(CoefficientError) as exc:
        require_linear_growth(cs)
    assert "violated" in str(exc.value)


def test_ou_a_matrix():
    cs = coefficients_from_config({"name": "ou", "d": 1, "m": 1,
                                   "params": {"theta": 1.0, "sigma": math.sqrt(2)}})
    a = cs.a(0.0, np.array([[0.3]]))
    assert a[0, 0, 0] == pytest.approx(1.0)


def test_rotation_degenerate_sigma_rank():
    cs = coefficients_from_config({"name": "rotation_degenerate", "d": 2, "m": 1,
                                   "params": {"omega": 2.0, "s": 1.5}})
    s = cs.sigma(0.0, np.zeros((1, 2)))
    assert s.shape == (1, 2, 1)
    assert s[0, 1, 0] == 0.0
    b = cs.b(0.0, np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(b[0], [0.0, 2.0])


def test_log_lipschitz_fit_linear():
    cs = coefficients_from_config({"name": "linear", "d": 1, "m": 1,
                                   "params": {"A": [[-2.0]], "sigma": 1.0}})
    rep = log_lipschitz_report(cs)
    # |b(x)-b(y)| = 2|x-y| <= C |x-y| log(|x-y|^-1 + e) with C = 2
    assert rep["C_b"] <= 2.0 + 1e-9
    assert rep["C_sigma"] == 0.0


def test_rowwise_wrapping():
    cs = CoefficientSet(
        b=lambda t, x: -x, sigma=lambda t, x: np.array([[0.5]]),
        d=1, m=1, gamma=1.0, g=lambda t, x: 1.0 + 0.0 * t, vectorized=False)
    out = cs.b(0.0, np.array([[1.0], [2.0]]))
    np.testing.assert_allclose(out, [[-1.0], [-2.0]])
    assert cs.sigma(0.0, np.array([[1.0], [2.0]])).shape == (2, 1, 1)


class TestFamily:
    cfg = {
        "base": {"name": "ou", "d": 1, "m": 1,
                 "params": {"theta": 1.0, "sigma": 1.0}, "gamma": 0.5},
        "drift_perturbation": {"name": "sine", "amp": 2.0},
        "gamma_perturbation": 1.0,
        "schedule": [1, 2, 4],
    }

    def test_members_share_g_and_gamma_sup(self):
        fam = family_from_config(self.cfg)
        assert set(fam.members) == {1, 2, 4}
        assert fam.gamma_sup == pytest.approx(1.5)  # gamma + 1/1
        for n, cs in fam.members.items():
            assert cs.g is fam.limit.g

    def test_perturbation_scales_inverse_n(self):
        fam = family_from_config(self.cfg)
        x = np.array([[0.7]])
        base = fam.limit.b(0.0, x)[0, 0]
        for n, cs in fam.members.items():
            assert cs.b(0.0, x)[0, 0] - base == pytest.approx(
                2.0 / n * math.sin(0.7), rel=1e-12)
            assert cs.gamma == pytest.approx(0.5 + 1.0 / n)

    def test_mismatched_g_rejected(self):
        from levylab.coefficients import CoefficientFamily
        fam = family_from_config(self.cfg)
        rogue = CoefficientSet(b=fam.limit.b, sigma=fam.limit.sigma, d=1, m=1,
                               gamma=0.5, g=lambda t, x: np.ones(np.atleast_2d(x).shape[0]))
        with pytest.raises(CoefficientError):
            CoefficientFamily(limit=fam.limit, members={1: rogue})
