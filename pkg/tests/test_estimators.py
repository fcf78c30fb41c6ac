"""Value estimators and regression learners: hand-computed values,
influence-function centering, error paths."""

import numpy as np
import pytest

from policyshift.estimators import (
    CannotIdentifyError,
    MissingDataError,
    NotApplicableError,
    ValueEstimate,
    centered_value_plugin,
    crossfit_nuisances,
    evaluate_value,
    fit_boosted_stumps,
    fit_cate_signal,
    fit_density_ratio,
    fit_logistic,
    fit_sieve,
    value_aipw,
    value_eff,
    value_ipw,
    value_onlyx,
)
from policyshift.estimators import _eff_if, _onlyx_if
from policyshift.model import LabeledDataset, NuisanceSet, ThresholdPolicy

N_CASES = 200


def _phi_const(p1):
    return lambda a, x, s=None: np.full(x.shape[0], p1 if a == 1 else 1 - p1)


class TestHandComputedValues:
    """Tiny calibration samples where the estimators reduce to arithmetic."""

    def _data(self):
        # two calibration rows, one treated (phi = 1/4) one control
        return LabeledDataset([[0.5], [-0.5]], [1, -1], [2.0, 4.0], site=[0, 0])

    def test_ipw(self):
        est = value_ipw(ThresholdPolicy(0.0), self._data(), _phi_const(0.25))
        terms = np.array([2.0 / 0.25, 4.0 / 0.75])
        assert est.point == pytest.approx(terms.mean())
        assert est.if_variance == pytest.approx(terms.var() / 2)
        assert est.n_used == 2 and est.estimator_tag == "ipw"

    def test_aipw(self):
        mu = lambda a, x: np.full(x.shape[0], float(a))
        est = value_aipw(ThresholdPolicy(0.0), self._data(), _phi_const(0.25), mu)
        # row 1: (2 - 1)/0.25 + 1 = 5 ; row 2: (4 + 1)/0.75 - 1
        terms = np.array([5.0, 5.0 / 0.75 - 1.0])
        assert est.point == pytest.approx(terms.mean())

    def test_ipw_ignores_off_policy_actions(self):
        data = LabeledDataset([[0.5], [-0.5]], [-1, 1], [2.0, 4.0], site=[0, 0])
        est = value_ipw(ThresholdPolicy(0.0), data, _phi_const(0.25))
        # both rows' actions disagree with the policy: zero weight
        assert est.point == 0.0

    def test_plugin(self):
        est = centered_value_plugin(ThresholdPolicy(0.0), [[1.0], [-1.0]],
                                    lambda x: 2.0 * x[:, 0])
        # (2*1 - 1)*2 = 2 and (2*0 - 1)*(-2) = 2
        assert est.point == pytest.approx(2.0)
        assert est.if_variance is None


def _random_shift_data(rng, n=60):
    X = rng.normal(size=(n, 2))
    site = (rng.uniform(size=n) < 0.5).astype(int)
    a = rng.choice([-1, 1], n)
    y = rng.normal(size=n) + a * X[:, 0]
    return LabeledDataset(X, a, y, site)


def _random_frozen_nuisances(rng):
    c = rng.normal(size=6)
    return NuisanceSet(
        mu=lambda a, x: c[0] + c[1] * x[:, 0] + a * c[2] * x[:, 1],
        phi=lambda a, x, s=None: np.clip(
            0.5 + 0.3 * np.tanh(c[3] * x[:, 0]), 0.05, 0.95
        ) if a == 1 else 1 - np.clip(0.5 + 0.3 * np.tanh(c[3] * x[:, 0]), 0.05, 0.95),
        sel=lambda x: np.clip(0.5 + 0.2 * np.tanh(c[4] * x[:, 1]), 0.1, 0.9),
        w_star=lambda x: np.exp(np.clip(c[5] * x[:, 0], -2, 2)),
    )


class TestInfluenceFunctionCentering:
    def test_eff_if_mean_zero(self):
        """Centered influence contributions of the covariate-shift-efficient
        estimator average to exactly zero."""
        rng = np.random.default_rng(20240903)
        for _ in range(N_CASES):
            data = _random_shift_data(rng)
            if (data.site == 0).sum() < 2 or (data.site == 1).sum() < 2:
                continue
            nuis = _random_frozen_nuisances(rng)
            contrib, _ = _eff_if(ThresholdPolicy(float(rng.normal())), data,
                                 nuis.mu, nuis.phi_at, nuis.sel, nuis.w_star)
            iff = contrib - contrib.mean()
            assert abs(iff.mean()) < 1e-10

    def test_onlyx_if_mean_zero(self):
        rng = np.random.default_rng(20240904)
        for _ in range(N_CASES):
            data = _random_shift_data(rng)
            if (data.site == 0).sum() < 2 or (data.site == 1).sum() < 2:
                continue
            nuis = _random_frozen_nuisances(rng)
            contrib, _ = _onlyx_if(ThresholdPolicy(float(rng.normal())), data,
                                   nuis.mu, nuis.phi_at, nuis.w_star)
            iff = contrib - contrib.mean()
            assert abs(iff.mean()) < 1e-10

    def test_centered_value_is_difference_of_policy_and_complement(self):
        rng = np.random.default_rng(5)
        data = _random_shift_data(rng, n=80)
        nuis = _random_frozen_nuisances(rng)
        pi = ThresholdPolicy(0.2)
        cen = value_eff(pi, data, nuis, centered=True)
        plain = value_eff(pi, data, nuis).point
        bar = value_eff(pi.complement(), data, nuis).point
        assert cen.point == pytest.approx(plain - bar, abs=1e-12)


class TestEstimatorConsistency:
    def test_all_estimators_near_truth_with_true_nuisances(self):
        """Sanity: with the true nuisances and a large sample, every
        estimator lands near the true policy value."""
        rng = np.random.default_rng(6)
        n = 20000
        X = rng.normal(size=(n, 1))
        site = (np.arange(n) % 2 == 0).astype(int)
        a = np.where(rng.uniform(size=n) < 0.5, 1, -1)
        y = a * X[:, 0] + 0.3 * rng.normal(size=n)
        data = LabeledDataset(X, a, y, site)
        nuis = NuisanceSet(
            mu=lambda aa, x: aa * x[:, 0],
            phi=_phi_const(0.5),
            sel=lambda x: np.full(x.shape[0], 0.5),
            w_star=lambda x: np.ones(x.shape[0]),
            cate=lambda x: 2.0 * x[:, 0],
        )
        pi = ThresholdPolicy(0.0)
        truth = float(np.mean(np.abs(rng.normal(size=200000))))  # E[|X|]
        for fn in (lambda: value_ipw(pi, data, nuis.phi_at).point,
                   lambda: value_aipw(pi, data, nuis.phi_at, nuis.mu).point,
                   lambda: value_eff(pi, data, nuis).point,
                   lambda: value_onlyx(pi, data, nuis).point):
            assert fn() == pytest.approx(truth, abs=0.05)


class TestErrorPaths:
    def test_ipw_needs_calibration_outcomes(self):
        data = LabeledDataset([[0.0], [1.0]], [1, np.nan], [1.0, np.nan], site=[1, 0])
        with pytest.raises(MissingDataError):
            value_ipw(ThresholdPolicy(0.0), data, _phi_const(0.5))

    def test_eff_needs_observed_calibration(self):
        data = LabeledDataset([[0.0], [1.0]], [1, np.nan], [1.0, np.nan], site=[1, 0])
        nuis = NuisanceSet(mu=lambda a, x: np.zeros(x.shape[0]), phi=_phi_const(0.5),
                           sel=lambda x: np.full(x.shape[0], 0.5),
                           w_star=lambda x: np.ones(x.shape[0]))
        with pytest.raises(NotApplicableError):
            value_eff(ThresholdPolicy(0.0), data, nuis)

    def test_onlyx_works_without_calibration_outcomes(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(40, 1))
        site = (np.arange(40) < 20).astype(int)
        a = np.where(site == 1, rng.choice([-1, 1], 40), np.nan)
        y = np.where(site == 1, rng.normal(size=40), np.nan)
        data = LabeledDataset(X, a, y, site)
        nuis = NuisanceSet(mu=lambda aa, x: np.zeros(x.shape[0]), phi=_phi_const(0.5),
                           w_star=lambda x: np.ones(x.shape[0]))
        est = value_onlyx(ThresholdPolicy(0.0), data, nuis)
        assert np.isfinite(est.point)

    def test_density_ratio_needs_both_sites(self):
        data = LabeledDataset([[0.0], [1.0]], [1, -1], [0.0, 0.0], site=[1, 1])
        with pytest.raises(CannotIdentifyError):
            fit_density_ratio(data)

    def test_value_estimate_validation(self):
        with pytest.raises(ValueError):
            ValueEstimate(0.0, -1.0, 5, "ipw")
        with pytest.raises(ValueError):
            ValueEstimate(0.0, 1.0, 0, "ipw")

    def test_clipped_fraction_reported(self):
        data = LabeledDataset([[0.5], [-0.5]], [1, -1], [1.0, 1.0], site=[0, 0])
        phi = lambda a, x, s=None: np.full(x.shape[0], 0.001 if a == 1 else 0.5)
        est = value_ipw(ThresholdPolicy(0.0), data, phi)
        assert est.clipped_fraction == pytest.approx(0.5)


class TestRegressionLearners:
    def test_sieve_recovers_polynomial(self):
        rng = np.random.default_rng(10)
        X = rng.uniform(-1, 1, (300, 1))
        y = 1.0 + 2.0 * X[:, 0] - 3.0 * X[:, 0] ** 2
        fit = fit_sieve(X, y)
        assert fit.selected_complexity >= 2
        grid = np.linspace(-1, 1, 11).reshape(-1, 1)
        np.testing.assert_allclose(fit.predict(grid),
                                   1.0 + 2.0 * grid[:, 0] - 3.0 * grid[:, 0] ** 2,
                                   atol=1e-6)

    def test_sieve_prefers_low_degree_under_noise(self):
        rng = np.random.default_rng(11)
        X = rng.uniform(-1, 1, (200, 1))
        y = X[:, 0] + rng.normal(scale=1.0, size=200)
        fit = fit_sieve(X, y, degrees=(1, 5))
        assert fit.selected_complexity == 1

    def test_boosted_stumps_fit_step_function(self):
        rng = np.random.default_rng(12)
        X = rng.uniform(-1, 1, (500, 1))
        y = np.where(X[:, 0] > 0.3, 2.0, -1.0)
        fit = fit_boosted_stumps(X, y, trees=200)
        pred = fit.predict(np.array([[-0.5], [0.8]]))
        assert pred[0] == pytest.approx(-1.0, abs=0.15)
        assert pred[1] == pytest.approx(2.0, abs=0.15)

    def test_logistic_single_class_fallback(self):
        fit = fit_logistic(np.zeros((5, 1)), np.ones(5))
        assert fit.selected_complexity == 0
        assert fit.predict(np.zeros((2, 1)))[0] == pytest.approx(0.99)

    def test_density_ratio_no_shift_is_flat(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(4000, 1))
        site = (np.arange(4000) % 2).astype(int)
        a = np.where(site == 1, 1.0, np.nan)
        y = np.where(site == 1, 0.0, np.nan)
        w_star, sel, p1 = fit_density_ratio(LabeledDataset(X, a, y, site))
        assert p1 == pytest.approx(0.5)
        probe = np.array([[-1.0], [0.0], [1.0]])
        np.testing.assert_allclose(w_star(probe), 1.0, atol=0.15)

    def test_density_ratio_recovers_mean_shift(self):
        rng = np.random.default_rng(14)
        n = 20000
        x_tr = rng.normal(size=n // 2)
        x_ca = rng.normal(loc=1.0, size=n // 2)
        X = np.concatenate([x_tr, x_ca]).reshape(-1, 1)
        site = np.concatenate([np.ones(n // 2, int), np.zeros(n // 2, int)])
        a = np.where(site == 1, 1.0, np.nan)
        y = np.where(site == 1, 0.0, np.nan)
        w_star, _, _ = fit_density_ratio(LabeledDataset(X, a, y, site))
        # true ratio exp(x - 1/2)
        probe = np.array([[0.0], [1.0]])
        np.testing.assert_allclose(w_star(probe), np.exp(probe[:, 0] - 0.5), rtol=0.2)

    def test_cate_signal_unbiased_target(self):
        rng = np.random.default_rng(15)
        n = 4000
        X = rng.uniform(-1, 1, (n, 1))
        a = rng.choice([-1, 1], n)
        y = a * X[:, 0] + 0.1 * rng.normal(size=n)
        data = LabeledDataset(X, a, y, site=np.ones(n, int))
        fit = fit_cate_signal(data, _phi_const(0.5))
        probe = np.array([[-0.8], [0.8]])
        np.testing.assert_allclose(fit.predict(probe), 2.0 * probe[:, 0], atol=0.35)


class TestCrossfitPipeline:
    def _data(self, rng, n=200):
        X = rng.normal(size=(n, 1))
        site = (np.arange(n) % 2).astype(int)
        a = rng.choice([-1, 1], n)
        y = a * X[:, 0] + 0.2 * rng.normal(size=n)
        return LabeledDataset(X, a, y, site)

    def test_row_indexed_lookup_off_sample_raises(self):
        rng = np.random.default_rng(16)
        nuis = crossfit_nuisances(self._data(rng))
        with pytest.raises(ValueError):
            nuis.mu(1, np.array([[123.456]]))

    def test_known_phi_passthrough(self):
        rng = np.random.default_rng(17)
        data = self._data(rng)
        nuis = crossfit_nuisances(data, phi=_phi_const(0.3))
        np.testing.assert_allclose(nuis.phi_at(1, data.covariates[:3]), 0.3)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(18)
        data = self._data(rng)
        a = crossfit_nuisances(data, seed=7).mu(1, data.covariates)
        b = crossfit_nuisances(data, seed=7).mu(1, data.covariates)
        np.testing.assert_array_equal(a, b)

    def test_evaluate_value_pipeline(self):
        rng = np.random.default_rng(19)
        data = self._data(rng, n=400)
        for tag in ("ipw", "aipw", "eff", "onlyx"):
            est = evaluate_value(data, ThresholdPolicy(0.0), tag, phi=_phi_const(0.5))
            assert np.isfinite(est.point) and est.estimator_tag == tag

    def test_evaluate_value_plugin_needs_inputs(self):
        rng = np.random.default_rng(20)
        data = self._data(rng)
        from policyshift.model import ConfigurationError
        with pytest.raises(ConfigurationError):
            evaluate_value(data, ThresholdPolicy(0.0), "plugin")
