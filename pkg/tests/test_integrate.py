#!/usr/bin/env python3
"""
Tests for posterior toxicity curves, MTD selection and new-regimen prediction
"""

import numpy as np
import pytest
from scipy.special import expit

from core.errors import InvalidArgumentError
from core.inference.drtox import (HierarchicalModel, HierarchicalPrior, LogisticModel, LogisticPrior,
                                  PosteriorDraws)
from core.inference.integrate import (PosteriorToxicity, curve_frame, posterior_tox_curve, predict_new_regimen,
                                      predict_peak_distribution, select_mtd, write_curve_csv)
from core.inference.nlme import NlmeFit
from core.simulation.regimen import DoseRegimen

LOGISTIC = LogisticModel(LogisticPrior(-0.85, 2.0, 5.0, 1.0, 1, 100.0))


def _draws(*rows):
    return PosteriorDraws("logistic", ("beta0", "beta1"), np.array(rows, dtype=float))


def _curve(*means):
    return [PosteriorToxicity(f"S{k + 1}", m, (m, m), 1) for k, m in enumerate(means)]


class TestPosteriorCurve:

    def test_cross_product_average(self):
        draws = _draws((0.0, 1.0), (1.0, 2.0))
        peaks = np.array([50.0, 200.0])
        curve = posterior_tox_curve(draws, LOGISTIC, [peaks])
        x = np.log(peaks / 100.0)
        expected = np.mean([expit(b0 + b1 * x) for b0, b1 in draws.params])
        assert curve[0].mean == pytest.approx(expected)
        assert curve[0].n_draws == 4
        assert curve[0].label == "S1"
        lo, hi = curve[0].credible_interval
        assert lo <= curve[0].mean <= hi

    def test_single_draw_single_peak(self):
        curve = posterior_tox_curve(_draws((0.5, 1.0)), LOGISTIC, [np.array([100.0])], ["ref"], keep_draws=False)
        assert curve[0].mean == pytest.approx(expit(0.5))
        assert curve[0].credible_interval == pytest.approx((expit(0.5), expit(0.5)))
        assert curve[0].draws is None

    def test_curve_increases_with_peaks(self):
        draws = _draws((-0.85, 1.0), (-0.5, 1.5), (-1.0, 0.8))
        samples = [np.array([40.0, 60.0]), np.array([90.0, 110.0]), np.array([150.0, 250.0])]
        means = [c.mean for c in posterior_tox_curve(draws, LOGISTIC, samples)]
        assert means == sorted(means)

    def test_hierarchical_model(self):
        model = HierarchicalModel(HierarchicalPrior(2.0, 1.0, 0, 100.0))
        draws = PosteriorDraws("hierarchical", ("mu_z", "tau_z"), np.array([[0.0, 1.0]]))
        curve = posterior_tox_curve(draws, model, [np.array([100.0])])
        assert curve[0].mean == pytest.approx(0.5)

    def test_invalid_inputs(self):
        with pytest.raises(InvalidArgumentError):
            posterior_tox_curve(_draws(*np.zeros((0, 2))), LOGISTIC, [np.array([1.0])])
        with pytest.raises(InvalidArgumentError):
            posterior_tox_curve(_draws((0.0, 1.0)), LOGISTIC, [np.array([])])
        with pytest.raises(InvalidArgumentError):
            posterior_tox_curve(_draws((0.0, 1.0)), LOGISTIC, [np.array([0.0, 1.0])])


class TestSelectMtd:
    """Selection restricted to administered regimens"""

    def test_closest_administered(self):
        assert select_mtd(_curve(0.1, 0.25, 0.32, 0.5), [0, 1, 2, 3], 0.3) == 2

    def test_untested_regimen_not_selected(self):
        assert select_mtd(_curve(0.1, 0.2, 0.3, 0.5), [0, 1], 0.3) == 1

    def test_ties_go_low(self):
        assert select_mtd(_curve(0.2, 0.4), [0, 1], 0.3) == 0

    def test_nothing_administered(self):
        with pytest.raises(InvalidArgumentError):
            select_mtd(_curve(0.3), [], 0.3)


class TestPrediction:

    def test_peak_distribution_from_fit_or_population(self, pop_fixed, ode):
        regimen = DoseRegimen.from_days((5, 10), (1, 5), "S_new")
        fit = NlmeFit(pop_fixed, [], True)
        from_fit = predict_peak_distribution(fit, regimen, 3, np.random.default_rng(1), ode)
        from_pop = predict_peak_distribution(pop_fixed, regimen, 3, np.random.default_rng(1), ode)
        np.testing.assert_array_equal(from_fit, from_pop)
        assert np.all(from_fit == from_fit[0])

    def test_needs_draws(self, pop, ode):
        with pytest.raises(InvalidArgumentError):
            predict_peak_distribution(pop, DoseRegimen((5,), (0,)), 0, np.random.default_rng(1), ode)

    def test_new_regimen_between_neighbors(self, pop_fixed, ode):
        draws = _draws((-0.85, 1.5), (-0.6, 1.2))
        regimens = [DoseRegimen.from_days((d,), (1,)) for d in (5, 20)]
        new = DoseRegimen.from_days((10,), (1,), "S_new")
        neighbours = [predict_new_regimen(pop_fixed, draws, LOGISTIC, r, 2, np.random.default_rng(2), ode).mean
                      for r in regimens]
        predicted = predict_new_regimen(pop_fixed, draws, LOGISTIC, new, 2, np.random.default_rng(2), ode)
        assert predicted.label == "S_new"
        assert neighbours[0] < predicted.mean < neighbours[1]


class TestCurveFrame:

    def test_columns_and_flags(self, temp_dir):
        curve = _curve(0.1, 0.3, 0.6)
        frame = curve_frame(curve, [0, 1], selected=1)
        assert list(frame.columns) == ["regimen", "p_hat", "ci_low", "ci_high", "administered", "selected"]
        assert frame["administered"].tolist() == [True, True, False]
        assert frame["selected"].tolist() == [False, True, False]

        path = write_curve_csv(temp_dir / "nested" / "curve.csv", curve, [0], 0)
        assert path.read_text().splitlines()[0] == "regimen,p_hat,ci_low,ci_high,administered,selected"
