#!/usr/bin/env python3
"""
Tests for ground-truth toxicity generation and threshold calibration
"""

import math

import numpy as np
import pytest
from scipy.stats import norm

from core.errors import CalibrationInfeasibleError, InvalidArgumentError
from core.simulation.pkpd import max_peak, cytokine_peaks
from core.simulation.regimen import DoseRegimen, RegimenPanel
from core.simulation.toxgen import (ToxicityGround, ToxicityOutcome, calibrate_threshold, panel_max_peaks,
                                    sample_max_peaks, simulate_toxicity, tox_prob_from_peaks, true_tox_curve,
                                    true_tox_prob)


class TestToxicityOutcome:
    """Outcome invariants"""

    def test_observed_with_toxicity(self):
        outcome = ToxicityOutcome.observed(2, 7)
        assert outcome.per_admin == (0, 1)
        assert outcome.stop_index == 2
        assert outcome.global_tox == 1

    def test_observed_without_toxicity(self):
        outcome = ToxicityOutcome.observed(None, 3)
        assert outcome.per_admin == (0, 0, 0)
        assert outcome.stop_index == 3 and outcome.global_tox == 0

    @pytest.mark.parametrize("per_admin,stop,glob", [
        ((1, 1), 2, 1),
        ((0, 1), 1, 1),
        ((0, 1), 2, 0),
        ((), 0, 0),
    ])
    def test_inconsistent_outcomes_rejected(self, per_admin, stop, glob):
        with pytest.raises(InvalidArgumentError):
            ToxicityOutcome(per_admin, stop, glob)

    def test_dict_round_trip(self):
        outcome = ToxicityOutcome.observed(4, 7)
        assert ToxicityOutcome.from_dict(outcome.to_dict()) == outcome
        assert outcome.to_dict()["global"] == 1


class TestSimulateToxicity:
    """Threshold rule on the scaled peaks"""

    def test_deterministic_threshold(self, rng):
        outcome = simulate_toxicity([10, 20], ToxicityGround(15.0, 0.0), rng)
        assert outcome.per_admin == (0, 1)
        assert outcome.stop_index == 2

    def test_threshold_never_reached(self, rng):
        outcome = simulate_toxicity([10, 20, 5], ToxicityGround(1e12, 0.25), rng)
        assert outcome.global_tox == 0
        assert outcome.stop_index == 3

    def test_boundary_counts_as_toxic(self, rng):
        assert simulate_toxicity([15.0], ToxicityGround(15.0, 0.0), rng).global_tox == 1

    def test_invalid_peaks(self, rng):
        ground = ToxicityGround(1.0)
        with pytest.raises(InvalidArgumentError):
            simulate_toxicity([], ground, rng)
        with pytest.raises(InvalidArgumentError):
            simulate_toxicity([1, -1], ground, rng)

    def test_invalid_ground(self):
        with pytest.raises(InvalidArgumentError):
            ToxicityGround(0.0)
        with pytest.raises(InvalidArgumentError):
            ToxicityGround(1.0, -0.1)

    @pytest.mark.slow
    def test_rate_matches_closed_form(self, rng):
        ground = ToxicityGround(100.0, 0.25)
        peaks = [60.0, 90.0, 80.0]
        n = 100000
        rate = np.mean([simulate_toxicity(peaks, ground, rng).global_tox for _ in range(n)])
        expected = norm.sf((math.log(100.0) - math.log(90.0)) / 0.25)
        se = math.sqrt(expected * (1 - expected) / n)
        assert abs(rate - expected) < 3 * se


class TestTrueToxicity:
    """Monte Carlo toxicity probabilities"""

    def test_prob_from_peaks_is_mean_survival(self):
        peaks = np.array([50.0, 100.0, 200.0])
        ground = ToxicityGround(100.0, 0.5)
        expected = np.mean(norm.sf((math.log(100.0) - np.log(peaks)) / 0.5))
        assert tox_prob_from_peaks(peaks, ground) == pytest.approx(expected)

    def test_zero_spread_counts_crossings(self):
        assert tox_prob_from_peaks(np.array([1.0, 2.0, 3.0, 4.0]), ToxicityGround(2.5, 0.0)) == 0.5

    def test_zero_peaks_never_toxic(self):
        assert tox_prob_from_peaks(np.zeros(3), ToxicityGround(1.0, 0.25)) == 0.0

    def test_extreme_thresholds(self, pop, ode, rng):
        regimen = DoseRegimen.from_days((5, 10), (1, 5))
        assert true_tox_prob(regimen, pop, ToxicityGround(1e-9, 0.25), 20, rng, ode) == pytest.approx(1.0)
        assert true_tox_prob(regimen, pop, ToxicityGround(1e15, 0.25), 20, rng, ode) == pytest.approx(0.0)

    def test_needs_draws(self, pop, ode, rng):
        with pytest.raises(InvalidArgumentError):
            sample_max_peaks(DoseRegimen((1,), (0,)), pop, 0, rng, ode)

    @pytest.mark.slow
    def test_agrees_with_simulated_rates(self, pop, ode):
        regimen = DoseRegimen.from_days((5, 10), (1, 5))
        n = 2000
        peaks_rng = np.random.default_rng(7)
        typical = max_peak(cytokine_peaks(pop.typical(), regimen, ode))
        ground = ToxicityGround(typical, 0.25)
        peaks = sample_max_peaks(regimen, pop, n, peaks_rng, ode)
        p = tox_prob_from_peaks(peaks, ground)

        tox_rng = np.random.default_rng(8)
        events = [simulate_toxicity([r], ground, tox_rng).global_tox for r in peaks]
        se = math.sqrt(p * (1 - p) / n)
        assert abs(np.mean(events) - p) < 3 * se

    def test_curve_uses_common_draws(self, pop, ode, short_panel):
        peaks = panel_max_peaks(short_panel, pop, 30, np.random.default_rng(3), ode)
        assert len(peaks) == 3 and all(p.shape == (30,) for p in peaks)
        ground = ToxicityGround(float(np.median(peaks[1])), 0.25)
        curve = true_tox_curve(short_panel, pop, ground, 30, np.random.default_rng(3), ode)
        assert curve == [tox_prob_from_peaks(p, ground) for p in peaks]


class TestCalibration:
    """Threshold calibration on the target regimen"""

    def test_single_regimen(self, pop, ode, rng):
        panel = RegimenPanel.of([DoseRegimen.from_days((5, 10), (1, 5))])
        result = calibrate_threshold(panel, pop, 0.25, 0, 0.3, 300, rng, ode)
        assert result.true_curve[0] == pytest.approx(0.3, abs=1e-6)
        assert result.ground.tau_t == result.tau_t
        assert result.to_dict()["target_index"] == 1

    def test_target_becomes_mtd(self, pop, ode, short_panel, rng):
        result = calibrate_threshold(short_panel, pop, 0.25, 1, 0.3, 200, rng, ode)
        assert result.true_curve[1] == pytest.approx(0.3, abs=1e-6)
        distances = [abs(p - 0.3) for p in result.true_curve]
        assert int(np.argmin(distances)) == 1

    def test_identical_regimens_cannot_separate(self, pop, ode, rng):
        regimen = DoseRegimen.from_days((5, 10), (1, 5))
        panel = RegimenPanel.of([regimen, DoseRegimen(regimen.doses, regimen.times, "copy")])
        with pytest.raises(CalibrationInfeasibleError) as exc:
            calibrate_threshold(panel, pop, 0.25, 1, 0.3, 100, rng, ode)
        assert exc.value.achievable == [1]

    def test_invalid_target(self, pop, ode, short_panel, rng):
        with pytest.raises(InvalidArgumentError):
            calibrate_threshold(short_panel, pop, 0.25, 3, 0.3, 10, rng, ode)
        with pytest.raises(InvalidArgumentError):
            calibrate_threshold(short_panel, pop, 0.25, 0, 1.2, 10, rng, ode)
