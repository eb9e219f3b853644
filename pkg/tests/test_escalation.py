#!/usr/bin/env python3
"""
Tests for the 3+3 and CRM escalation designs and trial simulation
"""

from types import SimpleNamespace

import numpy as np
import pytest

from core.errors import InvalidArgumentError
from core.escalation.crm import DEFAULT_SKELETON, CrmConfig, closest_to_target, crm_next, crm_posterior
from core.escalation.three_plus_three import Decision, three_plus_three_step
from core.escalation.trial import PatientRecord, TrialDataset, TrialDesign, run_trial, simulate_patient
from core.inference.mcmc import SamplerOptions
from core.simulation.toxgen import ToxicityGround

FAST = SamplerOptions(n_chains=4, n_draws=2000, check_convergence=False)


def _counts(*levels):
    return [tuple(level) for level in levels]


class TestThreePlusThree:
    """Decision table of the 3+3 rule"""

    def test_untreated_level_gets_a_cohort(self):
        step = three_plus_three_step(_counts((0, 0), (0, 0)), 0)
        assert step.decision is Decision.STAY_EXPAND and step.next_index == 0

    def test_zero_of_three_escalates(self):
        step = three_plus_three_step(_counts((3, 0), (0, 0), (0, 0)), 0)
        assert step.decision is Decision.ESCALATE and step.next_index == 1

    def test_one_of_three_expands(self):
        step = three_plus_three_step(_counts((3, 1), (0, 0)), 0)
        assert step.decision is Decision.STAY_EXPAND and step.next_index == 0

    def test_one_of_six_escalates(self):
        step = three_plus_three_step(_counts((6, 1), (0, 0)), 0)
        assert step.decision is Decision.ESCALATE and step.next_index == 1

    def test_two_toxicities_at_lowest_level_stop(self):
        step = three_plus_three_step(_counts((3, 2), (0, 0)), 0)
        assert step.decision is Decision.DEESCALATE_OR_STOP
        assert step.finished and step.no_mtd and step.mtd_index is None

    def test_too_toxic_deescalates_to_three_treated(self):
        step = three_plus_three_step(_counts((3, 0), (3, 2), (0, 0)), 1)
        assert step.decision is Decision.DEESCALATE_OR_STOP and step.next_index == 0

    def test_too_toxic_declares_six_treated_lower_level(self):
        step = three_plus_three_step(_counts((6, 1), (6, 2), (0, 0)), 1)
        assert step.decision is Decision.DECLARE and step.mtd_index == 0
        assert step.finished and not step.no_mtd

    def test_acceptable_below_too_toxic_level_declares(self):
        step = three_plus_three_step(_counts((6, 0), (6, 3)), 0)
        assert step.decision is Decision.DECLARE and step.mtd_index == 0

    def test_acceptable_top_level_declares(self):
        step = three_plus_three_step(_counts((3, 0), (3, 0), (6, 1)), 2)
        assert step.decision is Decision.DECLARE and step.mtd_index == 2

    @pytest.mark.parametrize("counts,current", [
        (_counts((4, 0)), 0),
        (_counts((3, 4)), 0),
        (_counts((3, 0)), 1),
    ])
    def test_invalid_counts(self, counts, current):
        with pytest.raises(InvalidArgumentError):
            three_plus_three_step(counts, current)


class TestClosestToTarget:
    """Selection rule shared by the designs and the DRtox"""

    def test_picks_nearest(self):
        assert closest_to_target([0.1, 0.28, 0.45], 0.3) == 1

    def test_ties_go_to_lower_index(self):
        assert closest_to_target([0.2, 0.4], 0.3) == 0

    def test_allowed_subset(self):
        assert closest_to_target([0.1, 0.3, 0.5], 0.3, allowed=[0, 2]) == 0

    def test_empty_allowed_rejected(self):
        with pytest.raises(InvalidArgumentError):
            closest_to_target([0.1], 0.3, allowed=[])


class TestCrm:
    """Two-parameter CRM"""

    def test_dose_labels_reproduce_skeleton(self):
        from scipy.special import expit
        config = CrmConfig()
        np.testing.assert_allclose(expit(config.a_mean + config.dose_labels), DEFAULT_SKELETON)

    @pytest.mark.parametrize("kwargs", [
        {"skeleton": (0.1, 0.1)},
        {"skeleton": (0.0, 0.2)},
        {"target": 1.0},
        {"n_max": 31},
        {"a_sd": 0.0},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            CrmConfig(**kwargs)

    def test_prior_only_recommends_skeleton_target(self):
        nxt, posterior = crm_next([], CrmConfig(), 20000, np.random.default_rng(11), FAST)
        assert nxt == 3
        np.testing.assert_allclose(posterior.means, DEFAULT_SKELETON, atol=0.04)

    def test_no_skipping_above_highest_tried(self):
        data = [(0, 0), (0, 0), (0, 0)]
        nxt, _ = crm_next(data, CrmConfig(), 2000, np.random.default_rng(5), FAST)
        assert nxt <= 1

    def test_toxicities_pull_estimates_up(self):
        config = CrmConfig()
        quiet = crm_posterior([(2, 0)] * 6, config, 2000, np.random.default_rng(1), FAST)
        toxic = crm_posterior([(2, 1)] * 6, config, 2000, np.random.default_rng(1), FAST)
        assert toxic.means[2] > quiet.means[2]
        assert len(toxic.prob_means) == len(DEFAULT_SKELETON)

    def test_data_outside_skeleton_rejected(self):
        with pytest.raises(InvalidArgumentError):
            crm_posterior([(6, 0)], CrmConfig(), 200, np.random.default_rng(1), FAST)


class TestTrial:
    """End-to-end trial simulation"""

    def test_patient_record(self, short_panel, pop, ode, rng):
        ground = ToxicityGround(1e-6, 0.0)
        patient = simulate_patient(short_panel, 1, pop, ground, rng, ode, n_pd=3)
        assert patient.outcome.stop_index == 1
        assert patient.received.doses == short_panel[1].doses[:1]
        assert PatientRecord.from_dict(patient.to_dict()).received == patient.received

    def test_record_rejects_inconsistent_truncation(self, short_panel, pop, ode, rng):
        patient = simulate_patient(short_panel, 0, pop, ToxicityGround(1e-6, 0.0), rng, ode, n_pd=3)
        with pytest.raises(InvalidArgumentError):
            PatientRecord(0, patient.planned, patient.planned, patient.outcome, patient.observations)

    def test_three_plus_three_without_toxicity_reaches_top(self, short_panel, pop, ode, rng):
        dataset = run_trial(TrialDesign("3+3"), short_panel, pop, ToxicityGround(1e12), rng, ode, n_pd=2)
        assert dataset.recommended == 2 and not dataset.no_mtd
        assert dataset.sample_sizes() == [3, 3, 3]
        assert dataset.check_no_skipping()

    def test_three_plus_three_always_toxic_stops(self, short_panel, pop, ode, rng):
        dataset = run_trial(TrialDesign("3+3"), short_panel, pop, ToxicityGround(1e-9, 0.0), rng, ode, n_pd=2)
        assert dataset.no_mtd and dataset.recommended is None
        assert dataset.n == 3 and dataset.administered_set == [0]

    @pytest.mark.slow
    def test_crm_trial(self, short_panel, pop, ode, rng, temp_dir):
        config = CrmConfig(skeleton=(0.1, 0.3, 0.5), cohort_size=3, n_max=12)
        design = TrialDesign("crm", config, 1000, FAST)
        dataset = run_trial(design, short_panel, pop, ToxicityGround(1e12), rng, ode,
                            crm_rng=np.random.default_rng(4), n_pd=2)
        assert dataset.n == 12
        assert dataset.check_no_skipping()
        assert dataset.design_log[0].regimen_index == 0
        assert dataset.recommended in dataset.administered_set
        assert len(dataset.design_estimates) == 3

        restored = TrialDataset.load(dataset.save(temp_dir / "dataset.json"))
        assert restored.sample_sizes() == dataset.sample_sizes()
        assert restored.recommended == dataset.recommended
        assert restored.crm_data() == dataset.crm_data()

    @pytest.mark.slow
    def test_random_crm_trials_never_skip(self, six_panel, mocker):
        def fake_patient(panel, k, pop, curve, rng, settings, n_pd=6, cohort=0):
            return SimpleNamespace(regimen_index=k, outcome=SimpleNamespace(global_tox=int(rng.uniform() < curve[k])))

        mocker.patch("core.escalation.trial.simulate_patient", side_effect=fake_patient)
        design = TrialDesign("crm", CrmConfig(), 200, SamplerOptions(n_chains=2, n_draws=200, check_convergence=False))
        for trial in range(200):
            rng = np.random.default_rng(trial)
            curve = np.sort(rng.uniform(0.0, 0.8, len(six_panel)))
            dataset = run_trial(design, six_panel, None, curve, rng, crm_rng=np.random.default_rng(1000 + trial))
            assert dataset.n == 30
            assert dataset.check_no_skipping(), (trial, [e.regimen_index for e in dataset.design_log])
            assert dataset.recommended in dataset.administered_set

    def test_skeleton_length_must_match_panel(self, short_panel, pop, ode, rng):
        with pytest.raises(InvalidArgumentError):
            run_trial(TrialDesign("crm", CrmConfig()), short_panel, pop, ToxicityGround(1.0), rng, ode)

    def test_unknown_design(self):
        with pytest.raises(InvalidArgumentError):
            TrialDesign("bogus")
