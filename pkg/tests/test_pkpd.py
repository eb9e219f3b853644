#!/usr/bin/env python3
"""
Tests for the PK/PD simulation layer
"""

import math

import numpy as np
import pytest

from core.errors import InvalidArgumentError
from core.simulation.pkpd import (PARAM_NAMES, TABLE1_CV, IndividualParams, OdeSettings, PkParams, SampleTimes,
                                  PopulationParams, concentration, cv_to_omega, cytokine_peaks, max_peak,
                                  model_at, observe_with_error, reference_peaks, sample_individual,
                                  sample_individuals, sampling_schedule, simulate_pd)
from core.simulation.regimen import DoseRegimen, RegimenPanel


class TestParameters:
    """Parameter containers and the population"""

    def test_cv_to_omega(self):
        assert cv_to_omega(0.0) == 0.0
        assert cv_to_omega(41.9) == pytest.approx(math.sqrt(math.log(1 + 0.419 ** 2)))

    def test_table1_variances(self, pop):
        omega = dict(zip(PARAM_NAMES, pop.omega))
        for name in ("v", "ec50", "h", "imax", "ic50"):
            assert omega[name] == 0.0
        assert omega["cl"] == pytest.approx(cv_to_omega(TABLE1_CV["cl"]) ** 2)
        assert pop.random_components == [PARAM_NAMES.index(n) for n in ("cl", "emax", "kdeg", "kprime")]

    def test_vector_round_trip(self, pop):
        theta = pop.typical()
        assert IndividualParams.from_vector(theta.as_vector()) == theta
        assert IndividualParams.from_dict(theta.to_dict()) == theta

    def test_imax_must_stay_below_one(self):
        with pytest.raises(InvalidArgumentError):
            PopulationParams.table1(imax=1.0)

    def test_negative_omega_rejected(self, pop):
        with pytest.raises(InvalidArgumentError):
            pop.with_updates(omega=[-0.1] + list(pop.omega[1:]))

    def test_population_dict_round_trip(self, pop):
        assert PopulationParams.from_dict(pop.to_dict()) == pop

    def test_tolerances_halved(self, ode):
        halved = ode.halved()
        assert halved.rtol == ode.rtol / 2 and halved.atol == ode.atol / 2

    def test_grid_resolution_floor(self):
        with pytest.raises(InvalidArgumentError):
            OdeSettings(points_per_window=100)


class TestConcentration:
    """Closed-form one-compartment infusion"""

    def test_end_of_first_infusion(self):
        pk = PkParams(1.36, 3.4)
        regimen = DoseRegimen((25,), (0,))
        expected = 437.5 / 1.36 * (1 - math.exp(-0.4 * 4))
        assert concentration(pk, regimen, 70.0, 4.0, 4.0) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(256.7, abs=0.1)

    def test_zero_before_first_dose_and_after_elimination(self):
        pk = PkParams(1.36, 3.4)
        regimen = DoseRegimen((25,), (24,))
        assert concentration(pk, regimen, 70.0, 4.0, 10.0) == 0.0
        assert concentration(pk, regimen, 70.0, 4.0, 1e4) == pytest.approx(0.0, abs=1e-12)

    def test_superposition(self, stepped):
        pk = PkParams(1.36, 3.4)
        t = np.linspace(0, 700, 500)
        total = concentration(pk, stepped, 70.0, 4.0, t)
        singles = sum(concentration(pk, DoseRegimen((d,), (s,)), 70.0, 4.0, t)
                      for d, s in zip(stepped.doses, stepped.times))
        np.testing.assert_allclose(total, singles, rtol=1e-12, atol=1e-12)

    def test_tail_agrees_from_fourth_administration(self, stepped, flat, pop):
        pk = pop.typical().pk
        t = np.linspace(stepped.times[3], stepped.times[-1] + 96, 400)
        np.testing.assert_allclose(concentration(pk, stepped, 70.0, 4.0, t),
                                   concentration(pk, flat, 70.0, 4.0, t), rtol=1e-6, atol=1e-9)

    def test_negative_time_rejected(self):
        with pytest.raises(InvalidArgumentError):
            concentration(PkParams(1.36, 3.4), DoseRegimen((1,), (0,)), 70.0, 4.0, -1.0)


class TestCytokine:
    """Cytokine ODE and peak extraction"""

    def test_no_release_without_emax(self, ode, stepped):
        theta = PopulationParams.table1(emax=0.0).typical()
        profile = simulate_pd(theta, stepped, ode)
        assert np.all(profile.cytokine == 0)
        assert cytokine_peaks(theta, stepped, ode) == [0.0] * len(stepped)

    def test_placebo_has_no_peaks(self, ode, pop):
        placebo = DoseRegimen((0, 0), (0, 96))
        assert cytokine_peaks(pop.typical(), placebo, ode) == [0.0, 0.0]

    def test_profile_invariants(self, ode, pop, stepped):
        profile = simulate_pd(pop.typical(), stepped, ode)
        assert len(profile.grid) == len(profile.cytokine) == len(profile.auc_e) == len(profile.conc)
        assert np.all(profile.cytokine >= 0)
        assert np.all(np.diff(profile.auc_e) >= 0)
        assert profile.grid[-1] == pytest.approx(stepped.times[-1] + ode.horizon_hours)

    def test_global_maximum_matches_max_peak(self, ode, pop, stepped):
        theta = pop.typical()
        profile = simulate_pd(theta, stepped, ode)
        peaks = cytokine_peaks(theta, stepped, ode)
        assert max_peak(peaks) >= profile.cytokine.max()
        assert max_peak(peaks) == pytest.approx(profile.cytokine.max(), rel=1e-3)

    def test_priming_mitigates_stepped_regimen(self, ode, pop, stepped, flat):
        theta = pop.typical()
        stepped_peaks = cytokine_peaks(theta, stepped, ode)
        flat_peaks = cytokine_peaks(theta, flat, ode)
        assert max_peak(stepped_peaks) < max_peak(flat_peaks)
        assert int(np.argmax(flat_peaks)) == 0
        assert max_peak(flat_peaks) == flat_peaks[0]

    def test_tolerance_halving_is_stable(self, ode, pop, flat):
        theta = pop.typical()
        base = np.array(cytokine_peaks(theta, flat, ode))
        tight = np.array(cytokine_peaks(theta, flat, ode.halved()))
        np.testing.assert_allclose(base, tight, rtol=1e-3)

    def test_profile_csv(self, ode, pop, temp_dir):
        regimen = DoseRegimen((5,), (0,))
        path = simulate_pd(pop.typical(), regimen, ode).write_csv(temp_dir / "profile.csv")
        header = path.read_text().splitlines()[0]
        assert header == "time_h,conc_ng_ml,cytokine_pg_ml,auc_e"

    def test_max_peak(self):
        assert max_peak([3, 7, 2]) == 7
        assert max_peak([5]) == 5
        with pytest.raises(InvalidArgumentError):
            max_peak([])


class TestSampling:
    """Random effects and residual error"""

    def test_fixed_population_returns_mu(self, pop_fixed, rng):
        theta = sample_individual(pop_fixed, rng)
        np.testing.assert_array_equal(theta.as_vector(), pop_fixed.mu_array)

    def test_log_parameters_center_on_mu(self, pop, rng):
        thetas = np.array([t.as_vector() for t in sample_individuals(pop, 20000, rng)])
        i = PARAM_NAMES.index("cl")
        sd = math.sqrt(pop.omega[i])
        assert np.log(thetas[:, i]).mean() == pytest.approx(math.log(pop.mu[i]), abs=4 * sd / math.sqrt(20000))
        assert np.log(thetas[:, i]).std() == pytest.approx(sd, rel=0.03)
        np.testing.assert_array_equal(thetas[:, PARAM_NAMES.index("v")], pop.mu[PARAM_NAMES.index("v")])

    def test_no_noise_observations_equal_model(self, ode, pop, stepped, rng):
        profile = simulate_pd(pop.typical(), stepped, ode)
        times = sampling_schedule(stepped, ode)
        noiseless = PopulationParams(pop.mu, pop.omega, 0.0, 0.0)
        obs = observe_with_error(profile, times, noiseless, rng)
        conc, cyt = model_at(profile, times)
        np.testing.assert_array_equal(obs.pk_values, conc)
        np.testing.assert_array_equal(obs.pd_values, cyt)
        assert obs.n_obs == 2 * len(stepped) + 6 * len(stepped)

    def test_proportional_error_spread(self, ode, pop, rng):
        regimen = DoseRegimen((10,), (0,))
        profile = simulate_pd(pop.typical(), regimen, ode)
        times = sampling_schedule(regimen, ode, n_pd=6)
        conc, _ = model_at(profile, times)
        ratios = np.concatenate([observe_with_error(profile, times, pop, rng).pk_values / conc - 1
                                 for _ in range(5000)])
        assert ratios.std() == pytest.approx(0.1, abs=0.003)

    def test_sample_times_outside_grid_rejected(self, ode, pop):
        regimen = DoseRegimen((10,), (0,))
        profile = simulate_pd(pop.typical(), regimen, ode)
        with pytest.raises(InvalidArgumentError):
            model_at(profile, SampleTimes((1e4,), ()))


class TestReferencePeaks:
    """Population reference peaks"""

    def test_deterministic_and_monotone(self, ode, pop, six_panel):
        refs = reference_peaks(pop, six_panel, ode)
        assert refs == reference_peaks(pop, six_panel, ode)
        assert all(b > a for a, b in zip(refs, refs[1:]))

    def test_placebo_reference_is_zero(self, ode, pop):
        panel = RegimenPanel.of([DoseRegimen((0,), (0,))])
        assert reference_peaks(pop, panel, ode) == [0.0]
