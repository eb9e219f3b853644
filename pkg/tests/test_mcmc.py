#!/usr/bin/env python3
"""
Tests for the adaptive Metropolis sampler and its diagnostics
"""

import numpy as np
import pytest

from core.errors import DiagnosticsError, InvalidArgumentError
from core.inference.mcmc import SamplerOptions, effective_draws, sample, split_rhat

MEAN = np.array([1.0, -2.0])
SD = np.array([0.5, 2.0])


def gaussian(theta):
    return -0.5 * (((theta - MEAN) / SD) ** 2).sum(axis=1)


class TestSamplerOptions:

    def test_defaults(self):
        options = SamplerOptions()
        assert options.draws_per_chain == 1000
        assert options.warmup_per_chain == 1000

    def test_with_draws_copies(self):
        options = SamplerOptions(n_chains=2)
        updated = options.with_draws(10)
        assert updated.n_draws == 10 and updated.n_chains == 2
        assert options.n_draws == 4000

    @pytest.mark.parametrize("kwargs", [
        {"n_chains": 0},
        {"n_chains": 4, "n_draws": 3},
        {"thin": 0},
        {"target_acceptance": 1.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            SamplerOptions(**kwargs)


class TestDiagnostics:

    def test_rhat_of_mixed_chains_near_one(self):
        chains = np.random.default_rng(1).standard_normal((4, 2000))
        assert split_rhat(chains) == pytest.approx(1.0, abs=0.01)

    def test_rhat_flags_separated_chains(self):
        chains = np.random.default_rng(1).standard_normal((4, 500))
        chains[0] += 5.0
        assert split_rhat(chains) > 1.5

    def test_rhat_of_short_chains_is_nan(self):
        assert np.isnan(split_rhat(np.zeros((2, 3))))

    def test_independent_draws_have_full_ess(self):
        chains = np.random.default_rng(2).standard_normal((4, 1000))
        assert effective_draws(chains) == pytest.approx(4000, rel=0.15)

    def test_autocorrelated_draws_lose_ess(self):
        rng = np.random.default_rng(3)
        chains = np.empty((4, 2000))
        chains[:, 0] = rng.standard_normal(4)
        for t in range(1, 2000):
            chains[:, t] = 0.9 * chains[:, t - 1] + rng.standard_normal(4)
        # AR(1) with rho = 0.9 keeps about (1 - rho) / (1 + rho) of the draws
        assert effective_draws(chains) == pytest.approx(8000 * 0.1 / 1.9, rel=0.35)


class TestSample:

    def test_recovers_gaussian_moments(self):
        result = sample(gaussian, [0.0, 0.0], np.random.default_rng(4), SamplerOptions(n_draws=8000))
        pooled = result.pooled()
        assert pooled.shape == (8000, 2)
        np.testing.assert_allclose(pooled.mean(axis=0), MEAN, atol=0.25 * SD)
        np.testing.assert_allclose(pooled.std(axis=0), SD, rtol=0.15)
        assert all(r < 1.05 for r in result.rhat.values())
        assert all(0.1 < a < 0.6 for a in result.acceptance)

    def test_deterministic_for_seed(self):
        options = SamplerOptions(n_draws=400, check_convergence=False)
        first = sample(gaussian, [0.0, 0.0], np.random.default_rng(9), options)
        second = sample(gaussian, [0.0, 0.0], np.random.default_rng(9), options)
        np.testing.assert_array_equal(first.samples, second.samples)

    def test_pooled_truncates(self):
        options = SamplerOptions(n_draws=401, check_convergence=False)
        result = sample(gaussian, [0.0, 0.0], np.random.default_rng(9), options, names=("a", "b"))
        assert result.samples.shape == (4, 101, 2)
        assert result.pooled(401).shape == (401, 2)
        assert set(result.diagnostics) == {"rhat", "ess", "acceptance"}
        assert set(result.rhat) == {"a", "b"}

    def test_respects_support(self):
        def positive(theta):
            return np.where(theta[:, 0] > 0, -theta[:, 0], -np.inf)

        options = SamplerOptions(n_draws=2000, check_convergence=False)
        result = sample(positive, [1.0], np.random.default_rng(5), options)
        assert np.all(result.pooled() > 0)

    def test_infinite_initial_point(self):
        def nowhere(theta):
            return np.full(theta.shape[0], -np.inf)

        with pytest.raises(DiagnosticsError):
            sample(nowhere, [0.0], np.random.default_rng(1), SamplerOptions(n_draws=40))

    def test_unconverged_chains_raise(self, mocker):
        mocker.patch("core.inference.mcmc.split_rhat", return_value=1.3)
        with pytest.raises(DiagnosticsError) as exc:
            sample(gaussian, [0.0, 0.0], np.random.default_rng(2), SamplerOptions(n_draws=400))
        assert exc.value.stats["rhat"] == {"x0": 1.3, "x1": 1.3}

    def test_convergence_check_can_be_disabled(self, mocker):
        mocker.patch("core.inference.mcmc.split_rhat", return_value=1.3)
        options = SamplerOptions(n_draws=400, check_convergence=False)
        assert sample(gaussian, [0.0, 0.0], np.random.default_rng(2), options).rhat["x0"] == 1.3
