#!/usr/bin/env python3
"""
CRM Design - Two-parameter logistic continual reassessment method
p_k = inverse-logit(a + b * x_k) with a ~ N(a_mean, a_sd^2) and
b ~ Gamma(b_shape, rate b_rate). Dose labels x_k are the skeleton
back-solved through the model at the prior means.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logit
from scipy.stats import gamma, norm

from core.errors import InvalidArgumentError
from core.inference.mcmc import SamplerOptions, sample

logger = logging.getLogger(__name__)

DEFAULT_SKELETON = (0.06, 0.12, 0.20, 0.30, 0.40, 0.50)


@dataclass(frozen=True)
class CrmConfig:
    skeleton: Tuple[float, ...] = DEFAULT_SKELETON
    target: float = 0.3
    cohort_size: int = 3
    n_max: int = 30
    a_mean: float = 0.0
    a_sd: float = 2.0
    b_shape: float = 5.0
    b_rate: float = 5.0

    def __post_init__(self):
        skeleton = tuple(float(p) for p in self.skeleton)
        object.__setattr__(self, "skeleton", skeleton)
        if not skeleton or any(not 0 < p < 1 for p in skeleton):
            raise InvalidArgumentError(f"Skeleton values must lie in (0, 1): {skeleton}")
        if any(b <= a for a, b in zip(skeleton, skeleton[1:])):
            raise InvalidArgumentError(f"Skeleton must be strictly increasing: {skeleton}")
        if not 0 < self.target < 1:
            raise InvalidArgumentError("CRM target must lie in (0, 1)")
        if self.cohort_size < 1 or self.n_max < self.cohort_size or self.n_max % self.cohort_size:
            raise InvalidArgumentError("n_max must be a positive multiple of cohort_size")
        if not (self.a_sd > 0 and self.b_shape > 0 and self.b_rate > 0):
            raise InvalidArgumentError("CRM prior scales must be positive")

    @property
    def dose_labels(self) -> np.ndarray:
        """x_k with inverse-logit(a_mean + b_mean * x_k) = skeleton_k"""
        b_mean = self.b_shape / self.b_rate
        return (logit(np.asarray(self.skeleton)) - self.a_mean) / b_mean


@dataclass
class CrmPosterior:
    draws: np.ndarray                    # (m_iter, 2) as (a, b)
    means: List[float]                   # model at the posterior-mean parameters
    prob_means: List[float]              # mean over draws of per-draw probabilities
    diagnostics: Dict[str, Any] = field(default_factory=dict)


def closest_to_target(values: Sequence[float], target: float, allowed: Optional[Sequence[int]] = None) -> int:
    """argmin_k |values_k - target| over allowed indices; ties go to the lower index"""
    candidates = sorted(set(allowed)) if allowed is not None else list(range(len(values)))
    if not candidates:
        raise InvalidArgumentError("No candidate regimen to select from")
    if candidates[0] < 0 or candidates[-1] >= len(values):
        raise InvalidArgumentError(f"Candidate indices outside 1..{len(values)}")
    # rounding keeps float noise from breaking exact ties
    return min(candidates, key=lambda k: (round(abs(values[k] - target), 12), k))


def crm_posterior(data: Sequence[Tuple[int, int]], config: CrmConfig, m_iter: int,
                  rng: np.random.Generator, options: Optional[SamplerOptions] = None) -> CrmPosterior:
    """Posterior of (a, b) from (0-based regimen index, global toxicity) pairs"""
    x = config.dose_labels
    idx = np.array([k for k, _ in data], dtype=int)
    y = np.array([t for _, t in data], dtype=float)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise InvalidArgumentError("CRM data refers to a regimen outside the skeleton")
    xi = x[idx]

    def log_target(theta: np.ndarray) -> np.ndarray:
        a, log_b = theta[:, :1], theta[:, 1:2]
        eta = a + np.exp(log_b) * xi[None, :]
        loglik = -(y * np.logaddexp(0.0, -eta) + (1.0 - y) * np.logaddexp(0.0, eta)).sum(axis=1)
        log_prior = (norm.logpdf(a[:, 0], config.a_mean, config.a_sd)
                     + gamma.logpdf(np.exp(log_b[:, 0]), config.b_shape, scale=1.0 / config.b_rate)
                     + log_b[:, 0])
        return log_prior + loglik

    opts = (options or SamplerOptions()).with_draws(m_iter)
    init = [config.a_mean, math.log(config.b_shape / config.b_rate)]
    chains = sample(log_target, init, rng, opts, names=("a", "log_b"))
    raw = chains.pooled(m_iter)
    draws = np.column_stack([raw[:, 0], np.exp(raw[:, 1])])

    a_bar, b_bar = draws.mean(axis=0)
    means = expit(a_bar + b_bar * x).tolist()
    prob_means = expit(draws[:, :1] + draws[:, 1:2] * x[None, :]).mean(axis=0).tolist()
    return CrmPosterior(draws, means, prob_means, chains.diagnostics)


def crm_next(data: Sequence[Tuple[int, int]], config: CrmConfig, m_iter: int, rng: np.random.Generator,
             options: Optional[SamplerOptions] = None) -> Tuple[int, CrmPosterior]:
    """Regimen for the next cohort; never more than one level above the highest tried"""
    posterior = crm_posterior(data, config, m_iter, rng, options)
    allowed = None
    if data:
        ceiling = min(max(k for k, _ in data) + 1, len(config.skeleton) - 1)
        allowed = range(ceiling + 1)
    nxt = closest_to_target(posterior.means, config.target, allowed)
    logger.debug(f"CRM estimates {np.round(posterior.means, 3).tolist()} -> regimen {nxt + 1}")
    return nxt, posterior
