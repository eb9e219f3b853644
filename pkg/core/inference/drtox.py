#!/usr/bin/env python3
"""
DRtox Models - PD endpoint to toxicity
Logistic model on the log of the highest peak, and a hierarchical model
where each patient has a latent log-threshold Z_i ~ N(mu_z, tau_z^2) that is
integrated out analytically. Includes prior calibration from initial
toxicity guesses, posterior sampling and the approximate prior ESS.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from scipy.special import expit, log_ndtr, logit, ndtr
from scipy.stats import gamma, norm

from core.errors import (CalibrationDegenerateError, EssInfeasibleError, InvalidArgumentError,
                         ModelInconsistencyError)
from core.inference.mcmc import SamplerOptions, sample
from core.simulation.toxgen import ToxicityOutcome

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


# ========================================================================
#                               Data types
# ========================================================================

@dataclass(frozen=True)
class PatientEndpoint:
    """Predicted peaks of one patient together with the observed outcome"""
    peaks: Tuple[float, ...]
    outcome: ToxicityOutcome
    planned_peaks: Optional[Tuple[float, ...]] = None

    def r_max(self, use_planned: bool = False) -> float:
        if use_planned and self.planned_peaks is not None and self.outcome.stop_index < len(self.planned_peaks):
            return float(max(self.planned_peaks))
        return float(max(self.peaks))

    def to_dict(self) -> Dict[str, Any]:
        return {"peaks": list(self.peaks), "outcome": self.outcome.to_dict(),
                "planned_peaks": list(self.planned_peaks) if self.planned_peaks is not None else None}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PatientEndpoint":
        planned = data.get("planned_peaks")
        return cls(tuple(data["peaks"]), ToxicityOutcome.from_dict(data["outcome"]),
                   tuple(planned) if planned is not None else None)


@dataclass(frozen=True)
class LogisticPrior:
    beta0_mean: float
    beta0_sd: float
    beta1_shape: float
    beta1_mean: float
    ref_index_kT: int
    ref_peak: float

    def __post_init__(self):
        if not (self.beta0_sd > 0 and self.beta1_shape > 0 and self.beta1_mean > 0 and self.ref_peak > 0):
            raise InvalidArgumentError(f"Invalid logistic prior: {self}")

    @property
    def beta1_rate(self) -> float:
        return self.beta1_shape / self.beta1_mean

    def to_dict(self) -> Dict[str, Any]:
        return {"beta0_mean": self.beta0_mean, "beta0_sd": self.beta0_sd, "beta1_shape": self.beta1_shape,
                "beta1_mean": self.beta1_mean, "ref_index_kT": self.ref_index_kT + 1, "ref_peak": self.ref_peak}


@dataclass(frozen=True)
class HierarchicalPrior:
    mu_z_sd: float
    tau_z_scale: float
    ref_index_k50: int
    ref_peak: float

    def __post_init__(self):
        if not (self.mu_z_sd > 0 and self.tau_z_scale > 0 and self.ref_peak > 0):
            raise InvalidArgumentError(f"Invalid hierarchical prior: {self}")

    def to_dict(self) -> Dict[str, Any]:
        return {"mu_z_sd": self.mu_z_sd, "tau_z_scale": self.tau_z_scale,
                "ref_index_k50": self.ref_index_k50 + 1, "ref_peak": self.ref_peak}


@dataclass
class PosteriorDraws:
    model: str
    names: Tuple[str, str]
    params: np.ndarray                       # (m_iter, 2), constrained scale
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.params.shape[0])

    def mean(self) -> Dict[str, float]:
        return dict(zip(self.names, self.params.mean(axis=0).tolist()))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.params, columns=list(self.names))
        frame.insert(0, "draw", np.arange(1, len(self) + 1))
        return frame

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.10g")
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path], model: str) -> "PosteriorDraws":
        frame = pd.read_csv(path)
        names = tuple(c for c in frame.columns if c != "draw")
        if len(names) != 2:
            raise InvalidArgumentError(f"{path}: expected two parameter columns, got {list(names)}")
        return cls(model, names, frame[list(names)].to_numpy(dtype=float))


def _check_peak(r_m: ArrayLike, ref_peak: float) -> Tuple[np.ndarray, float]:
    r = np.asarray(r_m, dtype=float)
    if np.any(~(r > 0)) or not ref_peak > 0:
        raise InvalidArgumentError("Peaks and reference peak must be positive")
    return r, float(ref_peak)


# ========================================================================
#                              Logistic-DRtox
# ========================================================================

def logistic_prob(params: Tuple[ArrayLike, ArrayLike], r_m: ArrayLike, ref_peak: float) -> ArrayLike:
    """inverse-logit(beta0 + beta1 * log(r_m / ref_peak))"""
    r, ref = _check_peak(r_m, ref_peak)
    beta0, beta1 = params
    out = expit(np.asarray(beta0) + np.asarray(beta1) * np.log(r / ref))
    return float(out) if np.ndim(out) == 0 else out


def _slope_sse(beta1: float, beta0: float, guesses: np.ndarray, log_ratios: np.ndarray) -> float:
    return float(np.sum((guesses - expit(beta0 + beta1 * log_ratios)) ** 2))


def calibrate_logistic_prior(initial_guesses: Sequence[float], ref_peaks: Sequence[float], k_t: int,
                             delta_t: float, beta0_sd: float = 2.0, beta1_shape: float = 5.0,
                             mode: str = "neighbors", single_index: Optional[int] = None,
                             slope_bounds: Tuple[float, float] = (1e-6, 100.0)) -> LogisticPrior:
    """Prior means from initial guesses; k_t is the 0-based reference regimen"""
    p = np.asarray(initial_guesses, dtype=float)
    refs = np.asarray(ref_peaks, dtype=float)
    if p.shape != refs.shape or not 0 <= k_t < p.size:
        raise InvalidArgumentError("Guesses and reference peaks must align and contain k_t")
    if np.any((p <= 0) | (p >= 1)) or np.any(refs <= 0):
        raise InvalidArgumentError("Guesses must lie in (0, 1) and reference peaks be positive")
    if not math.isclose(p[k_t], delta_t, abs_tol=1e-9):
        raise InvalidArgumentError(f"Guess at the reference regimen ({p[k_t]}) must equal delta_t ({delta_t})")

    beta0 = float(logit(delta_t))
    log_ratios = np.log(refs / refs[k_t])

    if mode == "single":
        k = single_index if single_index is not None else (k_t + 1 if k_t + 1 < p.size else k_t - 1)
        if not 0 <= k < p.size or k == k_t:
            raise InvalidArgumentError(f"Single-mode regimen {k + 1} must differ from k_t")
        if log_ratios[k] == 0:
            raise CalibrationDegenerateError("Reference peaks are equal at distinct regimens")
        beta1 = (float(logit(p[k])) - beta0) / log_ratios[k]
        if not beta1 > 0:
            raise CalibrationDegenerateError(f"Calibrated slope {beta1:.4g} is not positive")
    elif mode == "neighbors":
        ks = [k for k in (k_t - 1, k_t, k_t + 1) if 0 <= k < p.size]
        if len(ks) < 3:
            logger.warning(f"Reference regimen {k_t + 1} is at the panel boundary; "
                           f"calibrating on regimens {[k + 1 for k in ks]}")
        others = [k for k in ks if k != k_t]
        if not others or any(log_ratios[k] == 0 for k in others):
            raise CalibrationDegenerateError("Reference peaks are equal at distinct regimens")
        g, x = p[ks], log_ratios[ks]

        # coarse log-spaced scan brackets the global minimum, Brent refines it
        lo, hi = slope_bounds
        scan = np.geomspace(lo, hi, 4001)
        sse = np.array([_slope_sse(b, beta0, g, x) for b in scan])
        i = int(np.argmin(sse))
        a, b = scan[max(i - 1, 0)], scan[min(i + 1, scan.size - 1)]
        res = minimize_scalar(_slope_sse, bounds=(a, b), args=(beta0, g, x), method="bounded",
                              options={"xatol": 1e-12})
        beta1 = float(res.x) if res.fun <= sse[i] else float(scan[i])
    else:
        raise InvalidArgumentError(f"Unknown calibration mode '{mode}'")

    return LogisticPrior(beta0, beta0_sd, beta1_shape, beta1, k_t, float(refs[k_t]))


def _logistic_log_prior(theta: np.ndarray, prior: LogisticPrior) -> np.ndarray:
    beta0, log_beta1 = theta[:, 0], theta[:, 1]
    beta1 = np.exp(log_beta1)
    return (norm.logpdf(beta0, prior.beta0_mean, prior.beta0_sd)
            + gamma.logpdf(beta1, prior.beta1_shape, scale=1.0 / prior.beta1_rate)
            + log_beta1)


def logistic_posterior(endpoints: Sequence[PatientEndpoint], prior: LogisticPrior, m_iter: int,
                       rng: np.random.Generator, options: Optional[SamplerOptions] = None,
                       use_planned: bool = False) -> PosteriorDraws:
    """Sample (beta0, beta1) given global toxicities and highest predicted peaks"""
    y = np.array([e.outcome.global_tox for e in endpoints], dtype=float)
    r = np.array([e.r_max(use_planned) for e in endpoints], dtype=float)
    if r.size:
        _check_peak(r, prior.ref_peak)
    x = np.log(r / prior.ref_peak) if r.size else np.zeros(0)

    def log_target(theta: np.ndarray) -> np.ndarray:
        eta = theta[:, :1] + np.exp(theta[:, 1:2]) * x[None, :]
        loglik = -(y * np.logaddexp(0.0, -eta) + (1.0 - y) * np.logaddexp(0.0, eta)).sum(axis=1)
        return _logistic_log_prior(theta, prior) + loglik

    options = _options_for(options, m_iter)
    init = [prior.beta0_mean, math.log(prior.beta1_mean)]
    chains = sample(log_target, init, rng, options, names=("beta0", "log_beta1"))
    raw = chains.pooled(m_iter)
    params = np.column_stack([raw[:, 0], np.exp(raw[:, 1])])
    return PosteriorDraws("logistic", ("beta0", "beta1"), params, chains.diagnostics)


def _options_for(options: Optional[SamplerOptions], m_iter: int) -> SamplerOptions:
    return (options or SamplerOptions()).with_draws(m_iter)


# ========================================================================
#                            Hierarchical-DRtox
# ========================================================================

def _z_interval(peaks: Sequence[float], outcome: ToxicityOutcome, ref_peak: float) -> Tuple[float, float]:
    """Latent threshold interval (a, b] implied by an outcome"""
    r, ref = _check_peak(peaks, ref_peak)
    u = np.log(r / ref)
    if len(u) < outcome.stop_index:
        raise InvalidArgumentError("Outcome covers more administrations than there are peaks")
    j = outcome.stop_index
    if outcome.global_tox:
        earlier = u[: j - 1]
        return (float(earlier.max()) if earlier.size else -math.inf), float(u[j - 1])
    return float(u[:j].max()), math.inf


def _log_interval_prob(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """log(Phi(b) - Phi(a)) for standardized bounds a < b"""
    upper = a > 0
    # in the upper tail use the mirrored form to keep precision
    hi = np.where(upper, log_ndtr(-a), log_ndtr(b))
    lo = np.where(upper, log_ndtr(-b), log_ndtr(a))
    with np.errstate(divide="ignore", invalid="ignore"):
        return hi + np.log1p(-np.exp(lo - hi))


def hierarchical_patient_loglik(params: Tuple[float, float], peaks: Sequence[float],
                                outcome: ToxicityOutcome, ref_peak: float, patient: int = 0) -> float:
    """Marginal log-likelihood of one patient's administrations with Z_i integrated out"""
    mu_z, tau_z = params
    if not tau_z > 0:
        raise InvalidArgumentError("tau_z must be positive")
    a, b = _z_interval(peaks, outcome, ref_peak)
    if not b > a:
        raise ModelInconsistencyError("Toxic peak does not exceed earlier peaks", [patient])
    return float(_log_interval_prob(np.array([(a - mu_z) / tau_z]), np.array([(b - mu_z) / tau_z]))[0])


def hierarchical_outcome_prob(params: Tuple[float, float], peaks: Sequence[float], outcome: ToxicityOutcome,
                              ref_peak: float) -> float:
    """Probability of an outcome; zero when the outcome is impossible for these peaks"""
    mu_z, tau_z = params
    a, b = _z_interval(peaks, outcome, ref_peak)
    if not b > a:
        return 0.0
    return float(ndtr((b - mu_z) / tau_z) - ndtr((a - mu_z) / tau_z))


def check_consistency(endpoints: Sequence[PatientEndpoint], ref_peak: float) -> List[int]:
    """Indices of patients for which the hierarchical model is undefined"""
    bad = []
    for i, e in enumerate(endpoints):
        a, b = _z_interval(e.peaks, e.outcome, ref_peak)
        if not b > a:
            bad.append(i)
    return bad


def hierarchical_prob(params: Tuple[ArrayLike, ArrayLike], r_m: ArrayLike, ref_peak: float) -> ArrayLike:
    """F_z(log(r_m / ref_peak)) with F_z the N(mu_z, tau_z^2) CDF"""
    r, ref = _check_peak(r_m, ref_peak)
    mu_z, tau_z = (np.asarray(p, dtype=float) for p in params)
    out = ndtr((np.log(r / ref) - mu_z) / tau_z)
    return float(out) if np.ndim(out) == 0 else out


def _hierarchical_log_prior(theta: np.ndarray, prior: HierarchicalPrior) -> np.ndarray:
    mu_z, log_tau = theta[:, 0], theta[:, 1]
    tau = np.exp(log_tau)
    half_cauchy = math.log(2.0 / (math.pi * prior.tau_z_scale)) - np.log1p((tau / prior.tau_z_scale) ** 2)
    return norm.logpdf(mu_z, 0.0, prior.mu_z_sd) + half_cauchy + log_tau


def hierarchical_posterior(endpoints: Sequence[PatientEndpoint], prior: HierarchicalPrior, m_iter: int,
                           rng: np.random.Generator, options: Optional[SamplerOptions] = None) -> PosteriorDraws:
    """Sample (mu_z, tau_z) from the marginal likelihood of all administrations"""
    bad = check_consistency(endpoints, prior.ref_peak)
    if bad:
        raise ModelInconsistencyError("Hierarchical model undefined", bad)
    bounds = [_z_interval(e.peaks, e.outcome, prior.ref_peak) for e in endpoints]
    a = np.array([lo for lo, _ in bounds], dtype=float)
    b = np.array([hi for _, hi in bounds], dtype=float)

    def log_target(theta: np.ndarray) -> np.ndarray:
        mu = theta[:, :1]
        tau = np.exp(theta[:, 1:2])
        loglik = _log_interval_prob((a[None, :] - mu) / tau, (b[None, :] - mu) / tau).sum(axis=1)
        return _hierarchical_log_prior(theta, prior) + loglik

    options = _options_for(options, m_iter)
    chains = sample(log_target, [0.0, math.log(prior.tau_z_scale)], rng, options, names=("mu_z", "log_tau_z"))
    raw = chains.pooled(m_iter)
    params = np.column_stack([raw[:, 0], np.exp(raw[:, 1])])
    return PosteriorDraws("hierarchical", ("mu_z", "tau_z"), params, chains.diagnostics)


# ========================================================================
#                   Model objects shared by ESS and prediction
# ========================================================================

class LogisticModel:
    name = "logistic"

    def __init__(self, prior: LogisticPrior):
        self.prior = prior
        self.ref_peak = prior.ref_peak

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        beta0 = rng.normal(self.prior.beta0_mean, self.prior.beta0_sd, n)
        beta1 = rng.gamma(self.prior.beta1_shape, 1.0 / self.prior.beta1_rate, n)
        return np.column_stack([beta0, beta1])

    def prob(self, params: np.ndarray, peaks: ArrayLike) -> np.ndarray:
        """(n_params, n_peaks) toxicity probabilities"""
        return logistic_prob((params[:, :1], params[:, 1:2]), np.atleast_1d(peaks)[None, :], self.ref_peak)

    def posterior(self, endpoints, m_iter, rng, options=None, use_planned=False) -> PosteriorDraws:
        return logistic_posterior(endpoints, self.prior, m_iter, rng, options, use_planned)


class HierarchicalModel:
    name = "hierarchical"

    def __init__(self, prior: HierarchicalPrior):
        self.prior = prior
        self.ref_peak = prior.ref_peak

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        mu_z = rng.normal(0.0, self.prior.mu_z_sd, n)
        tau_z = np.abs(self.prior.tau_z_scale * rng.standard_cauchy(n))
        return np.column_stack([mu_z, tau_z])

    def prob(self, params: np.ndarray, peaks: ArrayLike) -> np.ndarray:
        return hierarchical_prob((params[:, :1], params[:, 1:2]), np.atleast_1d(peaks)[None, :], self.ref_peak)

    def posterior(self, endpoints, m_iter, rng, options=None, use_planned=False) -> PosteriorDraws:
        return hierarchical_posterior(endpoints, self.prior, m_iter, rng, options)


# ========================================================================
#                        Approximate prior ESS
# ========================================================================

@dataclass
class EssResult:
    mean: float
    per_regimen: List[Optional[float]]


def beta_moment_ess(probs: np.ndarray) -> Optional[float]:
    """a + b of the Beta matching mean and variance; None when infeasible"""
    m = float(np.mean(probs))
    v = float(np.var(probs))
    if v <= 0 or v >= m * (1 - m):
        return None
    common = m * (1 - m) / v - 1
    return (m * common) + ((1 - m) * common)


def ess_approx(model, ref_peaks: Sequence[float], n_prior_draws: int, rng: np.random.Generator) -> EssResult:
    """Mean over regimens of the Beta-matched ESS of prior toxicity probabilities"""
    if len(ref_peaks) == 0:
        raise InvalidArgumentError("ess_approx needs at least one reference peak")
    draws = model.sample_prior(n_prior_draws, rng)
    per = []
    for k, r in enumerate(ref_peaks):
        ess = beta_moment_ess(model.prob(draws, float(r))[:, 0])
        if ess is None:
            logger.warning(f"Beta moment matching infeasible for regimen {k + 1}; skipped")
        per.append(ess)
    usable = [e for e in per if e is not None]
    if not usable:
        raise EssInfeasibleError("Beta moment matching failed for every regimen")
    return EssResult(float(np.mean(usable)), per)
