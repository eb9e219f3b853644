#!/usr/bin/env python3
"""
NLME Module - Population PK/PD estimation by iterative two-stage MAP

Stage one fits every patient's random effects by maximum a posteriori
under the current population (mu, Omega); stage two moves the fixed effects
by the mean of the fitted random effects and sets Omega to their empirical
variance, floored. Both stages decrease the same joint objective

    J = sum_i [ -log p(y_i | mu * exp(eta_i)) + 1/2 sum_r eta_ir^2 / omega_r ]
        + n/2 sum_r log omega_r

so the recorded objective trace is nonincreasing.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize

from core.errors import (EstimationInfeasibleError, FitFailureError, InvalidArgumentError,
                         NumericIntegrationError)
from core.escalation.trial import TrialDataset
from core.inference.drtox import PatientEndpoint
from core.simulation.pkpd import (PARAM_NAMES, IndividualParams, ObservedSamples, OdeSettings,
                                  PopulationParams, SampleTimes, cytokine_peaks, model_at, simulate_pd)
from core.simulation.regimen import DoseRegimen

logger = logging.getLogger(__name__)

SD_FLOOR = 0.01
PENALTY = 1e12
_ABNORMAL = "ABNORMAL_TERMINATION_IN_LNSRCH"


@dataclass(frozen=True)
class NlmeSettings:
    random_effects: Tuple[str, ...] = ("cl", "emax", "kdeg", "kprime")
    frozen: Tuple[str, ...] = ("ec50", "imax", "ic50")
    loq: float = 0.0
    max_iter: int = 50
    rel_tol: float = 1e-3
    omega_floor: float = 1e-4
    initial_omega: float = 0.1
    n_starts: int = 3
    min_usable: int = 3
    rtol: float = 1e-6
    atol: float = 1e-8

    def __post_init__(self):
        unknown = [n for n in self.random_effects + self.frozen if n not in PARAM_NAMES]
        if unknown:
            raise InvalidArgumentError(f"Unknown parameter names {unknown}")
        if self.loq < 0 or self.max_iter < 1 or self.omega_floor <= 0:
            raise InvalidArgumentError("Invalid NLME settings")

    @property
    def random_index(self) -> List[int]:
        return [PARAM_NAMES.index(n) for n in self.random_effects]

    @property
    def frozen_index(self) -> List[int]:
        return [PARAM_NAMES.index(n) for n in self.frozen]

    def ode_for(self, ode: OdeSettings) -> OdeSettings:
        return replace(ode, rtol=self.rtol, atol=self.atol)


@dataclass
class MapEstimate:
    theta: IndividualParams
    eta: np.ndarray
    objective: float
    n_starts: int = 1


@dataclass
class NlmeFit:
    population: PopulationParams
    theta_hat: List[Optional[IndividualParams]]
    converged: bool
    objective_trace: List[float] = field(default_factory=list)
    failed: List[int] = field(default_factory=list)

    @property
    def mu_hat(self) -> np.ndarray:
        return self.population.mu_array

    @property
    def omega_hat(self) -> np.ndarray:
        return self.population.omega_array

    def to_dict(self) -> Dict[str, Any]:
        return {
            "population": self.population.to_dict(),
            "theta_hat": [t.to_dict() if t is not None else None for t in self.theta_hat],
            "converged": self.converged,
            "objective_trace": list(self.objective_trace),
            "failed": [i + 1 for i in self.failed],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NlmeFit":
        return cls(PopulationParams.from_dict(data["population"]),
                   [IndividualParams.from_dict(t) if t is not None else None for t in data["theta_hat"]],
                   bool(data["converged"]), list(data.get("objective_trace", [])),
                   [i - 1 for i in data.get("failed", [])])

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NlmeFit":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ========================================================================
#                          Individual MAP estimation
# ========================================================================

def _proportional_nll(y: np.ndarray, f: np.ndarray, b: float, floor: float) -> float:
    f = np.maximum(f, floor)
    s = max(b, SD_FLOOR) * f
    return float(np.sum(np.log(s) + 0.5 * ((y - f) / s) ** 2))


class PatientObjective:
    """Negative log posterior of one patient's random effects"""

    def __init__(self, regimen: DoseRegimen, obs: ObservedSamples, pop: PopulationParams,
                 components: Sequence[int], ode: OdeSettings, loq: float = 0.0):
        if obs.n_obs == 0:
            raise InvalidArgumentError("A patient needs at least one observation")
        self.regimen = regimen
        self.pop = pop
        self.components = list(components)
        self.ode = ode
        self.floor = loq / 2 if loq > 0 else 1e-10
        # below-LOQ values enter the likelihood as LOQ/2
        self.y_pk = np.where(obs.pk_values < loq, loq / 2, obs.pk_values) if loq > 0 else obs.pk_values
        self.y_pd = np.where(obs.pd_values < loq, loq / 2, obs.pd_values) if loq > 0 else obs.pd_values
        self.times = SampleTimes(tuple(obs.pk_times.tolist()), tuple(obs.pd_times.tolist()))
        self.omega = pop.omega_array[self.components]

    def theta(self, eta_sub: np.ndarray) -> IndividualParams:
        eta = np.zeros(len(PARAM_NAMES))
        eta[self.components] = eta_sub
        return IndividualParams.from_vector(self.pop.mu_array * np.exp(eta))

    def __call__(self, eta_sub: np.ndarray) -> float:
        try:
            profile = simulate_pd(self.theta(eta_sub), self.regimen, self.ode)
        except (NumericIntegrationError, InvalidArgumentError):
            return PENALTY
        conc, cyt = model_at(profile, self.times)
        nll = _proportional_nll(self.y_pk, conc, self.pop.b_pk, self.floor)
        nll += _proportional_nll(self.y_pd, cyt, self.pop.b_pd, self.floor)
        value = nll + 0.5 * float(np.sum(np.asarray(eta_sub) ** 2 / self.omega))
        return value if math.isfinite(value) else PENALTY


def _minimize(objective: PatientObjective, start: np.ndarray, bounds) -> Tuple[np.ndarray, float, bool]:
    res = minimize(objective, start, method="L-BFGS-B", bounds=bounds,
                   options={"eps": 1e-5, "ftol": 1e-12, "gtol": 1e-7, "maxiter": 200})
    ok = bool(res.success) or _ABNORMAL in str(res.message)
    return np.asarray(res.x, dtype=float), float(res.fun), ok and res.fun < PENALTY


def map_individual(regimen: DoseRegimen, obs: ObservedSamples, pop: PopulationParams,
                   components: Optional[Sequence[int]] = None, ode: Optional[OdeSettings] = None,
                   loq: float = 0.0, rng: Optional[np.random.Generator] = None,
                   eta0: Optional[np.ndarray] = None, n_starts: int = 3, patient: int = 0) -> MapEstimate:
    """MAP individual parameters on the received regimen; only components with omega > 0 move"""
    ode = ode or OdeSettings()
    comps = [i for i in (components if components is not None else range(len(PARAM_NAMES)))
             if pop.omega[i] > 0]
    objective = PatientObjective(regimen, obs, pop, comps, ode, loq)
    if not comps:
        theta = pop.typical()
        return MapEstimate(theta, np.zeros(len(PARAM_NAMES)), objective(np.zeros(0)), 0)

    sd = np.sqrt(objective.omega)
    bounds = [(-10.0 * s, 10.0 * s) for s in sd]
    start = np.zeros(len(comps)) if eta0 is None else np.clip(np.asarray(eta0)[comps], -9.9 * sd, 9.9 * sd)
    f_start = objective(start)

    x, fx, ok = _minimize(objective, start, bounds)
    tries = 1
    if not ok:
        rng = rng or np.random.default_rng(patient)
        candidates = []
        for _ in range(n_starts):
            tries += 1
            cx, cf, cok = _minimize(objective, rng.standard_normal(len(comps)) * sd, bounds)
            if cok:
                candidates.append((cf, cx))
        if not candidates:
            raise FitFailureError(f"MAP estimation failed after {tries} starts", patient)
        logger.warning(f"Patient {patient + 1}: MAP needed {tries} starts")
        fx, x = min(candidates, key=lambda c: c[0])

    # a warm start is never made worse
    if f_start <= fx:
        x, fx = start, f_start
    eta = np.zeros(len(PARAM_NAMES))
    eta[comps] = x
    return MapEstimate(objective.theta(x), eta, fx, tries)


# ========================================================================
#                           Population estimation
# ========================================================================

def _joint_objective(fits: Sequence[MapEstimate], omega: np.ndarray, random_idx: Sequence[int]) -> float:
    return sum(f.objective for f in fits) + 0.5 * len(fits) * float(np.sum(np.log(omega[list(random_idx)])))


def fit_population(dataset: TrialDataset, init: PopulationParams, settings: Optional[NlmeSettings] = None,
                   ode: Optional[OdeSettings] = None, rng: Optional[np.random.Generator] = None) -> NlmeFit:
    """Two-stage estimation of (mu, Omega) and every patient's parameters"""
    settings = settings or NlmeSettings()
    if dataset.n == 0:
        raise EstimationInfeasibleError("Dataset has no patients")
    ode = settings.ode_for(ode or OdeSettings())
    rng = rng or np.random.default_rng(0)

    frozen = set(settings.frozen_index)
    random_idx = [i for i in settings.random_index if i not in frozen]
    moving = np.zeros(len(PARAM_NAMES), dtype=bool)
    moving[random_idx] = True

    mu = init.mu_array.copy()
    omega = np.zeros(len(PARAM_NAMES))
    omega[random_idx] = [w if w > 0 else settings.initial_omega for w in init.omega_array[random_idx]]
    etas = np.zeros((dataset.n, len(PARAM_NAMES)))

    trace: List[float] = []
    best: Optional[NlmeFit] = None
    converged = False
    for iteration in range(settings.max_iter):
        pop = PopulationParams(tuple(mu), tuple(omega), init.b_pk, init.b_pd)
        fits: Dict[int, MapEstimate] = {}
        failed: List[int] = []
        for i, patient in enumerate(dataset.patients):
            try:
                fits[i] = map_individual(patient.received, patient.observations, pop, random_idx, ode,
                                         settings.loq, rng, etas[i], settings.n_starts, patient=i)
            except FitFailureError as e:
                logger.warning(f"{e}; excluded from the population step")
                failed.append(i)
        if len(fits) < settings.min_usable:
            raise EstimationInfeasibleError(f"Only {len(fits)} patients have usable fits")

        objective = _joint_objective(list(fits.values()), omega, random_idx)
        trace.append(objective)
        theta_hat = [fits[i].theta if i in fits else None for i in range(dataset.n)]
        best = NlmeFit(pop, theta_hat, False, list(trace), failed)

        eta_hat = np.array([fits[i].eta for i in sorted(fits)])
        shift = np.where(moving, eta_hat.mean(axis=0), 0.0)
        new_mu = mu * np.exp(shift)
        new_omega = np.zeros_like(omega)
        new_omega[random_idx] = np.maximum((eta_hat - shift)[:, random_idx].var(axis=0), settings.omega_floor)
        for i in fits:
            etas[i] = fits[i].eta - shift

        change = max(float(np.max(np.abs(new_mu - mu) / mu)),
                     float(np.max(np.abs(new_omega[random_idx] - omega[random_idx]) / omega[random_idx])))
        mu, omega = new_mu, new_omega
        logger.debug(f"NLME iteration {iteration + 1}: objective={objective:.6g} change={change:.3g}")
        if change < settings.rel_tol:
            converged = True
            break

    final_pop = PopulationParams(tuple(mu), tuple(omega), init.b_pk, init.b_pd)
    # individual estimates re-expressed relative to the updated population
    theta_hat = [IndividualParams.from_vector(mu * np.exp(etas[i])) if best.theta_hat[i] is not None else None
                 for i in range(dataset.n)]
    fit = NlmeFit(final_pop, theta_hat, converged, trace, best.failed)
    if not converged:
        logger.warning(f"NLME did not converge in {settings.max_iter} iterations; returning last iterate")
    logger.info(f"NLME fit: {len(trace)} iterations, mu_hat=" +
                ", ".join(f"{n}={v:.4g}" for n, v in zip(PARAM_NAMES, mu)))
    return fit


def predict_peaks(fit: NlmeFit, dataset: TrialDataset, ode: Optional[OdeSettings] = None) -> List[PatientEndpoint]:
    """Peaks of each fitted patient on the received regimen, plus the planned one when stopped early"""
    ode = ode or OdeSettings()
    if len(fit.theta_hat) != dataset.n:
        raise InvalidArgumentError("Fit and dataset describe different patients")
    endpoints = []
    for i, (theta, patient) in enumerate(zip(fit.theta_hat, dataset.patients)):
        if theta is None:
            logger.warning(f"Patient {i + 1} has no individual fit; left out of the DRtox data")
            continue
        peaks = tuple(cytokine_peaks(theta, patient.received, ode))
        planned = None
        if patient.outcome.stop_index < len(patient.planned):
            planned = tuple(cytokine_peaks(theta, patient.planned, ode))
        endpoints.append(PatientEndpoint(peaks, patient.outcome, planned))
    return endpoints
