#!/usr/bin/env python3
"""
Toxicity Generation Module - Ground-truth toxicity from cytokine peaks
Patients carry a log-normal sensitivity; toxicity happens at the first
administration whose scaled peak crosses the threshold. Also computes the
true regimen toxicity curve and calibrates the threshold of a scenario.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from core.errors import CalibrationInfeasibleError, InvalidArgumentError
from core.simulation.pkpd import (OdeSettings, PopulationParams, cytokine_peaks, max_peak,
                                  sample_individuals)
from core.simulation.regimen import DoseRegimen, RegimenPanel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToxicityGround:
    """Threshold on the cytokine response and spread of patient sensitivity"""
    tau_t: float
    omega_alpha: float = 0.25

    def __post_init__(self):
        if not self.tau_t > 0:
            raise InvalidArgumentError(f"tau_t must be positive (got {self.tau_t})")
        if self.omega_alpha < 0:
            raise InvalidArgumentError(f"omega_alpha must be >= 0 (got {self.omega_alpha})")


@dataclass(frozen=True)
class ToxicityOutcome:
    per_admin: Tuple[int, ...]
    stop_index: int
    global_tox: int

    def __post_init__(self):
        flags = tuple(int(y) for y in self.per_admin)
        object.__setattr__(self, "per_admin", flags)
        if not flags or any(y not in (0, 1) for y in flags) or any(flags[:-1]):
            raise InvalidArgumentError(f"Only the last indicator may be 1: {flags}")
        if self.global_tox != flags[-1] or self.stop_index != len(flags):
            raise InvalidArgumentError(f"Inconsistent toxicity outcome: {self}")

    @classmethod
    def observed(cls, toxic_at: Optional[int], n_admin: int) -> "ToxicityOutcome":
        """Outcome with toxicity at 1-based administration `toxic_at` (None for none)"""
        if toxic_at is None:
            return cls((0,) * n_admin, n_admin, 0)
        return cls((0,) * (toxic_at - 1) + (1,), toxic_at, 1)

    def to_dict(self) -> Dict[str, Any]:
        return {"per_admin": list(self.per_admin), "stop_index": self.stop_index, "global": self.global_tox}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ToxicityOutcome":
        return cls(tuple(data["per_admin"]), data["stop_index"], data["global"])


def simulate_toxicity(peaks: Sequence[float], ground: ToxicityGround,
                      rng: np.random.Generator) -> ToxicityOutcome:
    """Scan administrations; the first alpha_i * r_ij >= tau_T stops the regimen"""
    if len(peaks) == 0 or any(p < 0 for p in peaks):
        raise InvalidArgumentError("peaks must be a nonempty sequence of nonnegative values")
    alpha = math.exp(ground.omega_alpha * rng.standard_normal())
    for j, r in enumerate(peaks, start=1):
        if alpha * r >= ground.tau_t:
            return ToxicityOutcome.observed(j, len(peaks))
    return ToxicityOutcome.observed(None, len(peaks))


def tox_prob_from_peaks(max_peaks: np.ndarray, ground: ToxicityGround) -> float:
    """Mean over patients of P(alpha * r_M >= tau_T)"""
    r = np.asarray(max_peaks, dtype=float)
    if ground.omega_alpha == 0:
        return float(np.mean(r >= ground.tau_t))
    with np.errstate(divide="ignore"):
        log_r = np.log(r)
    return float(np.mean(norm.sf((math.log(ground.tau_t) - log_r) / ground.omega_alpha)))


def sample_max_peaks(regimen: DoseRegimen, pop: PopulationParams, n: int,
                     rng: np.random.Generator, settings: OdeSettings) -> np.ndarray:
    """Maximum peak of n simulated patients under the full regimen (no residual error)"""
    if n < 1:
        raise InvalidArgumentError("n_mc must be at least 1")
    return np.array([max_peak(cytokine_peaks(theta, regimen, settings))
                     for theta in sample_individuals(pop, n, rng)])


def true_tox_prob(regimen: DoseRegimen, pop: PopulationParams, ground: ToxicityGround, n_mc: int,
                  rng: np.random.Generator, settings: Optional[OdeSettings] = None) -> float:
    """Monte Carlo toxicity probability of a regimen under the ground truth"""
    peaks = sample_max_peaks(regimen, pop, n_mc, rng, settings or OdeSettings())
    return tox_prob_from_peaks(peaks, ground)


# ========================================================================
#                          Threshold calibration
# ========================================================================

@dataclass
class CalibrationResult:
    tau_t: float
    omega_alpha: float
    target_index: int
    delta_t: float
    true_curve: List[float]
    max_peaks: List[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def ground(self) -> ToxicityGround:
        return ToxicityGround(self.tau_t, self.omega_alpha)

    def to_dict(self) -> Dict[str, Any]:
        return {"tau_t": self.tau_t, "omega_alpha": self.omega_alpha, "target_index": self.target_index + 1,
                "delta_t": self.delta_t, "true_curve": list(self.true_curve)}


def panel_max_peaks(panel: RegimenPanel, pop: PopulationParams, n_mc: int, rng: np.random.Generator,
                    settings: OdeSettings) -> List[np.ndarray]:
    """Maximum peaks of the same n_mc simulated patients under every panel regimen"""
    if n_mc < 1:
        raise InvalidArgumentError("n_mc must be at least 1")
    # common population draws across the panel keep the curve monotone in tau_T
    thetas = sample_individuals(pop, n_mc, rng)
    return [np.array([max_peak(cytokine_peaks(theta, regimen, settings)) for theta in thetas])
            for regimen in panel]


def true_tox_curve(panel: RegimenPanel, pop: PopulationParams, ground: ToxicityGround, n_mc: int,
                   rng: np.random.Generator, settings: Optional[OdeSettings] = None) -> List[float]:
    """True toxicity probability of every panel regimen for a known threshold"""
    peaks = panel_max_peaks(panel, pop, n_mc, rng, settings or OdeSettings())
    return [tox_prob_from_peaks(p, ground) for p in peaks]


def _solve_tau(peaks: np.ndarray, omega_alpha: float, delta_t: float) -> float:
    """log tau_T with P(alpha * r_M >= tau_T) = delta_t for one regimen's peak sample"""
    positive = peaks[peaks > 0]
    if positive.size == 0:
        raise CalibrationInfeasibleError("Regimen never produces a cytokine peak", [])
    lo = math.log(positive.min()) - 8 * omega_alpha - 1.0
    hi = math.log(positive.max()) + 8 * omega_alpha + 1.0
    f = lambda log_tau: tox_prob_from_peaks(peaks, ToxicityGround(math.exp(log_tau), omega_alpha)) - delta_t  # noqa: E731
    if f(lo) < 0 or f(hi) > 0:
        raise CalibrationInfeasibleError(f"Target rate {delta_t} unreachable for this regimen", [])
    return brentq(f, lo, hi, xtol=1e-10)


def _closest(curve: Sequence[float], delta_t: float) -> int:
    distances = [abs(p - delta_t) for p in curve]
    return int(np.argmin(distances))


def calibrate_threshold(panel: RegimenPanel, pop: PopulationParams, omega_alpha: float, target_index: int,
                        delta_t: float, n_mc: int, rng: np.random.Generator,
                        settings: Optional[OdeSettings] = None) -> CalibrationResult:
    """Pick tau_T so the regimen at target_index (0-based) is the MTD-regimen"""
    if not 0 <= target_index < len(panel):
        raise InvalidArgumentError(f"Target index {target_index + 1} outside 1..{len(panel)}")
    if not 0 < delta_t < 1:
        raise InvalidArgumentError("delta_t must lie in (0, 1)")
    settings = settings or OdeSettings()

    peaks = panel_max_peaks(panel, pop, n_mc, rng, settings)

    def curve_at(log_tau: float) -> List[float]:
        ground = ToxicityGround(math.exp(log_tau), omega_alpha)
        return [tox_prob_from_peaks(p, ground) for p in peaks]

    log_tau = _solve_tau(peaks[target_index], omega_alpha, delta_t)
    curve = curve_at(log_tau)
    if _closest(curve, delta_t) != target_index:
        achievable = []
        for k in range(len(panel)):
            try:
                if _closest(curve_at(_solve_tau(peaks[k], omega_alpha, delta_t)), delta_t) == k:
                    achievable.append(k + 1)
            except CalibrationInfeasibleError:
                continue
        raise CalibrationInfeasibleError(
            f"No threshold makes {panel.labels[target_index]} the MTD-regimen", achievable)

    tau_t = math.exp(log_tau)
    logger.info(f"Calibrated tau_T={tau_t:.6g} pg/mL; true curve "
                + ", ".join(f"{p:.3f}" for p in curve))
    return CalibrationResult(tau_t, omega_alpha, target_index, delta_t, curve, peaks)
