#!/usr/bin/env python3
"""
Trial Simulation - Runs one dose-escalation trial end to end
Each enrolled patient gets individual PK/PD parameters, a toxicity outcome
from the ground-truth threshold model, a regimen truncated at toxicity and
noisy PK/PD samples on the received regimen. The design (3+3 or CRM)
allocates successive cohorts over the panel.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from core.errors import InvalidArgumentError
from core.escalation.crm import CrmConfig, closest_to_target, crm_next, crm_posterior
from core.escalation.three_plus_three import COHORT_SIZE, three_plus_three_step
from core.inference.mcmc import SamplerOptions
from core.simulation.pkpd import (IndividualParams, ObservedSamples, OdeSettings, PopulationParams,
                                  observe_with_error, peaks_from_profile, sample_individual,
                                  sampling_schedule, simulate_pd)
from core.simulation.regimen import DoseRegimen, RegimenPanel, truncate_at_toxicity
from core.simulation.toxgen import ToxicityGround, ToxicityOutcome, simulate_toxicity

logger = logging.getLogger(__name__)


@dataclass
class PatientRecord:
    regimen_index: int
    planned: DoseRegimen
    received: DoseRegimen
    outcome: ToxicityOutcome
    observations: ObservedSamples
    theta_true: Optional[IndividualParams] = None
    cohort: int = 0

    def __post_init__(self):
        if self.received != truncate_at_toxicity(self.planned, self.outcome.stop_index):
            raise InvalidArgumentError("Received regimen must be the planned one truncated at toxicity")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "regimen_index": self.regimen_index + 1,
            "cohort": self.cohort + 1,
            "planned": self.planned.to_dict(),
            "received": self.received.to_dict(),
            "outcome": self.outcome.to_dict(),
            "observations": self.observations.to_dict(),
            "theta_true": self.theta_true.to_dict() if self.theta_true else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PatientRecord":
        theta = data.get("theta_true")
        return cls(data["regimen_index"] - 1, DoseRegimen.from_dict(data["planned"]),
                   DoseRegimen.from_dict(data["received"]), ToxicityOutcome.from_dict(data["outcome"]),
                   ObservedSamples.from_dict(data["observations"]),
                   IndividualParams.from_dict(theta) if theta else None, data.get("cohort", 1) - 1)


@dataclass
class CohortEntry:
    """One allocation step of the design"""
    cohort: int
    regimen_index: int
    n_toxicities: int
    decision: str
    estimates: Optional[List[float]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {"cohort": self.cohort + 1, "regimen_index": self.regimen_index + 1,
                "n_toxicities": self.n_toxicities, "decision": self.decision, "estimates": self.estimates}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CohortEntry":
        return cls(data["cohort"] - 1, data["regimen_index"] - 1, data["n_toxicities"], data["decision"],
                   data.get("estimates"))


@dataclass
class TrialDataset:
    design: str
    panel: RegimenPanel
    patients: List[PatientRecord] = field(default_factory=list)
    design_log: List[CohortEntry] = field(default_factory=list)
    recommended: Optional[int] = None
    no_mtd: bool = False
    design_estimates: Optional[List[float]] = None

    @property
    def n(self) -> int:
        return len(self.patients)

    @property
    def administered_set(self) -> List[int]:
        return sorted({p.regimen_index for p in self.patients})

    def sample_sizes(self) -> List[int]:
        counts = [0] * len(self.panel)
        for p in self.patients:
            counts[p.regimen_index] += 1
        return counts

    def crm_data(self) -> List[Tuple[int, int]]:
        return [(p.regimen_index, p.outcome.global_tox) for p in self.patients]

    def check_no_skipping(self) -> bool:
        highest = -1
        for entry in self.design_log:
            if entry.regimen_index > highest + 1:
                return False
            highest = max(highest, entry.regimen_index)
        return True

    def to_dict(self) -> Dict[str, Any]:
        return {
            "design": self.design,
            "panel": self.panel.to_dict(),
            "recommended": self.recommended + 1 if self.recommended is not None else None,
            "no_mtd": self.no_mtd,
            "design_estimates": self.design_estimates,
            "administered_set": [k + 1 for k in self.administered_set],
            "design_log": [e.to_dict() for e in self.design_log],
            "patients": [p.to_dict() for p in self.patients],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrialDataset":
        rec = data.get("recommended")
        return cls(data["design"], RegimenPanel.from_dict(data["panel"]),
                   [PatientRecord.from_dict(p) for p in data["patients"]],
                   [CohortEntry.from_dict(e) for e in data.get("design_log", [])],
                   rec - 1 if rec is not None else None, bool(data.get("no_mtd", False)),
                   data.get("design_estimates"))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrialDataset":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass
class TrialDesign:
    """Escalation design: '3+3' or 'crm'"""
    kind: str = "crm"
    crm: CrmConfig = field(default_factory=CrmConfig)
    crm_draws: int = 2000
    sampler: Optional[SamplerOptions] = None

    def __post_init__(self):
        if self.kind not in ("3+3", "crm"):
            raise InvalidArgumentError(f"Unknown design '{self.kind}'")


def simulate_patient(panel: RegimenPanel, k: int, pop: PopulationParams, ground: ToxicityGround,
                     rng: np.random.Generator, settings: OdeSettings, n_pd: int = 6,
                     cohort: int = 0) -> PatientRecord:
    """Enroll one patient on panel regimen k (0-based)"""
    planned = panel[k]
    theta = sample_individual(pop, rng)
    planned_profile = simulate_pd(theta, planned, settings)
    peaks = peaks_from_profile(planned_profile, planned, settings)
    outcome = simulate_toxicity(peaks, ground, rng)
    received = truncate_at_toxicity(planned, outcome.stop_index)
    profile = planned_profile if received is planned else simulate_pd(theta, received, settings)
    obs = observe_with_error(profile, sampling_schedule(received, settings, n_pd), pop, rng)
    return PatientRecord(k, planned, received, outcome, obs, theta, cohort)


def _enroll(dataset: TrialDataset, k: int, size: int, cohort: int, pop, ground, rng, settings, n_pd) -> int:
    cohort_records = [simulate_patient(dataset.panel, k, pop, ground, rng, settings, n_pd, cohort)
                      for _ in range(size)]
    dataset.patients.extend(cohort_records)
    return sum(p.outcome.global_tox for p in cohort_records)


def _run_three_plus_three(dataset, pop, ground, rng, settings, n_pd) -> None:
    K = len(dataset.panel)
    counts = [(0, 0)] * K
    current = 0
    cohort = 0
    while True:
        step = three_plus_three_step(counts, current)
        if step.finished:
            dataset.recommended = step.mtd_index
            dataset.no_mtd = step.mtd_index is None
            logger.debug(f"3+3 finished: {step.decision.value}, MTD "
                         f"{step.mtd_index + 1 if step.mtd_index is not None else 'none'}")
            return
        k = step.next_index
        n_tox = _enroll(dataset, k, COHORT_SIZE, cohort, pop, ground, rng, settings, n_pd)
        treated, tox = counts[k]
        counts[k] = (treated + COHORT_SIZE, tox + n_tox)
        dataset.design_log.append(CohortEntry(cohort, k, n_tox, step.decision.value))
        current = k
        cohort += 1


def _run_crm(dataset, design: TrialDesign, pop, ground, rng, crm_rng, settings, n_pd) -> None:
    config = design.crm
    if len(config.skeleton) != len(dataset.panel):
        raise InvalidArgumentError("CRM skeleton must have one value per panel regimen")
    k = 0
    decision = "start"
    estimates = None
    n_cohorts = config.n_max // config.cohort_size
    for cohort in range(n_cohorts):
        n_tox = _enroll(dataset, k, config.cohort_size, cohort, pop, ground, rng, settings, n_pd)
        dataset.design_log.append(CohortEntry(cohort, k, n_tox, decision, estimates))
        if cohort == n_cohorts - 1:
            break
        nxt, posterior = crm_next(dataset.crm_data(), config, design.crm_draws, crm_rng, design.sampler)
        decision = "escalate" if nxt > k else ("stay" if nxt == k else "deescalate")
        estimates = posterior.means
        k = nxt

    final = crm_posterior(dataset.crm_data(), config, design.crm_draws, crm_rng, design.sampler)
    dataset.design_estimates = final.means
    dataset.recommended = closest_to_target(final.means, config.target, dataset.administered_set)


def run_trial(design: TrialDesign, panel: RegimenPanel, pop: PopulationParams, ground: ToxicityGround,
              rng: np.random.Generator, settings: Optional[OdeSettings] = None,
              crm_rng: Optional[np.random.Generator] = None, n_pd: int = 6) -> TrialDataset:
    """Simulate one trial starting at the lowest regimen"""
    settings = settings or OdeSettings()
    dataset = TrialDataset(design.kind, panel)
    if design.kind == "3+3":
        _run_three_plus_three(dataset, pop, ground, rng, settings, n_pd)
    else:
        _run_crm(dataset, design, pop, ground, rng, crm_rng or rng, settings, n_pd)

    logger.debug(f"Trial done: n={dataset.n}, sizes={dataset.sample_sizes()}, "
                 f"recommended={dataset.recommended + 1 if dataset.recommended is not None else None}")
    return dataset
