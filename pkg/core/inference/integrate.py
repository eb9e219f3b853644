#!/usr/bin/env python3
"""
Posterior Toxicity Integration - From fitted models to regimen probabilities
Peaks of new patients are simulated from the fitted population, every
posterior parameter draw is combined with every simulated peak, and the
regimen closest to the target rate among those administered is selected.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import InvalidArgumentError
from core.escalation.crm import closest_to_target
from core.inference.drtox import PosteriorDraws
from core.inference.nlme import NlmeFit
from core.simulation.pkpd import OdeSettings, PopulationParams
from core.simulation.regimen import DoseRegimen
from core.simulation.toxgen import sample_max_peaks

logger = logging.getLogger(__name__)


@dataclass
class PosteriorToxicity:
    label: str
    mean: float
    credible_interval: Tuple[float, float]
    n_draws: int
    draws: Optional[np.ndarray] = field(default=None, repr=False)


def predict_peak_distribution(fit: Union[NlmeFit, PopulationParams], regimen: DoseRegimen, m_predict: int,
                              rng: np.random.Generator, ode: Optional[OdeSettings] = None) -> np.ndarray:
    """Highest peak of m_predict new patients drawn from the fitted population"""
    if m_predict < 1:
        raise InvalidArgumentError("m_predict must be at least 1")
    pop = fit.population if isinstance(fit, NlmeFit) else fit
    return sample_max_peaks(regimen, pop, m_predict, rng, ode or OdeSettings())


def _summarize(label: str, probs: np.ndarray, keep_draws: bool) -> PosteriorToxicity:
    flat = probs.ravel()
    lo, hi = np.quantile(flat, [0.025, 0.975])
    return PosteriorToxicity(label, float(flat.mean()), (float(lo), float(hi)), int(flat.size),
                             flat if keep_draws else None)


def posterior_tox_curve(draws: PosteriorDraws, model, peak_samples: Sequence[np.ndarray],
                        labels: Optional[Sequence[str]] = None, keep_draws: bool = True) -> List[PosteriorToxicity]:
    """p_T per regimen over the cross product of parameter draws and predicted peaks"""
    if len(draws) == 0:
        raise InvalidArgumentError("Posterior draws are empty")
    labels = list(labels) if labels is not None else [f"S{k + 1}" for k in range(len(peak_samples))]
    curve = []
    for label, peaks in zip(labels, peak_samples):
        peaks = np.asarray(peaks, dtype=float)
        if peaks.size == 0 or np.any(~(peaks > 0)):
            raise InvalidArgumentError(f"Peak samples for {label} must be positive")
        curve.append(_summarize(label, model.prob(draws.params, peaks), keep_draws))
    logger.debug(f"{draws.model} curve: {[round(c.mean, 4) for c in curve]}")
    return curve


def select_mtd(curve: Sequence[PosteriorToxicity], administered_set: Sequence[int], delta_t: float) -> int:
    """0-based index of the administered regimen closest to delta_t"""
    if not administered_set:
        raise InvalidArgumentError("No regimen was administered")
    return closest_to_target([c.mean for c in curve], delta_t, administered_set)


def predict_new_regimen(fit: Union[NlmeFit, PopulationParams], draws: PosteriorDraws, model,
                        regimen_new: DoseRegimen, m_predict: int, rng: np.random.Generator,
                        ode: Optional[OdeSettings] = None, keep_draws: bool = True) -> PosteriorToxicity:
    peaks = predict_peak_distribution(fit, regimen_new, m_predict, rng, ode)
    label = regimen_new.label or "S_new"
    return posterior_tox_curve(draws, model, [peaks], [label], keep_draws)[0]


def curve_frame(curve: Sequence[PosteriorToxicity], administered_set: Sequence[int] = (),
                selected: Optional[int] = None) -> pd.DataFrame:
    administered = set(administered_set)
    return pd.DataFrame({
        "regimen": [c.label for c in curve],
        "p_hat": [c.mean for c in curve],
        "ci_low": [c.credible_interval[0] for c in curve],
        "ci_high": [c.credible_interval[1] for c in curve],
        "administered": [k in administered for k in range(len(curve))],
        "selected": [k == selected for k in range(len(curve))],
    })


def write_curve_csv(path: Union[str, Path], curve: Sequence[PosteriorToxicity],
                    administered_set: Sequence[int] = (), selected: Optional[int] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve_frame(curve, administered_set, selected).to_csv(path, index=False, float_format="%.10g")
    return path
