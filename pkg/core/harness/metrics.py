#!/usr/bin/env python3
"""
Operating Characteristics - Selection percentages, sample sizes and RMSE
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.errors import InvalidArgumentError

SCOPES = ("all", "mtd-neighborhood")


def pcs_row(selections: Sequence[Optional[int]], K: int) -> Dict[str, object]:
    """Percentage of trials selecting each regimen; None counts as no MTD"""
    n = len(selections)
    if n == 0:
        raise InvalidArgumentError("No trials to summarize")
    counts = np.zeros(K)
    no_mtd = 0
    for k in selections:
        if k is None:
            no_mtd += 1
        else:
            counts[k] += 1
    return {"percent": (100.0 * counts / n).tolist(), "no_mtd": 100.0 * no_mtd / n}


def mean_sample_sizes(sizes: Sequence[Sequence[int]]) -> List[float]:
    return np.asarray(sizes, dtype=float).mean(axis=0).tolist()


def mtd_neighborhood(mtd_index: int, K: int) -> List[int]:
    return [k for k in (mtd_index - 1, mtd_index, mtd_index + 1) if 0 <= k < K]


def rmse(estimated: Sequence[float], truth: Sequence[float], indices: Optional[Sequence[int]] = None) -> float:
    est = np.asarray(estimated, dtype=float)
    true = np.asarray(truth, dtype=float)
    if est.shape != true.shape:
        raise InvalidArgumentError("Estimated and true curves must align with the panel")
    idx = list(indices) if indices is not None else list(range(est.size))
    return float(np.sqrt(np.mean((est[idx] - true[idx]) ** 2)))


@dataclass
class RmseSummary:
    scope: str
    mean: float
    median: float
    q25: float
    q75: float
    values: List[float]

    def to_dict(self, with_values: bool = False) -> Dict[str, object]:
        out = asdict(self)
        if not with_values:
            out.pop("values")
        return out


def rmse_metrics(curves: Sequence[Sequence[float]], truth: Sequence[float], scope: str = "all",
                 mtd_index: Optional[int] = None) -> RmseSummary:
    """Per-trial RMSE over the panel or over the true MTD-regimen and its neighbors"""
    if scope not in SCOPES:
        raise InvalidArgumentError(f"Unknown RMSE scope '{scope}'")
    indices = None
    if scope == "mtd-neighborhood":
        if mtd_index is None:
            raise InvalidArgumentError("The neighborhood scope needs the true MTD index")
        indices = mtd_neighborhood(mtd_index, len(truth))
    values = [rmse(c, truth, indices) for c in curves]
    if not values:
        raise InvalidArgumentError("No curves to summarize")
    q25, med, q75 = np.quantile(values, [0.25, 0.5, 0.75])
    return RmseSummary(scope, float(np.mean(values)), float(med), float(q25), float(q75), values)


def probability_summary(curves: Sequence[Sequence[float]]) -> Dict[str, List[float]]:
    """Mean, median and quartiles of estimated probabilities per regimen"""
    arr = np.asarray(curves, dtype=float)
    q25, med, q75 = np.quantile(arr, [0.25, 0.5, 0.75], axis=0)
    return {"mean": arr.mean(axis=0).tolist(), "median": med.tolist(), "q25": q25.tolist(), "q75": q75.tolist()}
