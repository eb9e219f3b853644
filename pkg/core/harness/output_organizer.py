#!/usr/bin/env python3
"""
Output Organizer Module - Result files of every CLI command
One output directory per command run. JSON documents are written with
sorted keys and no timestamps, CSV tables through pandas, and each
directory gets an index.json listing what was written.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from colorama import Fore, Style

from core.errors import InvalidArgumentError
from core.escalation.trial import TrialDataset
from core.harness.batch_processor import MODEL_METHODS, BatchResult, DatasetAnalysis
from core.inference.integrate import PosteriorToxicity, curve_frame

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


class OutputOrganizer:
    """Writes result files under one directory and keeps track of them"""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.written: List[str] = []

    def path(self, name: str) -> Path:
        return self.directory / name

    def _record(self, path: Path) -> Path:
        rel = str(path.relative_to(self.directory))
        if rel not in self.written:
            self.written.append(rel)
        return path

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
            f.write("\n")
        return self._record(path)

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return self._record(path)

    def write_dataset(self, dataset: TrialDataset, name: str = "dataset.json") -> Path:
        return self._record(dataset.save(self.path(name)))

    # ------------------------------------------------------------------ fit

    def write_analysis(self, analysis: DatasetAnalysis, dataset: TrialDataset) -> Dict[str, Path]:
        """fit.json, posterior draws and posterior curves of one dataset"""
        paths = {"fit": self._record(analysis.fit.save(self.path("fit.json")))}
        for name, draws in analysis.draws.items():
            paths[f"draws_{name}"] = self._record(draws.write_csv(self.path(f"draws_{name}.csv")))
            paths[f"curve_{name}"] = self.write_frame(
                f"curve_{name}.csv", curve_frame(analysis.curves[name], dataset.administered_set,
                                                 analysis.selected[name]))
        if analysis.predictions:
            paths["predictions"] = self.write_predictions(analysis.predictions)
        paths["analysis"] = self.write_json("analysis.json", {
            "selected": {m: k + 1 for m, k in analysis.selected.items()},
            "posterior_means": {m: d.mean() for m, d in analysis.draws.items()},
            "diagnostics": analysis.diagnostics(),
            "n_endpoints": len(analysis.endpoints),
        })
        return paths

    def write_predictions(self, predictions: Dict[str, Sequence[PosteriorToxicity]],
                          name: str = "predictions.csv") -> Path:
        rows = [{"method": method, "regimen": p.label, "p_hat": p.mean,
                 "ci_low": p.credible_interval[0], "ci_high": p.credible_interval[1], "n_draws": p.n_draws}
                for method, preds in predictions.items() for p in preds]
        return self.write_frame(name, pd.DataFrame(rows, columns=["method", "regimen", "p_hat", "ci_low",
                                                                  "ci_high", "n_draws"]))

    # ------------------------------------------------------------------ batch

    def write_batch(self, result: BatchResult) -> Dict[str, Path]:
        """summary.json plus per-trial CSV tables"""
        summary = result.summary()
        paths = {
            "summary": self.write_json("summary.json", summary),
            "trials": self.write_frame("trials.csv", trials_frame(result)),
            "estimates": self.write_frame("estimates.csv", estimates_frame(result)),
            "sample_sizes": self.write_frame("sample_sizes.csv", sample_size_frame(result)),
        }
        if result.prediction_labels:
            paths["predictions"] = self.write_frame("predictions.csv", predictions_frame(result))
        paths.update(self.write_report(summary))
        return paths

    def write_report(self, summary: Dict[str, Any]) -> Dict[str, Path]:
        """Flat CSV views of a summary.json document"""
        return {
            "pcs": self.write_frame("pcs.csv", pcs_frame(summary)),
            "rmse": self.write_frame("rmse.csv", rmse_frame(summary)),
            "probability_summary": self.write_frame("probability_summary.csv", probability_frame(summary)),
        }

    def create_output_index(self) -> Path:
        """index.json listing every file written through this organizer"""
        index = self.path("index.json")
        files = set(self.written)
        if index.exists():
            with open(index, "r", encoding="utf-8") as f:
                files.update(json.load(f).get("files", []))
        files = sorted(files)
        with open(index, "w", encoding="utf-8") as f:
            json.dump({"files": files}, f, indent=2)
            f.write("\n")
        print(f"{Fore.GREEN}Output written to {self.directory} ({len(files)} files){Style.RESET_ALL}")
        return index


# ========================================================================
#                              Batch tables
# ========================================================================

def _one_based(k: Optional[int]) -> Optional[int]:
    return None if k is None else k + 1


def trials_frame(result: BatchResult) -> pd.DataFrame:
    rows = []
    for t in result.trials:
        row: Dict[str, Any] = {"slot": t.slot + 1, "trial": t.trial_index, "n": t.n,
                               "administered": " ".join(str(k + 1) for k in t.administered),
                               f"{result.design}_selected": _one_based(t.design_selected), "no_mtd": t.no_mtd}
        for m in MODEL_METHODS:
            row[f"{m}_selected"] = _one_based(t.methods[m].selected)
        row["nlme_converged"] = t.nlme_converged
        rows.append(row)
    return pd.DataFrame(rows)


def estimates_frame(result: BatchResult) -> pd.DataFrame:
    """Long table: trial, method, regimen, p_hat, true_p"""
    rows = []
    for method in result.methods:
        for t in result.trials:
            curve = t.methods[method].p_hat if method in MODEL_METHODS else t.design_curve
            if curve is None:
                continue
            for label, p, true_p in zip(result.labels, curve, result.true_curve):
                rows.append({"trial": t.slot + 1, "method": method, "regimen": label, "p_hat": p, "true_p": true_p})
    return pd.DataFrame(rows, columns=["trial", "method", "regimen", "p_hat", "true_p"])


def sample_size_frame(result: BatchResult) -> pd.DataFrame:
    frame = pd.DataFrame([t.sample_sizes for t in result.trials], columns=result.labels)
    frame.insert(0, "trial", [t.slot + 1 for t in result.trials])
    return frame


def predictions_frame(result: BatchResult) -> pd.DataFrame:
    rows = [{"trial": t.slot + 1, "method": m, "regimen": label, "p_hat": p}
            for m in MODEL_METHODS for t in result.trials
            for label, p in zip(result.prediction_labels, t.predictions.get(m, []))]
    return pd.DataFrame(rows, columns=["trial", "method", "regimen", "p_hat"])


def pcs_frame(summary: Dict[str, Any]) -> pd.DataFrame:
    labels = summary["regimens"]
    rows = [{"method": "true_p", **dict(zip(labels, summary["true_curve"])), "no_mtd": None}]
    for method, row in summary["pcs"].items():
        rows.append({"method": method, **dict(zip(labels, row["percent"])), "no_mtd": row["no_mtd"]})
    rows.append({"method": "mean_n", **dict(zip(labels, summary["mean_sample_size"])), "no_mtd": None})
    return pd.DataFrame(rows, columns=["method", *labels, "no_mtd"])


def rmse_frame(summary: Dict[str, Any]) -> pd.DataFrame:
    rows = [{"method": method, **stats} for method, scopes in summary["rmse"].items() for stats in scopes.values()]
    return pd.DataFrame(rows, columns=["method", "scope", "mean", "median", "q25", "q75"])


def probability_frame(summary: Dict[str, Any]) -> pd.DataFrame:
    labels = summary["regimens"]
    rows = []
    for method, stats in summary["estimates"].items():
        for k, label in enumerate(labels):
            rows.append({"method": method, "regimen": label, "true_p": summary["true_curve"][k],
                         **{stat: values[k] for stat, values in stats.items()}})
    return pd.DataFrame(rows, columns=["method", "regimen", "true_p", "mean", "median", "q25", "q75"])


def load_summary(directory: Union[str, Path]) -> Dict[str, Any]:
    path = Path(directory) / "summary.json"
    if not path.exists():
        raise InvalidArgumentError(f"No summary.json in {directory}; run the batch command first")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
