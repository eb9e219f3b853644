#!/usr/bin/env python3
"""
Batch Processor Module - Operating characteristics over many simulated trials
Each trial runs the full pipeline (escalation, NLME, both DRtox posteriors,
posterior toxicity curves, MTD selection). Trials run in a process pool and
are folded back in slot order; failed trials are replaced with fresh seeds
up to the replacement budget.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from colorama import Fore, Style

from core.errors import DrtoxError, InvalidArgumentError, ReplacementBudgetError
from core.escalation.crm import closest_to_target
from core.escalation.trial import TrialDataset, TrialDesign, run_trial
from core.harness.metrics import mean_sample_sizes, pcs_row, probability_summary, rmse_metrics
from core.harness.progress_tracker import AdvancedProgressTracker, create_batch_tracker
from core.harness.scenario import ScenarioConfig
from core.inference.drtox import (EssResult, HierarchicalModel, HierarchicalPrior, LogisticModel, PatientEndpoint,
                                  PosteriorDraws, calibrate_logistic_prior, ess_approx)
from core.inference.integrate import PosteriorToxicity, posterior_tox_curve, predict_peak_distribution, select_mtd
from core.inference.nlme import NlmeFit, NlmeSettings, fit_population, predict_peaks
from core.seeding import Stream, make_rng, trial_rng
from core.simulation.pkpd import OdeSettings, PopulationParams, reference_peaks
from core.simulation.regimen import DoseRegimen, RegimenPanel
from core.simulation.toxgen import ToxicityGround, calibrate_threshold, true_tox_curve

logger = logging.getLogger(__name__)

MODEL_METHODS = ("logistic", "hierarchical")


# ========================================================================
#                          Scenario-level context
# ========================================================================

@dataclass
class TrialContext:
    """Everything a worker needs to simulate and analyse one trial"""
    scenario: ScenarioConfig
    seed: int
    panel: RegimenPanel
    pop: PopulationParams
    ode: OdeSettings
    design: TrialDesign
    nlme: NlmeSettings
    logistic: LogisticModel
    hierarchical: HierarchicalModel
    new_regimens: List[DoseRegimen] = field(default_factory=list)
    ground: Optional[ToxicityGround] = None
    true_curve: Optional[List[float]] = None

    @property
    def true_mtd(self) -> int:
        if self.true_curve is None:
            raise InvalidArgumentError("The context carries no true toxicity curve")
        return closest_to_target(self.true_curve, self.scenario.delta_t)

    def models(self) -> Dict[str, Any]:
        return {"logistic": self.logistic, "hierarchical": self.hierarchical}


def build_models(scenario: ScenarioConfig, pop: PopulationParams, panel: RegimenPanel,
                 ode: OdeSettings) -> Tuple[LogisticModel, HierarchicalModel, List[float]]:
    """Priors anchored on the reference peaks of the population fixed effects"""
    refs = reference_peaks(pop, panel, ode)
    lg = scenario.drtox.logistic
    logistic = calibrate_logistic_prior(scenario.initial_guesses(), refs, lg.k_t - 1, scenario.delta_t,
                                        lg.beta0_sd, lg.beta1_shape, lg.calibration)
    hg = scenario.drtox.hierarchical
    hierarchical = HierarchicalPrior(hg.mu_z_sd, hg.tau_z_scale, hg.k_50 - 1, refs[hg.k_50 - 1])
    logger.info(f"Logistic prior: beta0={logistic.beta0_mean:.4f}, beta1={logistic.beta1_mean:.4f}")
    return LogisticModel(logistic), HierarchicalModel(hierarchical), refs


def calibrate_ground(scenario: ScenarioConfig, seed: int, panel: RegimenPanel, pop: PopulationParams,
                     ode: OdeSettings) -> Tuple[ToxicityGround, List[float]]:
    """Threshold and true curve: explicit tau_T, or calibrated on the target regimen"""
    g = scenario.ground
    rng = make_rng(seed, Stream.CALIBRATION)
    if g.tau_t is not None:
        ground = ToxicityGround(g.tau_t, g.omega_alpha)
        return ground, true_tox_curve(panel, pop, ground, g.n_mc, rng, ode)
    rate = g.calibration_rate if g.calibration_rate is not None else scenario.delta_t
    result = calibrate_threshold(panel, pop, g.omega_alpha, g.target_index - 1, rate, g.n_mc, rng, ode)
    return result.ground, result.true_curve


def prepare_context(scenario: ScenarioConfig, seed: Optional[int] = None, with_ground: bool = True) -> TrialContext:
    """Build the scenario objects; the ground truth is only needed to simulate trials"""
    seed = scenario.seed if seed is None else seed
    panel = scenario.build_panel()
    pop = scenario.build_population()
    ode = scenario.ode_settings()
    logistic, hierarchical, _ = build_models(scenario, pop, panel, ode)
    context = TrialContext(scenario, seed, panel, pop, ode, scenario.trial_design(), scenario.nlme_settings(),
                           logistic, hierarchical, scenario.predict_regimens())
    if with_ground:
        context.ground, context.true_curve = calibrate_ground(scenario, seed, panel, pop, ode)
    return context


def prior_ess(context: TrialContext) -> Dict[str, EssResult]:
    refs = reference_peaks(context.pop, context.panel, context.ode)
    n = context.scenario.drtox.n_prior_draws
    rng = make_rng(context.seed, Stream.PRIOR)
    return {name: ess_approx(model, refs, n, rng) for name, model in context.models().items()}


# ========================================================================
#                              Trial analysis
# ========================================================================

@dataclass
class DatasetAnalysis:
    """NLME fit, DRtox posteriors and posterior curves of one trial dataset"""
    fit: NlmeFit
    endpoints: List[PatientEndpoint]
    draws: Dict[str, PosteriorDraws]
    curves: Dict[str, List[PosteriorToxicity]]
    selected: Dict[str, int]
    predictions: Dict[str, List[PosteriorToxicity]] = field(default_factory=dict)

    def diagnostics(self) -> Dict[str, Any]:
        return {"nlme_converged": self.fit.converged, "nlme_iterations": len(self.fit.objective_trace),
                "nlme_failed": [i + 1 for i in self.fit.failed],
                **{f"{name}_rhat": d.diagnostics.get("rhat", {}) for name, d in self.draws.items()}}


def analyse_dataset(context: TrialContext, dataset: TrialDataset, trial: int = 0,
                    keep_draws: bool = False) -> DatasetAnalysis:
    """Run NLME, both DRtox posteriors and the posterior curves on a dataset"""
    sc = context.scenario
    fit = fit_population(dataset, context.pop, context.nlme, context.ode,
                         trial_rng(context.seed, trial, Stream.NLME))
    endpoints = predict_peaks(fit, dataset, context.ode)
    options = sc.sampler_options()
    draws = {
        "logistic": context.logistic.posterior(endpoints, sc.drtox.m_iter,
                                               trial_rng(context.seed, trial, Stream.MCMC_LOGISTIC),
                                               options, sc.drtox.use_planned_peaks),
        "hierarchical": context.hierarchical.posterior(endpoints, sc.drtox.m_iter,
                                                       trial_rng(context.seed, trial, Stream.MCMC_HIERARCHICAL),
                                                       options),
    }

    rng = trial_rng(context.seed, trial, Stream.PREDICT)
    m_predict = sc.drtox.m_predict
    panel_peaks = [predict_peak_distribution(fit, r, m_predict, rng, context.ode) for r in context.panel]
    new_peaks = [predict_peak_distribution(fit, r, m_predict, rng, context.ode) for r in context.new_regimens]
    new_labels = [r.label for r in context.new_regimens]

    analysis = DatasetAnalysis(fit, endpoints, draws, {}, {})
    for name, model in context.models().items():
        curve = posterior_tox_curve(draws[name], model, panel_peaks, context.panel.labels, keep_draws)
        analysis.curves[name] = curve
        analysis.selected[name] = select_mtd(curve, dataset.administered_set, sc.delta_t)
        if new_peaks:
            analysis.predictions[name] = posterior_tox_curve(draws[name], model, new_peaks, new_labels, keep_draws)
    logger.debug(f"Trial {trial}: selected " + ", ".join(f"{m}=S{k + 1}" for m, k in analysis.selected.items()))
    return analysis


@dataclass
class MethodResult:
    selected: Optional[int]
    p_hat: List[float]
    ci: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class TrialResult:
    slot: int
    trial_index: int
    n: int
    sample_sizes: List[int]
    administered: List[int]
    design_selected: Optional[int]
    no_mtd: bool
    design_curve: Optional[List[float]]
    methods: Dict[str, MethodResult]
    predictions: Dict[str, List[float]]
    nlme_converged: bool
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def selections(self, design: str) -> Dict[str, Optional[int]]:
        out: Dict[str, Optional[int]] = {m: r.selected for m, r in self.methods.items()}
        out[design] = self.design_selected
        return out

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def analyse_trial(context: TrialContext, slot: int, trial: int) -> TrialResult:
    """Simulate and analyse trial `trial` (seed substream) for output slot `slot`"""
    if context.ground is None:
        raise InvalidArgumentError("Simulating trials needs a calibrated ground truth")
    dataset = run_trial(context.design, context.panel, context.pop, context.ground,
                        trial_rng(context.seed, trial, Stream.PATIENTS), context.ode,
                        crm_rng=trial_rng(context.seed, trial, Stream.MCMC_CRM),
                        n_pd=context.scenario.sampling.n_pd)
    analysis = analyse_dataset(context, dataset, trial)
    methods = {name: MethodResult(analysis.selected[name], [c.mean for c in curve],
                                  [c.credible_interval for c in curve])
               for name, curve in analysis.curves.items()}
    predictions = {name: [c.mean for c in curve] for name, curve in analysis.predictions.items()}
    return TrialResult(slot, trial, dataset.n, dataset.sample_sizes(), dataset.administered_set,
                       dataset.recommended, dataset.no_mtd, dataset.design_estimates, methods, predictions,
                       analysis.fit.converged, analysis.diagnostics())


def _run_job(context: TrialContext, slot: int, trial: int) -> Tuple[int, Optional[TrialResult], Optional[str]]:
    # errors travel back as text; the custom exception signatures do not pickle
    try:
        return slot, analyse_trial(context, slot, trial), None
    except DrtoxError as e:
        return slot, None, f"{type(e).__name__}: {e}"
    except Exception as e:
        logger.exception(f"Unexpected failure in trial {trial} (slot {slot + 1})")
        return slot, None, f"{type(e).__name__}: {e}"


# ========================================================================
#                               Batch driver
# ========================================================================

@dataclass
class TrialJob:
    """One output slot; trial_index changes when the slot is replaced"""
    slot: int
    trial_index: int
    status: str = "pending"  # pending, completed, failed
    error_message: Optional[str] = None
    attempts: List[int] = field(default_factory=list)

    def fail(self, error_message: str):
        self.status = "failed"
        self.error_message = error_message

    def retry(self, trial_index: int):
        self.attempts.append(self.trial_index)
        self.trial_index = trial_index
        self.status = "pending"
        self.error_message = None


@dataclass
class Replacement:
    slot: int
    failed_trial: int
    replacement_trial: int
    reason: str


@dataclass
class BatchResult:
    scenario: str
    design: str
    seed: int
    tau_t: float
    true_curve: List[float]
    true_mtd: int
    labels: List[str]
    prediction_labels: List[str]
    trials: List[TrialResult]
    replacements: List[Replacement]
    stats: Dict[str, Any] = field(default_factory=dict)

    @property
    def methods(self) -> List[str]:
        return list(MODEL_METHODS) + [self.design]

    def curves(self, method: str) -> List[List[float]]:
        if method in MODEL_METHODS:
            return [t.methods[method].p_hat for t in self.trials]
        return [t.design_curve for t in self.trials if t.design_curve is not None]

    def summary(self) -> Dict[str, Any]:
        K = len(self.labels)
        pcs = {m: pcs_row([t.selections(self.design)[m] for t in self.trials], K) for m in self.methods}
        rmse: Dict[str, Any] = {}
        estimates: Dict[str, Any] = {}
        for m in self.methods:
            curves = self.curves(m)
            if not curves:
                continue
            rmse[m] = {scope: rmse_metrics(curves, self.true_curve, scope, self.true_mtd).to_dict()
                       for scope in ("all", "mtd-neighborhood")}
            estimates[m] = probability_summary(curves)
        predictions = {}
        if self.prediction_labels:
            for m in MODEL_METHODS:
                predictions[m] = probability_summary([t.predictions[m] for t in self.trials])
        return {
            "scenario": self.scenario,
            "design": self.design,
            "seed": self.seed,
            "n_trials": len(self.trials),
            "tau_t": self.tau_t,
            "true_curve": self.true_curve,
            "true_mtd": self.true_mtd + 1,
            "regimens": self.labels,
            "pcs": pcs,
            "mean_sample_size": mean_sample_sizes([t.sample_sizes for t in self.trials]),
            "mean_n": float(np.mean([t.n for t in self.trials])),
            "rmse": rmse,
            "estimates": estimates,
            "predictions": {"regimens": self.prediction_labels, **predictions},
            "replacements": [asdict(r) for r in self.replacements],
            "n_replaced": len(self.replacements),
            "nlme_not_converged": sum(not t.nlme_converged for t in self.trials),
        }


class BatchProcessor:
    """Runs n_trials analyses with deterministic replacement of failed trials"""

    def __init__(self, context: TrialContext, threads: int = 1,
                 tracker: Optional[AdvancedProgressTracker] = None):
        self.context = context
        self.threads = max(1, int(threads))
        self.tracker = tracker
        n = context.scenario.n_trials
        self.jobs: List[TrialJob] = [TrialJob(slot, slot) for slot in range(n)]
        self.budget = int(math.floor(context.scenario.replacement_budget * n))
        self.next_trial_index = n
        self.replacements: List[Replacement] = []
        self.stats = {"total_jobs": n, "completed_jobs": 0, "failed_jobs": 0}

    def _execute(self, jobs: Sequence[TrialJob]) -> Dict[int, Tuple[Optional[TrialResult], Optional[str]]]:
        outcomes: Dict[int, Tuple[Optional[TrialResult], Optional[str]]] = {}
        if self.threads == 1:
            for job in jobs:
                slot, result, error = _run_job(self.context, job.slot, job.trial_index)
                outcomes[slot] = (result, error)
                self._progress(error)
            return outcomes
        with ProcessPoolExecutor(max_workers=self.threads) as executor:
            futures = [executor.submit(_run_job, self.context, job.slot, job.trial_index) for job in jobs]
            for future in as_completed(futures):
                slot, result, error = future.result()
                outcomes[slot] = (result, error)
                self._progress(error)
        return outcomes

    def _progress(self, error: Optional[str]):
        if self.tracker is not None:
            self.tracker.advance(1 if error is None else 0, error or "")

    def run(self) -> List[TrialResult]:
        results: Dict[int, TrialResult] = {}
        pending = list(self.jobs)
        while pending:
            outcomes = self._execute(pending)
            failed = []
            # replacement indices are handed out in slot order, independent of completion order
            for job in sorted(pending, key=lambda j: j.slot):
                result, error = outcomes[job.slot]
                if result is not None:
                    job.status = "completed"
                    results[job.slot] = result
                    self.stats["completed_jobs"] += 1
                else:
                    job.fail(error or "unknown error")
                    self.stats["failed_jobs"] += 1
                    failed.append(job)
            for job in failed:
                if len(self.replacements) >= self.budget:
                    raise ReplacementBudgetError(
                        f"{len(self.replacements) + 1} trials failed, budget is {self.budget}; "
                        f"last failure in trial {job.trial_index}: {job.error_message}")
                replacement = self.next_trial_index
                self.next_trial_index += 1
                logger.warning(f"Trial {job.trial_index} failed ({job.error_message}); "
                               f"replaced by trial {replacement}")
                self.replacements.append(Replacement(job.slot, job.trial_index, replacement, job.error_message))
                job.retry(replacement)
            pending = failed
        return [results[slot] for slot in range(len(self.jobs))]


def run_batch(scenario: ScenarioConfig, seed: Optional[int] = None, threads: int = 1,
              tracker: Optional[AdvancedProgressTracker] = None) -> BatchResult:
    """Full operating-characteristics study for one scenario; leaves the tracker on its report stage"""
    tracker = tracker or create_batch_tracker(scenario.n_trials, enabled=False)
    tracker.start()
    tracker.next_stage()
    try:
        context = prepare_context(scenario, seed)
        tracker.next_stage(f"tau_T = {context.ground.tau_t:.6g}")
        processor = BatchProcessor(context, threads, tracker)
        trials = processor.run()
    except DrtoxError as e:
        tracker.fail_current_stage(str(e))
        raise
    tracker.next_stage(f"{len(processor.replacements)} replaced")
    return BatchResult(scenario.name, context.design.kind, context.seed, context.ground.tau_t,
                       list(context.true_curve), context.true_mtd, context.panel.labels,
                       [r.label for r in context.new_regimens], trials, processor.replacements,
                       dict(processor.stats))


def show_batch_summary(summary: Dict[str, Any]):
    """Print the selection table and RMSE medians"""
    labels = summary["regimens"]
    true_mtd = summary["true_mtd"]
    print(f"\n{Fore.CYAN}Operating characteristics: {summary['scenario']} "
          f"({summary['design']}, {summary['n_trials']} trials){Style.RESET_ALL}")
    header = "method".ljust(14) + "".join(
        (f"*{lab}" if k + 1 == true_mtd else lab).rjust(9) for k, lab in enumerate(labels)) + "   no MTD"
    print(header)
    print("true p_T".ljust(14) + "".join(f"{p:9.3f}" for p in summary["true_curve"]))
    for method, row in summary["pcs"].items():
        print(method.ljust(14) + "".join(f"{p:9.1f}" for p in row["percent"]) + f"{row['no_mtd']:9.1f}")
    print("mean n".ljust(14) + "".join(f"{s:9.2f}" for s in summary["mean_sample_size"]))
    for method, scopes in summary["rmse"].items():
        print(f"{Fore.WHITE}RMSE {method}: median all={scopes['all']['median']:.3f}, "
              f"neighborhood={scopes['mtd-neighborhood']['median']:.3f}{Style.RESET_ALL}")
    if summary["n_replaced"]:
        print(f"{Fore.YELLOW}Replaced trials: {summary['n_replaced']}{Style.RESET_ALL}")
