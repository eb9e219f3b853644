#!/usr/bin/env python3
"""
DRtox Simulator - Main Application
Dose-regimen toxicity simulation: trial simulation, NLME and DRtox fitting,
new-regimen prediction, threshold calibration and operating characteristics.
"""

import json
import logging
import sys
from datetime import datetime
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
from colorama import Fore, Style, init

from core.errors import ConfigError, DrtoxError, InvalidArgumentError, ReplacementBudgetError
from core.escalation.trial import TrialDataset, run_trial
from core.harness.batch_processor import (MODEL_METHODS, analyse_dataset, prepare_context, prior_ess, run_batch,
                                          show_batch_summary)
from core.harness.output_organizer import OutputOrganizer, load_summary
from core.harness.progress_tracker import create_batch_tracker
from core.harness.scenario import ScenarioConfig, load_scenario
from core.inference.drtox import PosteriorDraws
from core.inference.integrate import predict_new_regimen
from core.inference.nlme import NlmeFit
from core.seeding import Stream, make_rng, trial_rng
from core.simulation.regimen import DoseRegimen

# Initialize colorama for Windows compatibility
init()

logger = logging.getLogger("drtox")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3

# ========================================================================
#                              Configuration
# ========================================================================


class Config:
    def __init__(self, config_path: str = "./config/settings.json"):
        self.config_path = Path(config_path)
        self.settings = self._load_config()
        self._setup_logging()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from JSON file"""
        if not self.config_path.exists():
            return self._create_default_config()

        try:
            with open(self.config_path, "r") as f:
                return {**self._defaults(), **json.load(f)}
        except (OSError, json.JSONDecodeError) as e:
            print(f"{Fore.RED}Error loading config: {e}{Style.RESET_ALL}")
            return self._defaults()

    @staticmethod
    def _defaults() -> Dict[str, Any]:
        return {
            "log_level": "INFO",
            "log_directory": "./logs",
            "output_directory": "./output",
            "default_scenario": "./config/scenarios/scenario1.toml",
            "threads": 1,
            "progress": True,
        }

    def _create_default_config(self) -> Dict[str, Any]:
        """Create default configuration"""
        default_config = self._defaults()
        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, "w") as f:
            json.dump(default_config, f, indent=2)

        return default_config

    def _setup_logging(self):
        """Setup logging configuration"""
        log_dir = Path(self.settings.get("log_directory", "./logs"))
        log_dir.mkdir(parents=True, exist_ok=True)

        log_file = log_dir / f"drtox_{datetime.now().strftime('%Y%m%d')}.log"

        logging.basicConfig(
            level=getattr(logging, str(self.settings.get("log_level", "INFO")).upper(), logging.INFO),
            format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            handlers=[
                logging.FileHandler(log_file),
                logging.StreamHandler(sys.stdout)
            ]
        )

    def get(self, key: str, default=None):
        """Get configuration value"""
        return self.settings.get(key, default)


# ========================================================================
#                              CLI plumbing
# ========================================================================

class AppState:
    """Global flags resolved against the application settings"""

    def __init__(self, config: Config, scenario_path: Optional[str], seed: Optional[int],
                 threads: Optional[int], out: Optional[str], quiet: bool):
        self.config = config
        self.scenario_path = scenario_path or config.get("default_scenario")
        self.seed = seed
        self.threads = threads if threads is not None else int(config.get("threads", 1))
        self.out = out
        self.quiet = quiet or not config.get("progress", True)
        self._scenario: Optional[ScenarioConfig] = None

    @property
    def scenario(self) -> ScenarioConfig:
        if self._scenario is None:
            self._scenario = load_scenario(self.scenario_path)
            logger.info(f"Loaded scenario '{self._scenario.name}' from {self.scenario_path}")
        return self._scenario

    @property
    def master_seed(self) -> int:
        return self.scenario.seed if self.seed is None else self.seed

    def organizer(self, command: str) -> OutputOrganizer:
        if self.out:
            return OutputOrganizer(self.out)
        base = Path(self.config.get("output_directory", "./output"))
        return OutputOrganizer(base / self.scenario.name / command)

    def echo(self, text: str, color: str = Fore.WHITE):
        if not self.quiet:
            click.echo(f"{color}{text}{Style.RESET_ALL}")


def handles_errors(func):
    """Map library errors to exit codes with a one-line colored message"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"{Fore.RED}Configuration error: {e}{Style.RESET_ALL}", err=True)
            sys.exit(EXIT_CONFIG)
        except ReplacementBudgetError as e:
            click.echo(f"{Fore.RED}Replacement budget exhausted: {e}{Style.RESET_ALL}", err=True)
            sys.exit(EXIT_BUDGET)
        except DrtoxError as e:
            click.echo(f"{Fore.RED}{type(e).__name__}: {e}{Style.RESET_ALL}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


def _parse_numbers(text: str, what: str) -> List[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise InvalidArgumentError(f"--{what} expects comma-separated numbers, got '{text}'")


# ========================================================================
#                               Main Logic
# ========================================================================

@click.group()
@click.option("--settings", "settings_path", default="./config/settings.json", show_default=True,
              help="Application settings (JSON)")
@click.option("--config", "scenario_path", default=None, help="Scenario file (TOML)")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Master seed (overrides the scenario)")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker processes")
@click.option("--out", default=None, help="Output directory")
@click.option("--quiet", is_flag=True, help="No progress display or console summaries")
@click.pass_context
def cli(ctx, settings_path, scenario_path, seed, threads, out, quiet):
    """DRtox dose-regimen toxicity simulator"""
    ctx.obj = AppState(Config(settings_path), scenario_path, seed, threads, out, quiet)


@cli.command("simulate-trial")
@click.option("--trial", type=click.IntRange(min=0), default=0, show_default=True, help="Trial index (seed substream)")
@click.pass_obj
@handles_errors
def simulate_trial(app: AppState, trial: int):
    """Simulate one trial and write dataset.json"""
    scenario = app.scenario
    context = prepare_context(scenario, app.master_seed)
    dataset = run_trial(context.design, context.panel, context.pop, context.ground,
                        trial_rng(context.seed, trial, Stream.PATIENTS), context.ode,
                        crm_rng=trial_rng(context.seed, trial, Stream.MCMC_CRM), n_pd=scenario.sampling.n_pd)
    organizer = app.organizer("simulate-trial")
    organizer.write_dataset(dataset)
    organizer.create_output_index()

    rec = "none" if dataset.recommended is None else context.panel.labels[dataset.recommended]
    app.echo(f"{dataset.design} trial {trial}: {dataset.n} patients, sample sizes {dataset.sample_sizes()}, "
             f"recommended {rec}", Fore.CYAN)


@cli.command()
@click.argument("dataset_path", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
@handles_errors
def fit(app: AppState, dataset_path: str):
    """NLME and both DRtox models on a trial dataset"""
    context = prepare_context(app.scenario, app.master_seed, with_ground=False)
    dataset = TrialDataset.load(dataset_path)
    if dataset.panel.labels != context.panel.labels or len(dataset.panel) != len(context.panel):
        raise InvalidArgumentError("The dataset panel does not match the scenario panel")
    analysis = analyse_dataset(context, dataset)
    organizer = app.organizer("fit")
    organizer.write_analysis(analysis, dataset)
    organizer.create_output_index()

    for method in MODEL_METHODS:
        curve = ", ".join(f"{c.label}={c.mean:.3f}" for c in analysis.curves[method])
        app.echo(f"{method}: {curve} | selected {context.panel.labels[analysis.selected[method]]}", Fore.CYAN)


@cli.command()
@click.argument("fit_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--doses", default=None, help="Comma-separated doses of the new regimen")
@click.option("--days", default=None, help="Comma-separated administration days (default: panel days)")
@click.option("--label", default="S_new", show_default=True)
@click.pass_obj
@handles_errors
def predict(app: AppState, fit_dir: str, doses: Optional[str], days: Optional[str], label: str):
    """Toxicity probability of new regimens from a fit directory"""
    scenario = app.scenario
    context = prepare_context(scenario, app.master_seed, with_ground=False)
    if doses is not None:
        day_list = _parse_numbers(days, "days") if days else scenario.panel.days
        regimens = [DoseRegimen.from_days(_parse_numbers(doses, "doses"), day_list, label)]
    else:
        regimens = context.new_regimens
    if not regimens:
        raise InvalidArgumentError("No regimen to predict: pass --doses or add [[predict]] to the scenario")

    fit_path = Path(fit_dir)
    nlme_fit = NlmeFit.load(fit_path / "fit.json")
    rng = make_rng(context.seed, Stream.PREDICT)
    predictions = {}
    for name, model in context.models().items():
        draws = PosteriorDraws.read_csv(fit_path / f"draws_{name}.csv", name)
        predictions[name] = [predict_new_regimen(nlme_fit, draws, model, r, scenario.drtox.m_predict, rng,
                                                 context.ode, keep_draws=False) for r in regimens]
    organizer = app.organizer("predict")
    organizer.write_predictions(predictions)
    organizer.create_output_index()

    for name, preds in predictions.items():
        for p in preds:
            app.echo(f"{name} {p.label}: p_T={p.mean:.3f} "
                     f"(95% CI {p.credible_interval[0]:.3f}-{p.credible_interval[1]:.3f})", Fore.CYAN)


@cli.command()
@click.pass_obj
@handles_errors
def calibrate(app: AppState):
    """Calibrate the toxicity threshold and report prior calibration and ESS"""
    context = prepare_context(app.scenario, app.master_seed)
    ess = prior_ess(context)
    payload = {
        "scenario": context.scenario.name,
        "seed": context.seed,
        "tau_t": context.ground.tau_t,
        "omega_alpha": context.ground.omega_alpha,
        "true_curve": context.true_curve,
        "true_mtd": context.true_mtd + 1,
        "regimens": context.panel.labels,
        "logistic_prior": context.logistic.prior.to_dict(),
        "hierarchical_prior": context.hierarchical.prior.to_dict(),
        "ess": {name: {"mean": r.mean, "per_regimen": r.per_regimen} for name, r in ess.items()},
    }
    organizer = app.organizer("calibrate")
    organizer.write_json("calibration.json", payload)
    organizer.create_output_index()

    app.echo(f"tau_T = {context.ground.tau_t:.6g} pg/mL; true curve "
             + ", ".join(f"{lab}={p:.3f}" for lab, p in zip(context.panel.labels, context.true_curve)), Fore.CYAN)
    for name, r in ess.items():
        app.echo(f"{name} prior ESS = {r.mean:.2f}")


@cli.command()
@click.pass_obj
@handles_errors
def batch(app: AppState):
    """Operating characteristics over n_trials simulated trials"""
    scenario = app.scenario
    tracker = create_batch_tracker(scenario.n_trials, enabled=not app.quiet)
    result = run_batch(scenario, app.master_seed, app.threads, tracker)
    organizer = app.organizer("batch")
    organizer.write_batch(result)
    organizer.create_output_index()
    tracker.complete()
    if not app.quiet:
        show_batch_summary(result.summary())


@cli.command()
@click.argument("batch_dir", type=click.Path(exists=True, file_okay=False))
@click.pass_obj
@handles_errors
def report(app: AppState, batch_dir: str):
    """CSV tables from the summary.json of a batch directory"""
    summary = load_summary(batch_dir)
    organizer = OutputOrganizer(app.out or batch_dir)
    organizer.write_report(summary)
    organizer.create_output_index()
    if not app.quiet:
        show_batch_summary(summary)


def main():
    """Main application entry point"""
    try:
        cli()
    except KeyboardInterrupt:
        print(f"\n{Fore.YELLOW}Application terminated by user.{Style.RESET_ALL}")


if __name__ == "__main__":
    main()
