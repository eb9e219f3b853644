#!/usr/bin/env python3
"""
Scenario Configuration - TOML scenario files validated with pydantic
Every default reproduces the reference cytokine model and the simulation
settings of the reference study. Regimen times are written in days and
variabilities as CV in percent. Validation failures surface as ConfigError
pointing at the line of the offending key.
"""

import re
import sys
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.errors import ConfigError
from core.escalation.crm import DEFAULT_SKELETON, CrmConfig
from core.escalation.trial import TrialDesign
from core.inference.mcmc import SamplerOptions
from core.inference.nlme import NlmeSettings
from core.simulation.pkpd import PARAM_NAMES, OdeSettings, PopulationParams
from core.simulation.regimen import DoseRegimen, RegimenPanel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_DAYS = (1, 5, 9, 13, 17, 21, 25)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RegimenConfig(_Section):
    doses: List[float]
    days: Optional[List[float]] = None
    label: str = ""


class PanelConfig(_Section):
    days: List[float] = Field(default_factory=lambda: list(DEFAULT_DAYS))
    regimens: List[RegimenConfig] = Field(min_length=1)

    def build(self) -> RegimenPanel:
        return RegimenPanel.of(_regimen(r, self.days, f"S{k + 1}") for k, r in enumerate(self.regimens))


class PopulationConfig(_Section):
    mu: Dict[str, float] = Field(default_factory=dict)
    cv_percent: Dict[str, float] = Field(default_factory=dict)
    b_pk: float = Field(0.1, ge=0)
    b_pd: float = Field(0.1, ge=0)

    @field_validator("mu", "cv_percent")
    @classmethod
    def _known_names(cls, value: Dict[str, float]) -> Dict[str, float]:
        unknown = sorted(set(value) - set(PARAM_NAMES))
        if unknown:
            raise ValueError(f"unknown parameters {unknown}; expected names from {list(PARAM_NAMES)}")
        return value

    def build(self) -> PopulationParams:
        return PopulationParams.table1(self.cv_percent, self.b_pk, self.b_pd, **self.mu)


class GroundConfig(_Section):
    omega_alpha: float = Field(0.25, ge=0)
    target_index: int = Field(4, ge=1)
    n_mc: int = Field(5000, ge=1)
    tau_t: Optional[float] = Field(None, gt=0)
    # rate the target regimen is calibrated to; defaults to delta_t
    calibration_rate: Optional[float] = Field(None, gt=0, lt=1)


class CrmSettings(_Section):
    skeleton: List[float] = Field(default_factory=lambda: list(DEFAULT_SKELETON))
    target: Optional[float] = None
    cohort_size: int = 3
    n_max: int = 30
    a_mean: float = 0.0
    a_sd: float = 2.0
    b_shape: float = 5.0
    b_rate: float = 5.0
    m_iter: int = Field(2000, ge=100)


class DesignConfig(_Section):
    kind: Literal["3+3", "crm"] = "crm"
    crm: CrmSettings = Field(default_factory=CrmSettings)


class LogisticSettings(_Section):
    k_t: int = Field(4, ge=1)
    beta0_sd: float = Field(2.0, gt=0)
    beta1_shape: float = Field(5.0, gt=0)
    calibration: Literal["neighbors", "single"] = "neighbors"
    initial_guesses: Optional[List[float]] = None


class HierarchicalSettings(_Section):
    k_50: int = Field(6, ge=1)
    mu_z_sd: float = Field(1.0, gt=0)
    tau_z_scale: float = Field(1.0, gt=0)


class DrtoxSettings(_Section):
    m_iter: int = Field(4000, ge=100)
    m_predict: int = Field(1000, ge=1)
    n_chains: int = Field(4, ge=1)
    rhat_threshold: float = Field(1.05, gt=1)
    use_planned_peaks: bool = False
    n_prior_draws: int = Field(20000, ge=100)
    logistic: LogisticSettings = Field(default_factory=LogisticSettings)
    hierarchical: HierarchicalSettings = Field(default_factory=HierarchicalSettings)


class OdeConfig(_Section):
    rtol: float = Field(1e-8, gt=0)
    atol: float = Field(1e-10, gt=0)
    method: str = "DOP853"
    points_per_window: int = Field(200, ge=200)
    horizon_days: float = Field(4.0, gt=0)
    infusion_hours: float = Field(4.0, gt=0)
    body_weight: float = Field(70.0, gt=0)

    def build(self) -> OdeSettings:
        return OdeSettings(self.rtol, self.atol, self.method, self.points_per_window,
                           self.horizon_days * 24.0, self.infusion_hours, self.body_weight)


class NlmeConfig(_Section):
    random_effects: List[str] = Field(default_factory=lambda: ["cl", "emax", "kdeg", "kprime"])
    frozen: List[str] = Field(default_factory=lambda: ["ec50", "imax", "ic50"])
    loq: float = Field(0.0, ge=0)
    max_iter: int = Field(50, ge=1)
    rel_tol: float = Field(1e-3, gt=0)
    omega_floor: float = Field(1e-4, gt=0)
    n_starts: int = Field(3, ge=0)
    rtol: float = Field(1e-6, gt=0)
    atol: float = Field(1e-8, gt=0)

    def build(self) -> NlmeSettings:
        return NlmeSettings(tuple(self.random_effects), tuple(self.frozen), self.loq, self.max_iter,
                            self.rel_tol, self.omega_floor, n_starts=self.n_starts,
                            rtol=self.rtol, atol=self.atol)


class SamplingConfig(_Section):
    n_pd: int = Field(6, ge=1)


class PredictConfig(RegimenConfig):
    pass


class OutputConfig(_Section):
    directory: str = "output"
    keep_trial_files: bool = False


class ScenarioConfig(_Section):
    name: str = "scenario"
    description: str = ""
    delta_t: float = Field(0.3, gt=0, lt=1)
    n_trials: int = Field(1000, ge=1)
    seed: int = Field(12345, ge=0)
    replacement_budget: float = Field(0.05, ge=0, le=1)
    panel: PanelConfig
    population: PopulationConfig = Field(default_factory=PopulationConfig)
    ground: GroundConfig = Field(default_factory=GroundConfig)
    design: DesignConfig = Field(default_factory=DesignConfig)
    drtox: DrtoxSettings = Field(default_factory=DrtoxSettings)
    ode: OdeConfig = Field(default_factory=OdeConfig)
    nlme: NlmeConfig = Field(default_factory=NlmeConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    predict: List[PredictConfig] = Field(default_factory=list)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ScenarioConfig":
        # domain constructors enforce regimen, population and settings invariants
        panel = self.panel.build()
        self.population.build()
        self.ode.build()
        self.nlme.build()
        for k, r in enumerate(self.predict):
            _regimen(r, self.panel.days, f"S_new{k + 1}")

        K = len(panel)
        for name, index in (("ground.target_index", self.ground.target_index),
                            ("drtox.logistic.k_t", self.drtox.logistic.k_t),
                            ("drtox.hierarchical.k_50", self.drtox.hierarchical.k_50)):
            if index > K:
                raise ValueError(f"{name} = {index} exceeds the panel size {K}")
        if self.design.kind == "crm":
            if len(self.design.crm.skeleton) != K:
                raise ValueError(f"design.crm.skeleton needs {K} values, got {len(self.design.crm.skeleton)}")
            self.crm_config()
        guesses = self.initial_guesses()
        if len(guesses) != K:
            raise ValueError(f"drtox.logistic.initial_guesses needs {K} values")
        if abs(guesses[self.drtox.logistic.k_t - 1] - self.delta_t) > 1e-9:
            raise ValueError("drtox.logistic.initial_guesses at k_t must equal delta_t")
        return self

    # ------------------------------------------------------------------ builders

    def build_panel(self) -> RegimenPanel:
        return self.panel.build()

    def build_population(self) -> PopulationParams:
        return self.population.build()

    def ode_settings(self) -> OdeSettings:
        return self.ode.build()

    def nlme_settings(self) -> NlmeSettings:
        return self.nlme.build()

    def crm_config(self) -> CrmConfig:
        c = self.design.crm
        target = c.target if c.target is not None else self.delta_t
        return CrmConfig(tuple(c.skeleton), target, c.cohort_size, c.n_max, c.a_mean, c.a_sd, c.b_shape, c.b_rate)

    def sampler_options(self, n_draws: Optional[int] = None) -> SamplerOptions:
        return SamplerOptions(n_chains=self.drtox.n_chains, n_draws=n_draws or self.drtox.m_iter,
                              rhat_threshold=self.drtox.rhat_threshold)

    def trial_design(self) -> TrialDesign:
        if self.design.kind == "3+3":
            return TrialDesign("3+3")
        return TrialDesign("crm", self.crm_config(), self.design.crm.m_iter,
                           self.sampler_options(self.design.crm.m_iter))

    def initial_guesses(self) -> List[float]:
        if self.drtox.logistic.initial_guesses is not None:
            return list(self.drtox.logistic.initial_guesses)
        return list(self.design.crm.skeleton)

    def predict_regimens(self) -> List[DoseRegimen]:
        return [_regimen(r, self.panel.days, f"S_new{k + 1}") for k, r in enumerate(self.predict)]


def _regimen(cfg: RegimenConfig, default_days: List[float], default_label: str) -> DoseRegimen:
    days = cfg.days if cfg.days is not None else default_days
    return DoseRegimen.from_days(cfg.doses, days, cfg.label or default_label)


# ========================================================================
#                      Loading with line-anchored errors
# ========================================================================

_HEADER = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.\-\"' ]+?)\s*\]\]?\s*(#.*)?$")
_ASSIGN = re.compile(r"^\s*([A-Za-z0-9_.\-\"]+)\s*=")


def key_lines(text: str) -> Dict[Tuple[Union[str, int], ...], int]:
    """Map every table and key path in a TOML document to its 1-based line"""
    lines: Dict[Tuple[Union[str, int], ...], int] = {}
    arrays: Dict[Tuple[Union[str, int], ...], int] = {}
    table: Tuple[Union[str, int], ...] = ()
    for number, line in enumerate(text.splitlines(), start=1):
        header = _HEADER.match(line)
        if header:
            parts = tuple(p.strip().strip("\"'") for p in header.group(2).split("."))
            base = _resolve(parts, arrays)
            if header.group(1) == "[[":
                index = arrays.get(base, -1) + 1
                arrays[base] = index
                table = base + (index,)
                lines.setdefault(base, number)
            else:
                table = base
            lines.setdefault(table, number)
            continue
        assign = _ASSIGN.match(line)
        if assign:
            key = tuple(p.strip("\"") for p in assign.group(1).split("."))
            lines.setdefault(table + key, number)
    return lines


def _resolve(parts: Tuple[str, ...], arrays: Dict[Tuple[Union[str, int], ...], int]) -> Tuple[Union[str, int], ...]:
    """Insert the current index after any prefix that is an array of tables"""
    path: Tuple[Union[str, int], ...] = ()
    for i, part in enumerate(parts):
        path += (part,)
        if path in arrays and i < len(parts) - 1:
            path += (arrays[path],)
    return path


def _line_for(loc: Tuple[Union[str, int], ...], lines: Dict[Tuple[Union[str, int], ...], int]) -> int:
    for n in range(len(loc), 0, -1):
        if loc[:n] in lines:
            return lines[loc[:n]]
    return 1


def parse_scenario(text: str, path: str = "<scenario>") -> ScenarioConfig:
    """Validate TOML text; raises ConfigError anchored at the offending line"""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"invalid TOML: {e}", path, int(match.group(1)) if match else 1) from e
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = tuple(first["loc"])
        dotted = ".".join(str(p) for p in loc) or "<root>"
        raise ConfigError(f"{dotted}: {first['msg']}", path, _line_for(loc, key_lines(text))) from e


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario file: {e}", str(path), 0) from e
    return parse_scenario(text, str(path))
