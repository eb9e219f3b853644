#!/usr/bin/env python3
"""
PK/PD Module - Drug concentration and cytokine simulation
One-compartment infusion PK in closed form, cytokine release with priming
inhibition integrated piecewise between administration events, and the
per-administration cytokine peaks used as the toxicity endpoint.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from core.errors import InvalidArgumentError, NumericIntegrationError
from core.simulation.regimen import DoseRegimen, RegimenPanel

logger = logging.getLogger(__name__)

# Component order used by every parameter vector in the package
PARAM_NAMES: Tuple[str, ...] = ("cl", "v", "emax", "ec50", "h", "imax", "ic50", "kdeg", "kprime")
PK_NAMES = PARAM_NAMES[:2]
PD_NAMES = PARAM_NAMES[2:]

# Fixed effects and CVs (%) of the reference cytokine model
TABLE1_MU: Dict[str, float] = {
    "cl": 1.36, "v": 3.4, "emax": 3.59e5, "ec50": 1.0e4, "h": 0.92,
    "imax": 0.995, "ic50": 1.82e4, "kdeg": 0.18, "kprime": 2.83,
}
TABLE1_CV: Dict[str, float] = {
    "cl": 41.9, "v": 0.0, "emax": 14.0, "ec50": 0.0, "h": 0.0,
    "imax": 0.0, "ic50": 0.0, "kdeg": 13.0, "kprime": 36.0,
}


def cv_to_omega(cv_percent: float) -> float:
    """Log-normal SD giving the requested coefficient of variation"""
    cv = cv_percent / 100.0
    return math.sqrt(math.log1p(cv * cv))


# ========================================================================
#                              Parameter types
# ========================================================================

@dataclass(frozen=True)
class PkParams:
    cl: float
    v: float

    def __post_init__(self):
        if not (self.cl > 0 and self.v > 0):
            raise InvalidArgumentError(f"PK parameters must be positive (cl={self.cl}, v={self.v})")

    @property
    def ke(self) -> float:
        return self.cl / self.v


@dataclass(frozen=True)
class PdParams:
    emax: float
    ec50: float
    h: float
    imax: float
    ic50: float
    kdeg: float
    kprime: float

    def __post_init__(self):
        # emax = 0 is accepted as a "no release" model
        positive = (self.ec50, self.h, self.imax, self.ic50, self.kdeg, self.kprime)
        if self.emax < 0 or any(not p > 0 for p in positive):
            raise InvalidArgumentError(f"PD parameters must be positive: {self}")
        if self.imax >= 1:
            raise InvalidArgumentError(f"imax must be < 1 (got {self.imax})")


@dataclass(frozen=True)
class IndividualParams:
    pk: PkParams
    pd: PdParams

    def as_vector(self) -> np.ndarray:
        return np.array([self.pk.cl, self.pk.v, self.pd.emax, self.pd.ec50, self.pd.h,
                         self.pd.imax, self.pd.ic50, self.pd.kdeg, self.pd.kprime], dtype=float)

    @classmethod
    def from_vector(cls, values: Sequence[float]) -> "IndividualParams":
        v = [float(x) for x in values]
        if len(v) != len(PARAM_NAMES):
            raise InvalidArgumentError(f"Expected {len(PARAM_NAMES)} parameters, got {len(v)}")
        return cls(PkParams(v[0], v[1]), PdParams(*v[2:]))

    def to_dict(self) -> Dict[str, float]:
        return dict(zip(PARAM_NAMES, self.as_vector().tolist()))

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "IndividualParams":
        return cls.from_vector([data[name] for name in PARAM_NAMES])


@dataclass(frozen=True)
class PopulationParams:
    """Fixed effects mu, diagonal log-scale variances omega, proportional errors"""
    mu: Tuple[float, ...]
    omega: Tuple[float, ...]
    b_pk: float = 0.1
    b_pd: float = 0.1

    def __post_init__(self):
        mu = tuple(float(x) for x in self.mu)
        omega = tuple(float(x) for x in self.omega)
        if len(mu) != len(PARAM_NAMES) or len(omega) != len(PARAM_NAMES):
            raise InvalidArgumentError("mu and omega must cover every PK/PD component")
        if any(w < 0 for w in omega):
            raise InvalidArgumentError(f"omega entries must be >= 0: {omega}")
        if self.b_pk < 0 or self.b_pd < 0:
            raise InvalidArgumentError("residual error SDs must be >= 0")
        # validates positivity of the fixed effects
        IndividualParams.from_vector(mu)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def table1(cls, cv_percent: Optional[Dict[str, float]] = None,
               b_pk: float = 0.1, b_pd: float = 0.1, **overrides: float) -> "PopulationParams":
        """Reference population; CVs in percent, fixed-effect overrides by name"""
        cvs = dict(TABLE1_CV)
        cvs.update(cv_percent or {})
        mu = dict(TABLE1_MU)
        mu.update(overrides)
        return cls(tuple(mu[n] for n in PARAM_NAMES),
                   tuple(cv_to_omega(cvs[n]) ** 2 for n in PARAM_NAMES), b_pk, b_pd)

    @property
    def mu_array(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=float)

    @property
    def omega_array(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=float)

    @property
    def random_components(self) -> List[int]:
        return [i for i, w in enumerate(self.omega) if w > 0]

    def typical(self) -> IndividualParams:
        return IndividualParams.from_vector(self.mu)

    def with_updates(self, mu: Optional[Sequence[float]] = None,
                     omega: Optional[Sequence[float]] = None) -> "PopulationParams":
        return PopulationParams(tuple(mu) if mu is not None else self.mu,
                                tuple(omega) if omega is not None else self.omega,
                                self.b_pk, self.b_pd)

    def to_dict(self) -> Dict[str, Any]:
        return {"mu": dict(zip(PARAM_NAMES, self.mu)), "omega": dict(zip(PARAM_NAMES, self.omega)),
                "b_pk": self.b_pk, "b_pd": self.b_pd}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PopulationParams":
        return cls(tuple(data["mu"][n] for n in PARAM_NAMES),
                   tuple(data["omega"][n] for n in PARAM_NAMES),
                   data.get("b_pk", 0.1), data.get("b_pd", 0.1))


@dataclass(frozen=True)
class OdeSettings:
    """Integration and observation settings shared by every simulation"""
    rtol: float = 1e-8
    atol: float = 1e-10
    method: str = "DOP853"
    points_per_window: int = 200
    horizon_hours: float = 96.0
    infusion_hours: float = 4.0
    body_weight: float = 70.0

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise InvalidArgumentError("ODE tolerances must be positive")
        if self.infusion_hours <= 0 or self.body_weight <= 0 or self.horizon_hours <= 0:
            raise InvalidArgumentError("infusion duration, body weight and horizon must be positive")
        if self.points_per_window < 200:
            raise InvalidArgumentError("points_per_window must be at least 200")

    def halved(self) -> "OdeSettings":
        return OdeSettings(self.rtol / 2, self.atol / 2, self.method, self.points_per_window,
                           self.horizon_hours, self.infusion_hours, self.body_weight)


# ========================================================================
#                                 PK model
# ========================================================================

def concentration(pk: PkParams, regimen: DoseRegimen, body_weight: float,
                  infusion_hours: float, t: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """Closed-form superposition of constant-rate infusions (ng/mL)"""
    if infusion_hours <= 0:
        raise InvalidArgumentError("infusion_hours must be positive")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise InvalidArgumentError("time must be nonnegative")

    ke = pk.ke
    doses = np.asarray(regimen.doses)
    rate = doses * body_weight / infusion_hours  # µg/h
    plateau = rate / pk.cl                      # µg/L == ng/mL

    dt = t_arr[..., None] - np.asarray(regimen.times)
    during = (dt >= 0) & (dt < infusion_hours)
    after = dt >= infusion_hours
    rise = plateau * -np.expm1(-ke * np.clip(dt, 0.0, infusion_hours))
    decay = plateau * -np.expm1(-ke * infusion_hours) * np.exp(-ke * np.clip(dt - infusion_hours, 0.0, None))
    conc = np.where(during, rise, 0.0) + np.where(after, decay, 0.0)
    total = conc.sum(axis=-1)
    return float(total) if np.ndim(t) == 0 else total


# ========================================================================
#                                 PD model
# ========================================================================

@dataclass
class PdProfile:
    """Dense cytokine profile on a refined grid"""
    grid: np.ndarray
    conc: np.ndarray
    cytokine: np.ndarray
    auc_e: np.ndarray
    solution: Optional["PiecewiseSolution"] = field(default=None, repr=False, compare=False)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"time_h": self.grid, "conc_ng_ml": self.conc,
                             "cytokine_pg_ml": self.cytokine, "auc_e": self.auc_e})

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.10g")
        return path


class PiecewiseSolution:
    """Dense output stitched across the event-free integration segments"""

    def __init__(self, start: float, end: float):
        self.start = start
        self.end = end
        self.breaks: List[float] = []
        self.pieces: List[Any] = []

    def add(self, t0: float, dense) -> None:
        self.breaks.append(t0)
        self.pieces.append(dense)

    def __call__(self, t: Union[float, np.ndarray]) -> np.ndarray:
        """State (E, AUC_E) at t; zero before the first administration"""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((2, t_arr.size))
        if not self.pieces:
            return out
        idx = np.searchsorted(self.breaks, t_arr, side="right") - 1
        for p in np.unique(idx):
            if p < 0:
                continue
            mask = idx == p
            out[:, mask] = self.pieces[p](np.clip(t_arr[mask], None, self.end))
        return out


def _pd_rhs(t: float, y: np.ndarray, theta: Tuple[float, ...], doses: Tuple[float, ...],
            times: Tuple[float, ...], body_weight: float, infusion_hours: float, n_given: int):
    """Cytokine release stimulated by C(t), inhibited by primed cytokine exposure"""
    cl, v, emax, ec50, h, imax, ic50, kdeg, kprime = theta
    ke = cl / v
    conc = 0.0
    for j in range(n_given):
        dt = t - times[j]
        if dt < 0:
            break
        plateau = doses[j] * body_weight / infusion_hours / cl
        if dt < infusion_hours:
            conc += plateau * -math.expm1(-ke * dt)
        else:
            conc += plateau * -math.expm1(-ke * infusion_hours) * math.exp(-ke * (dt - infusion_hours))

    e, auc = y[0], y[1]
    stim = 0.0
    if conc > 0 and emax > 0:
        ch = conc ** h
        stim = emax * ch / (ec50 ** h + ch)
    ic50_primed = ic50 / kprime ** (n_given - 1)
    auc_pos = max(auc, 0.0)
    inhibition = 1.0 - imax * auc_pos / (ic50_primed + auc_pos)
    return [stim * inhibition - kdeg * e, e]


def _event_points(regimen: DoseRegimen, settings: OdeSettings) -> Tuple[List[float], float]:
    end = regimen.times[-1] + settings.horizon_hours
    points = set()
    for t in regimen.times:
        points.add(t)
        if t + settings.infusion_hours < end:
            points.add(t + settings.infusion_hours)
    return sorted(points), end


def solve_pd(theta: IndividualParams, regimen: DoseRegimen, settings: OdeSettings) -> PiecewiseSolution:
    """Integrate (E, AUC_E) segment by segment between administration events"""
    points, end = _event_points(regimen, settings)
    solution = PiecewiseSolution(regimen.times[0], end)
    if theta.pd.emax == 0 or regimen.is_placebo:
        return solution

    vec = tuple(theta.as_vector().tolist())
    y = np.zeros(2)
    bounds = points + [end]
    for a, b in zip(bounds[:-1], bounds[1:]):
        n_given = sum(1 for t in regimen.times if t <= a)
        try:
            sol = solve_ivp(_pd_rhs, (a, b), y, method=settings.method, rtol=settings.rtol,
                            atol=settings.atol, dense_output=True,
                            args=(vec, regimen.doses, regimen.times, settings.body_weight,
                                  settings.infusion_hours, n_given))
        except (ValueError, ArithmeticError) as e:
            raise NumericIntegrationError(f"PD integration failed: {e}", a) from e
        if not sol.success or not np.all(np.isfinite(sol.y)):
            failed_at = float(sol.t[-1]) if sol.t.size else a
            raise NumericIntegrationError(f"PD integration failed: {sol.message}", failed_at)
        solution.add(a, sol.sol)
        y = sol.y[:, -1]
    return solution


def _window_bounds(regimen: DoseRegimen, settings: OdeSettings) -> List[Tuple[float, float]]:
    end = regimen.times[-1] + settings.horizon_hours
    starts = list(regimen.times)
    return list(zip(starts, starts[1:] + [end]))


def _dense_grid(regimen: DoseRegimen, settings: OdeSettings) -> np.ndarray:
    pieces = []
    if regimen.times[0] > 0:
        pieces.append(np.array([0.0]))
    windows = _window_bounds(regimen, settings)
    for a, b in windows:
        pieces.append(np.linspace(a, b, settings.points_per_window, endpoint=False))
        # finer resolution over the infusion, where the peaks sit
        pieces.append(np.linspace(a, min(a + 2 * settings.infusion_hours, b), settings.points_per_window // 2,
                                  endpoint=False))
    pieces.append(np.array([windows[-1][1]]))
    return np.unique(np.concatenate(pieces))


def simulate_pd(theta: IndividualParams, regimen: DoseRegimen, settings: OdeSettings) -> PdProfile:
    """Concentration, cytokine and cumulative exposure on the dense grid"""
    solution = solve_pd(theta, regimen, settings)
    grid = _dense_grid(regimen, settings)
    state = solution(grid)
    conc = concentration(theta.pk, regimen, settings.body_weight, settings.infusion_hours, grid)
    cytokine = np.clip(state[0], 0.0, None)
    auc_e = np.maximum.accumulate(np.clip(state[1], 0.0, None))
    return PdProfile(grid, np.asarray(conc), cytokine, auc_e, solution)


def _refine_peak(solution: PiecewiseSolution, grid: np.ndarray, values: np.ndarray, i: int,
                 window: Tuple[float, float]) -> float:
    """Golden-section refinement around a grid argmax"""
    best = float(values[i])
    if i == 0 or i == len(grid) - 1 or best <= 0 or grid[i - 1] < window[0] or grid[i + 1] > window[1]:
        return best
    objective = lambda t: -float(solution(t)[0, 0])  # noqa: E731
    try:
        res = minimize_scalar(objective, bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden",
                              options={"xtol": 1e-10})
    except ValueError:
        return best
    if grid[i - 1] <= res.x <= grid[i + 1]:
        best = max(best, -float(res.fun))
    return best


def peaks_from_profile(profile: PdProfile, regimen: DoseRegimen, settings: OdeSettings) -> List[float]:
    """Maximum cytokine over each administration window"""
    peaks = []
    for a, b in _window_bounds(regimen, settings):
        mask = (profile.grid >= a) & (profile.grid < b)
        if b == profile.grid[-1]:
            mask |= profile.grid == b
        idx = np.flatnonzero(mask)
        values = profile.cytokine[idx]
        if values.size == 0 or profile.solution is None or not profile.solution.pieces:
            peaks.append(float(values.max()) if values.size else 0.0)
            continue
        local = int(np.argmax(values))
        refined = _refine_peak(profile.solution, profile.grid, profile.cytokine, int(idx[local]), (a, b))
        peaks.append(max(0.0, refined))
    return peaks


def cytokine_peaks(theta: IndividualParams, regimen: DoseRegimen, settings: OdeSettings) -> List[float]:
    """Per-administration peaks r_1..r_J"""
    return peaks_from_profile(simulate_pd(theta, regimen, settings), regimen, settings)


def max_peak(peaks: Sequence[float]) -> float:
    if len(peaks) == 0:
        raise InvalidArgumentError("max_peak needs at least one peak")
    return float(max(peaks))


# ========================================================================
#                       Population sampling and noise
# ========================================================================

def sample_eta(pop: PopulationParams, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    shape = (len(PARAM_NAMES),) if n is None else (n, len(PARAM_NAMES))
    return rng.standard_normal(shape) * np.sqrt(pop.omega_array)


def sample_individual(pop: PopulationParams, rng: np.random.Generator) -> IndividualParams:
    """theta = mu * exp(eta), eta ~ N(0, diag(omega))"""
    return IndividualParams.from_vector(pop.mu_array * np.exp(sample_eta(pop, rng)))


def sample_individuals(pop: PopulationParams, n: int, rng: np.random.Generator) -> List[IndividualParams]:
    thetas = pop.mu_array * np.exp(sample_eta(pop, rng, n))
    return [IndividualParams.from_vector(row) for row in thetas]


@dataclass(frozen=True)
class SampleTimes:
    pk: Tuple[float, ...]
    pd: Tuple[float, ...]


@dataclass
class ObservedSamples:
    pk_times: np.ndarray
    pk_values: np.ndarray
    pd_times: np.ndarray
    pd_values: np.ndarray

    def to_dict(self) -> Dict[str, List[float]]:
        return {"pk_times": self.pk_times.tolist(), "pk_values": self.pk_values.tolist(),
                "pd_times": self.pd_times.tolist(), "pd_values": self.pd_values.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "ObservedSamples":
        return cls(*(np.asarray(data[k], dtype=float) for k in ("pk_times", "pk_values", "pd_times", "pd_values")))

    @property
    def n_obs(self) -> int:
        return int(self.pk_times.size + self.pd_times.size)


def sampling_schedule(regimen: DoseRegimen, settings: OdeSettings, n_pd: int = 6) -> SampleTimes:
    """End-of-infusion and trough concentrations; n_pd cytokine samples per window"""
    pk, pdt = [], []
    for a, b in _window_bounds(regimen, settings):
        pk.append(min(a + settings.infusion_hours, b))
        pk.append(b)
        pdt.extend(a + (m - 0.5) / n_pd * (b - a) for m in range(1, n_pd + 1))
    return SampleTimes(tuple(pk), tuple(pdt))


def model_at(profile: PdProfile, times: SampleTimes) -> Tuple[np.ndarray, np.ndarray]:
    """Noiseless concentration and cytokine at the sampling times"""
    pk_t = np.asarray(times.pk, dtype=float)
    pd_t = np.asarray(times.pd, dtype=float)
    lo, hi = profile.grid[0], profile.grid[-1]
    for t in (pk_t, pd_t):
        if t.size and (t.min() < lo or t.max() > hi):
            raise InvalidArgumentError(f"Sample times must lie within [{lo}, {hi}] h")
    return np.interp(pk_t, profile.grid, profile.conc), np.interp(pd_t, profile.grid, profile.cytokine)


def observe_with_error(profile: PdProfile, sample_times: SampleTimes, pop: PopulationParams,
                       rng: np.random.Generator) -> ObservedSamples:
    """Proportional residual error: y = f * (1 + b * eps)"""
    conc, cyt = model_at(profile, sample_times)
    pk_obs = conc * (1.0 + pop.b_pk * rng.standard_normal(conc.shape))
    pd_obs = cyt * (1.0 + pop.b_pd * rng.standard_normal(cyt.shape))
    return ObservedSamples(np.asarray(sample_times.pk, dtype=float), pk_obs,
                           np.asarray(sample_times.pd, dtype=float), pd_obs)


def reference_peaks(pop: PopulationParams, panel: RegimenPanel, settings: OdeSettings) -> List[float]:
    """Maximum peak of every panel regimen at the fixed effects"""
    typical = pop.typical()
    refs = [max_peak(cytokine_peaks(typical, regimen, settings)) for regimen in panel]
    for k in range(1, len(refs)):
        if refs[k] < refs[k - 1]:
            logger.warning(f"Reference peaks not monotone at {panel.labels[k]}: "
                           f"{refs[k]:.4g} < {refs[k - 1]:.4g}")
    return refs
