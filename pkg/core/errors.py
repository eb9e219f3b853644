#!/usr/bin/env python3
"""
Error hierarchy shared by the simulation, inference and harness layers.
Library code raises these; main.py maps them to exit statuses.
"""

from typing import Any, Dict, List, Optional, Sequence


class DrtoxError(Exception):
    """Base class for every error raised by this package"""


class InvalidArgumentError(DrtoxError, ValueError):
    """An operation was called outside its preconditions"""


class NumericIntegrationError(DrtoxError):
    """ODE step failure or non-finite state"""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (t={time:.6g} h)")
        self.time = time


class CalibrationInfeasibleError(DrtoxError):
    """No toxicity threshold places the MTD-regimen at the requested index"""

    def __init__(self, message: str, achievable: Sequence[int]):
        super().__init__(f"{message}; achievable MTD positions: {list(achievable)}")
        self.achievable = list(achievable)


class CalibrationDegenerateError(DrtoxError):
    """Prior calibration has no unique positive slope"""


class DiagnosticsError(DrtoxError):
    """MCMC chains failed the convergence checks"""

    def __init__(self, message: str, stats: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.stats = stats or {}


class FitFailureError(DrtoxError):
    """Individual MAP fit did not converge after all restarts"""

    def __init__(self, message: str, patient: Optional[int] = None):
        super().__init__(message)
        self.patient = patient


class EstimationInfeasibleError(DrtoxError):
    """Too few usable patients to estimate population parameters"""


class ModelInconsistencyError(DrtoxError):
    """Hierarchical model undefined: a toxic peak does not exceed earlier peaks"""

    def __init__(self, message: str, patients: List[int]):
        super().__init__(f"{message}: patients {patients}")
        self.patients = list(patients)


class EssInfeasibleError(DrtoxError):
    """Beta moment matching failed for every regimen"""


class ConfigError(DrtoxError):
    """Invalid scenario or settings file"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path:
            location = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class ReplacementBudgetError(DrtoxError):
    """Too many failed trials had to be replaced"""
