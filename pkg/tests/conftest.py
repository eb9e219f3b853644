#!/usr/bin/env python3
"""
Shared fixtures for the DRtox test suite
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.simulation.pkpd import OdeSettings, PopulationParams
from core.simulation.regimen import DoseRegimen, RegimenPanel

DAYS = (1, 5, 9, 13, 17, 21, 25)
STEPPED = (1, 5, 10, 25, 25, 25, 25)
FLAT = (25,) * 7


@pytest.fixture
def temp_dir():
    """Create temporary directory for test output"""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield Path(temp_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def ode():
    return OdeSettings()


@pytest.fixture
def pop():
    """Reference population with its default residual errors"""
    return PopulationParams.table1()


@pytest.fixture
def pop_fixed():
    """Reference fixed effects without between-patient variability"""
    return PopulationParams.table1({name: 0.0 for name in ("cl", "emax", "kdeg", "kprime")})


@pytest.fixture
def stepped():
    return DoseRegimen.from_days(STEPPED, DAYS, "stepped")


@pytest.fixture
def flat():
    return DoseRegimen.from_days(FLAT, DAYS, "flat")


@pytest.fixture
def short_panel():
    """Three two-administration regimens, cheap to integrate"""
    return RegimenPanel.of(DoseRegimen.from_days(doses, (1, 5)) for doses in ((2, 5), (5, 10), (10, 20)))


@pytest.fixture
def six_panel():
    """One step-up shape scaled by increasing first doses"""
    return RegimenPanel.of(DoseRegimen.from_days((d, 2 * d, 3 * d, 4 * d, 4 * d, 4 * d, 4 * d), DAYS)
                           for d in (6, 7, 8, 10, 12, 14))
