#!/usr/bin/env python3
"""
Deterministic random streams.

Every trial gets substream (master, trial) and, inside a trial, one fixed
stream per consumer. Replacing a failed trial uses a fresh trial index, so
the remaining trials never see different numbers.
"""

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    PATIENTS = 0
    NLME = 1
    MCMC_LOGISTIC = 2
    MCMC_HIERARCHICAL = 3
    MCMC_CRM = 4
    PREDICT = 5
    CALIBRATION = 6
    PRIOR = 7


def make_rng(master: int, *key: int) -> np.random.Generator:
    """Generator for substream `key` of the master seed"""
    seq = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def trial_rng(master: int, trial: int, stream: Stream) -> np.random.Generator:
    return make_rng(master, trial, int(stream))
