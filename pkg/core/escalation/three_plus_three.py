#!/usr/bin/env python3
"""
3+3 Design - Rule-based escalation over the regimen panel
Cohorts of three; a level with at most one toxicity out of six (or none out
of three) is acceptable, two or more toxicities make it too toxic.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

from core.errors import InvalidArgumentError

COHORT_SIZE = 3


class Decision(str, Enum):
    ESCALATE = "escalate"
    STAY_EXPAND = "stay-expand"
    DEESCALATE_OR_STOP = "deescalate-or-stop"
    DECLARE = "declare"


@dataclass(frozen=True)
class StepResult:
    """Next cohort goes to next_index; DECLARE carries mtd_index, a stop carries neither"""
    decision: Decision
    next_index: Optional[int] = None
    mtd_index: Optional[int] = None

    @property
    def finished(self) -> bool:
        return self.next_index is None

    @property
    def no_mtd(self) -> bool:
        return self.decision is Decision.DEESCALATE_OR_STOP and self.next_index is None


def _validate(counts: Sequence[Tuple[int, int]], current: int) -> None:
    if not 0 <= current < len(counts):
        raise InvalidArgumentError(f"Current level {current + 1} outside 1..{len(counts)}")
    for k, (treated, tox) in enumerate(counts):
        if treated not in (0, 3, 6) or not 0 <= tox <= treated:
            raise InvalidArgumentError(f"Inconsistent counts at level {k + 1}: {tox}/{treated}")


def _too_toxic(treated: int, tox: int) -> bool:
    return treated > 0 and tox >= 2


def three_plus_three_step(counts: Sequence[Tuple[int, int]], current: int) -> StepResult:
    """One 3+3 decision from (treated, toxicities) per level and the 0-based current level"""
    _validate(counts, current)
    treated, tox = counts[current]

    if treated == 0:
        return StepResult(Decision.STAY_EXPAND, next_index=current)

    if _too_toxic(treated, tox):
        if current == 0:
            return StepResult(Decision.DEESCALATE_OR_STOP)
        lower = current - 1
        if counts[lower][0] == 6:
            return StepResult(Decision.DECLARE, mtd_index=lower)
        return StepResult(Decision.DEESCALATE_OR_STOP, next_index=lower)

    if treated == 3 and tox == 1:
        return StepResult(Decision.STAY_EXPAND, next_index=current)

    # 0/3 or at most 1/6
    if current == len(counts) - 1:
        return StepResult(Decision.DECLARE, mtd_index=current)
    upper = counts[current + 1]
    if _too_toxic(*upper):
        return StepResult(Decision.DECLARE, mtd_index=current)
    return StepResult(Decision.ESCALATE, next_index=current + 1)
