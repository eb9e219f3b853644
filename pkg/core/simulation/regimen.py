#!/usr/bin/env python3
"""
Regimen Module - Dose-regimen representation
A regimen is an ordered list of doses (µg/kg) with administration times (hours).
Panels group the regimens studied in a trial.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Sequence, Tuple

from core.errors import InvalidArgumentError

HOURS_PER_DAY = 24.0


@dataclass(frozen=True)
class DoseRegimen:
    """Ordered doses with their administration times"""
    doses: Tuple[float, ...]
    times: Tuple[float, ...]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "doses", tuple(float(d) for d in self.doses))
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))

        if len(self.doses) == 0 or len(self.doses) != len(self.times):
            raise InvalidArgumentError(
                f"Regimen '{self.label}': doses and times must have equal, nonzero length "
                f"(got {len(self.doses)} and {len(self.times)})"
            )
        # all-zero regimens are placebo arms; otherwise every dose must be positive
        if any(d < 0 for d in self.doses) or (0.0 in self.doses and not self.is_placebo):
            raise InvalidArgumentError(f"Regimen '{self.label}': doses must be strictly positive")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise InvalidArgumentError(f"Regimen '{self.label}': times must be strictly increasing")
        if self.times[0] < 0:
            raise InvalidArgumentError(f"Regimen '{self.label}': times must be nonnegative")

    @classmethod
    def from_days(cls, doses: Sequence[float], days: Sequence[float], label: str = "") -> "DoseRegimen":
        """Build a regimen from administration days (converted to hours)"""
        return cls(tuple(doses), tuple(d * HOURS_PER_DAY for d in days), label)

    def __len__(self) -> int:
        return len(self.doses)

    @property
    def is_placebo(self) -> bool:
        return all(d == 0 for d in self.doses)

    @property
    def days(self) -> Tuple[float, ...]:
        return tuple(t / HOURS_PER_DAY for t in self.times)

    def describe(self) -> str:
        doses = ",".join(f"{d:g}" for d in self.doses)
        return f"{self.label or 'regimen'}=({doses})"

    def to_dict(self) -> Dict[str, Any]:
        return {"label": self.label, "doses": list(self.doses), "times": list(self.times)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DoseRegimen":
        return cls(tuple(data["doses"]), tuple(data["times"]), data.get("label", ""))


def subregimen(regimen: DoseRegimen, j: int) -> DoseRegimen:
    """First j administrations of the regimen (1-based j)"""
    if not 1 <= j <= len(regimen):
        raise InvalidArgumentError(f"Administration index {j} outside 1..{len(regimen)}")
    if j == len(regimen):
        return regimen
    return DoseRegimen(regimen.doses[:j], regimen.times[:j], regimen.label)


def truncate_at_toxicity(regimen: DoseRegimen, j_stop: int) -> DoseRegimen:
    """Regimen actually received when administration stops after j_stop"""
    return subregimen(regimen, j_stop)


@dataclass(frozen=True)
class RegimenPanel:
    """Ordered panel of regimens; panel index k is 0-based in code"""
    regimens: Tuple[DoseRegimen, ...]
    dose_set: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        regimens = tuple(self.regimens)
        if not regimens:
            raise InvalidArgumentError("Regimen panel must not be empty")
        object.__setattr__(self, "regimens", regimens)

        doses = sorted({d for r in regimens for d in r.doses})
        if self.dose_set:
            declared = tuple(sorted(set(float(d) for d in self.dose_set)))
            missing = [d for d in doses if d not in declared]
            if missing:
                raise InvalidArgumentError(f"Doses {missing} are not in the panel dose set {declared}")
            object.__setattr__(self, "dose_set", declared)
        else:
            object.__setattr__(self, "dose_set", tuple(doses))

    @classmethod
    def of(cls, regimens: Iterable[DoseRegimen]) -> "RegimenPanel":
        return cls(tuple(regimens))

    def __len__(self) -> int:
        return len(self.regimens)

    def __getitem__(self, k: int) -> DoseRegimen:
        return self.regimens[k]

    def __iter__(self):
        return iter(self.regimens)

    @property
    def labels(self) -> List[str]:
        return [r.label or f"S{k + 1}" for k, r in enumerate(self.regimens)]

    def index_of(self, regimen: DoseRegimen) -> int:
        """Panel index of a regimen (matched on doses and times)"""
        for k, r in enumerate(self.regimens):
            if r.doses == regimen.doses and r.times == regimen.times:
                return k
        raise InvalidArgumentError(f"{regimen.describe()} is not in the panel")

    def to_dict(self) -> Dict[str, Any]:
        return {"regimens": [r.to_dict() for r in self.regimens], "dose_set": list(self.dose_set)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RegimenPanel":
        return cls(tuple(DoseRegimen.from_dict(r) for r in data["regimens"]), tuple(data.get("dose_set", ())))
