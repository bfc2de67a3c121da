"""
Property results: every runtime-checked inequality reports its margins as data rather than raising.
"""

from collections.abc import Iterable
from dataclasses import asdict, dataclass, field

import numpy as np

PASS = 'pass'
FAIL = 'fail'
INSUFFICIENT = 'insufficient-data'


@dataclass
class PropertyResult:
    """
    Outcome of one property over a number of trials. A margin is (bound - observed), so a
    trial passes when its margin is at least -tolerance.
    """

    name: str
    status: str
    trials: int
    worst_margin: float | None
    tolerance: float = 0.0
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == PASS

    @classmethod
    def from_margins(cls, name: str, margins: Iterable[float], tolerance: float = 0.0, **detail) -> 'PropertyResult':
        values = [float(v) for v in margins]
        if not values:
            return cls(name=name, status=INSUFFICIENT, trials=0, worst_margin=None, tolerance=tolerance, detail=detail)
        worst = min(values)
        status = PASS if worst >= -tolerance and np.isfinite(worst) else FAIL
        return cls(name=name, status=status, trials=len(values), worst_margin=worst, tolerance=tolerance, detail=detail)

    @classmethod
    def from_flags(cls, name: str, flags: Iterable[bool], **detail) -> 'PropertyResult':
        values = [bool(v) for v in flags]
        if not values:
            return cls(name=name, status=INSUFFICIENT, trials=0, worst_margin=None, detail=detail)
        failures = values.count(False)
        return cls(
            name=name,
            status=PASS if failures == 0 else FAIL,
            trials=len(values),
            worst_margin=None,
            detail={'failures': failures, **detail},
        )

    def as_dict(self) -> dict:
        return asdict(self)


def all_passed(results: Iterable[PropertyResult]) -> bool:
    """insufficient-data is not a pass"""
    return all(result.passed for result in results)
