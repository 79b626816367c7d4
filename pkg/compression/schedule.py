"""Primitive-count schedule of the rate levels."""

import math
from dataclasses import dataclass
from typing import Tuple

from splatrestore.errors import InputError


@dataclass(frozen=True)
class LevelSchedule:
    """Cardinalities of every rate level, lowest rate first."""

    c_min: int
    levels: int
    cardinalities: Tuple[int, ...]

    @property
    def n_full(self) -> int:
        return self.cardinalities[-1]

    def __getitem__(self, level: int) -> int:
        if not 0 <= level < self.levels:
            raise InputError(f"level {level} outside 0..{self.levels - 1}")
        return self.cardinalities[level]

    def to_dict(self):
        return {"c_min": self.c_min, "levels": self.levels, "cardinalities": list(self.cardinalities)}


def level_schedule(n_full: int, c_min: int, levels: int) -> LevelSchedule:
    """Geometric interpolation between ``c_min`` and ``n_full`` in log space.

    Level ``l`` keeps round(c_min * exp(l * (ln n_full - ln c_min) / (levels - 1)))
    primitives, rounding half up. Both endpoints are exact.
    """
    if c_min < 1:
        raise InputError(f"c_min must be at least 1, got {c_min}")
    if levels < 2:
        raise InputError(f"need at least 2 levels, got {levels}")
    if n_full < c_min:
        raise InputError(f"full primitive count {n_full} is below c_min {c_min}")
    step = (math.log(n_full) - math.log(c_min)) / (levels - 1)
    counts = [int(math.floor(c_min * math.exp(level * step) + 0.5)) for level in range(levels)]
    counts[0], counts[-1] = c_min, n_full
    return LevelSchedule(c_min=c_min, levels=levels, cardinalities=tuple(counts))
