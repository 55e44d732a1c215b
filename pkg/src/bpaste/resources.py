"""Multi-dimensional resource profiles and the co-run interference model.

All demands and capacities are vectors over a fixed dimension set. Values
are fractions of one device unit per dimension (a slot count may exceed 1.0
when the device exposes multiple slots).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

DIMENSIONS: tuple[str, ...] = ("cpu", "mem", "io", "slots")

PROPORTIONAL_SHARE = "proportional_share"
LINEAR_COEFFICIENT = "linear_coefficient"


@dataclass(frozen=True)
class ResourceProfile:
    """Nonnegative demand vector over ``DIMENSIONS``."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(DIMENSIONS):
            raise ValueError(
                f"profile needs exactly {len(DIMENSIONS)} entries, got {len(self.values)}"
            )
        if any(v < 0 for v in self.values):
            raise ValueError(f"negative resource demand: {self.values}")

    @classmethod
    def zero(cls) -> ResourceProfile:
        return cls((0.0,) * len(DIMENSIONS))

    @classmethod
    def from_mapping(cls, entries: Mapping[str, float]) -> ResourceProfile:
        unknown = set(entries) - set(DIMENSIONS)
        if unknown:
            raise ValueError(f"unknown resource dimensions: {sorted(unknown)}")
        return cls(tuple(float(entries.get(d, 0.0)) for d in DIMENSIONS))

    def as_mapping(self) -> dict[str, float]:
        return dict(zip(DIMENSIONS, self.values))

    def __add__(self, other: ResourceProfile) -> ResourceProfile:
        return ResourceProfile(tuple(a + b for a, b in zip(self.values, other.values)))

    def __sub__(self, other: ResourceProfile) -> ResourceProfile:
        # Clamp at zero: subtraction is used for residual-capacity bookkeeping.
        return ResourceProfile(
            tuple(max(0.0, a - b) for a, b in zip(self.values, other.values))
        )

    def combine_max(self, other: ResourceProfile) -> ResourceProfile:
        return ResourceProfile(tuple(max(a, b) for a, b in zip(self.values, other.values)))

    def combine_min(self, other: ResourceProfile) -> ResourceProfile:
        return ResourceProfile(tuple(min(a, b) for a, b in zip(self.values, other.values)))

    def fits_within(self, cap: ResourceProfile, tol: float = 1e-9) -> bool:
        return all(a <= b + tol for a, b in zip(self.values, cap.values))

    def dominates(self, other: ResourceProfile, tol: float = 1e-9) -> bool:
        return all(a + tol >= b for a, b in zip(self.values, other.values))

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.values)


def total_demand(profiles: Iterable[ResourceProfile]) -> ResourceProfile:
    acc = ResourceProfile.zero()
    for p in profiles:
        acc = acc + p
    return acc


@dataclass(frozen=True)
class InterferenceModel:
    """Slowdown model for co-running work against a device capacity.

    ``proportional_share`` charges the worst per-dimension oversubscription:
    slowdown = max over dimensions of max(1, total_demand / capacity).
    ``linear_coefficient`` maps normalized utilization through a square
    matrix first (identity matrix reproduces proportional sharing).

    A job with no co-runners is never slowed (slowdown exactly 1.0).
    """

    capacity: ResourceProfile
    mode: str = PROPORTIONAL_SHARE
    coefficients: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.mode not in (PROPORTIONAL_SHARE, LINEAR_COEFFICIENT):
            raise ValueError(f"unknown interference mode: {self.mode!r}")
        if any(c <= 0 for c in self.capacity.values):
            raise ValueError("capacity must be positive in every dimension")
        if self.mode == LINEAR_COEFFICIENT:
            n = len(DIMENSIONS)
            m = self.coefficients
            if m is None or len(m) != n or any(len(row) != n for row in m):
                raise ValueError("linear_coefficient mode needs a full square matrix")

    def slowdown(self, subject: ResourceProfile, corunners: Iterable[ResourceProfile]) -> float:
        """Slowdown factor for ``subject`` when run alongside ``corunners``."""
        others = [p for p in corunners]
        if not others:
            return 1.0
        total = total_demand(others) + subject
        normalized = [t / c for t, c in zip(total.values, self.capacity.values)]
        if self.mode == PROPORTIONAL_SHARE:
            return max(1.0, max(normalized))
        assert self.coefficients is not None
        mapped = [
            sum(row[j] * normalized[j] for j in range(len(DIMENSIONS)))
            for row in self.coefficients
        ]
        return max(1.0, max(mapped))
