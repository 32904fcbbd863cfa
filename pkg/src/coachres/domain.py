"""Core problem representation: network, train, request types, capacities, plans.

Indexing conventions: stations, legs and coaches are 1-based, matching how the
timetable and car numbers are published. Request types are identified by their
0-based position in an instance's type list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "InfeasibleAssignment",
    "Network",
    "Train",
    "RequestType",
    "Request",
    "ResidualCapacity",
    "AssignmentPlan",
    "CapacityViolation",
    "ConsistencyViolation",
    "Instance",
    "legs_of",
    "feasible_coaches",
    "apply_assignment",
    "plan_revenue",
    "validate_plan",
    "max_group_fraction",
    "make_requests",
    "first_fit_coach",
    "random_fit_coach",
]


class InfeasibleAssignment(ValueError):
    """Raised when a request is placed in a coach without enough free seats."""


@dataclass(frozen=True)
class Network:
    station_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "station_names", tuple(self.station_names))
        if len(self.station_names) < 2:
            raise ValueError("a network needs at least 2 stations")

    @property
    def leg_count(self) -> int:
        return len(self.station_names) - 1

    @property
    def legs(self) -> range:
        return range(1, self.leg_count + 1)

    def station_index(self, name: str) -> int:
        return self.station_names.index(name) + 1


@dataclass(frozen=True)
class Train:
    coach_capacities: tuple[int, ...]

    def __post_init__(self):
        caps = tuple(int(c) for c in self.coach_capacities)
        if not caps:
            raise ValueError("a train needs at least one coach")
        if min(caps) < 1:
            raise ValueError("coach capacities must be positive")
        object.__setattr__(self, "coach_capacities", caps)

    @property
    def n_coaches(self) -> int:
        return len(self.coach_capacities)

    @property
    def coaches(self) -> range:
        return range(1, self.n_coaches + 1)

    @property
    def omega(self) -> int:
        """Reference coach capacity (the largest coach)."""
        return max(self.coach_capacities)

    def capacity(self, coach: int) -> int:
        return self.coach_capacities[coach - 1]


@dataclass(frozen=True)
class RequestType:
    origin: int
    destination: int
    group_size: int
    price: int
    arrival_rate: float = 1.0

    def __post_init__(self):
        if self.origin < 1 or self.destination <= self.origin:
            raise ValueError(
                f"need 1 <= origin < destination, got {self.origin}->{self.destination}"
            )
        if self.group_size < 1:
            raise ValueError("group_size must be at least 1")
        if self.price < 0:
            raise ValueError("price must be non-negative")
        if not 0.0 < self.arrival_rate <= 1.0:
            raise ValueError("arrival_rate must lie in (0, 1]")

    @property
    def legs(self) -> range:
        return range(self.origin, self.destination)

    @property
    def n(self) -> int:
        return self.group_size


def legs_of(t: RequestType) -> range:
    """Contiguous legs ``origin .. destination-1`` traversed by type ``t``."""
    return t.legs


@dataclass(frozen=True, order=True)
class Request:
    """The ``ordinal``-th arrival of type ``type_id``, at global position ``arrival_index``."""

    arrival_index: int
    type_id: int = field(compare=False)
    ordinal: int = field(compare=False)
    rtype: RequestType = field(compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.rtype.group_size

    @property
    def price(self) -> int:
        return self.rtype.price

    @property
    def legs(self) -> range:
        return self.rtype.legs


def make_requests(types: Sequence[RequestType], type_ids: Iterable[int]) -> list[Request]:
    """Build the arrival sequence for a list of type ids, numbering ordinals per type."""
    seen: dict[int, int] = {}
    out = []
    for i, tid in enumerate(type_ids, start=1):
        seen[tid] = seen.get(tid, 0) + 1
        out.append(Request(i, int(tid), seen[tid], types[tid]))
    return out


class ResidualCapacity:
    """Free seats per coach and leg.

    ``free[c - 1, l - 1]`` holds the free seats of coach ``c`` on leg ``l``.
    ``apply_assignment`` returns a new object; ``consume`` mutates in place
    and is meant for simulation loops that own their copy.
    """

    __slots__ = ("free", "capacities")

    def __init__(self, free, capacities: Sequence[int] | None = None):
        self.free = np.array(free, dtype=np.int64)
        if self.free.ndim != 2:
            raise ValueError("free must be a coaches x legs matrix")
        if capacities is None:
            capacities = self.free.max(axis=1)
        self.capacities = np.asarray(capacities, dtype=np.int64)
        if (self.free < 0).any() or (self.free > self.capacities[:, None]).any():
            raise ValueError("free seats must lie in [0, coach capacity]")

    @classmethod
    def empty(cls, train: Train, n_legs: int) -> "ResidualCapacity":
        caps = np.array(train.coach_capacities, dtype=np.int64)
        return cls(np.repeat(caps[:, None], n_legs, axis=1), caps)

    @property
    def n_coaches(self) -> int:
        return self.free.shape[0]

    @property
    def n_legs(self) -> int:
        return self.free.shape[1]

    def copy(self) -> "ResidualCapacity":
        new = ResidualCapacity.__new__(ResidualCapacity)
        new.free = self.free.copy()
        new.capacities = self.capacities
        return new

    def fits(self, t: RequestType, coach: int) -> bool:
        row = self.free[coach - 1, t.origin - 1 : t.destination - 1]
        return bool(row.min() >= t.group_size)

    def feasible_coaches(self, t: RequestType) -> list[int]:
        block = self.free[:, t.origin - 1 : t.destination - 1]
        return (np.flatnonzero(block.min(axis=1) >= t.group_size) + 1).tolist()

    def consume(self, t: RequestType, coach: int) -> None:
        if not self.fits(t, coach):
            raise InfeasibleAssignment(
                f"coach {coach} cannot take {t.group_size} seats on legs "
                f"{t.origin}..{t.destination - 1}"
            )
        self.free[coach - 1, t.origin - 1 : t.destination - 1] -= t.group_size

    def occupied(self) -> np.ndarray:
        return self.capacities[:, None] - self.free

    def utilization(self) -> float:
        total = self.capacities.sum() * self.n_legs
        return float(self.occupied().sum() / total)

    def __eq__(self, other):
        return isinstance(other, ResidualCapacity) and np.array_equal(self.free, other.free)

    def __repr__(self):
        return f"ResidualCapacity({self.free.tolist()})"


def feasible_coaches(kappa: ResidualCapacity, t: RequestType) -> list[int]:
    """Coaches (in train order) with at least ``n(t)`` free seats on every leg of ``t``."""
    return kappa.feasible_coaches(t)


def first_fit_coach(kappa: ResidualCapacity, t: RequestType) -> int | None:
    """Lowest-numbered coach that can take ``t``, or ``None``."""
    coaches = kappa.feasible_coaches(t)
    return coaches[0] if coaches else None


def random_fit_coach(kappa: ResidualCapacity, t: RequestType, rng: np.random.Generator) -> int | None:
    """A coach drawn uniformly among those that can take ``t``, or ``None``."""
    coaches = kappa.feasible_coaches(t)
    if not coaches:
        return None
    return coaches[int(rng.integers(len(coaches)))]


def apply_assignment(kappa: ResidualCapacity, t: RequestType, c: int) -> ResidualCapacity:
    out = kappa.copy()
    out.consume(t, c)
    return out


@dataclass
class AssignmentPlan:
    assignments: dict[Request, int] = field(default_factory=dict)
    rejected: set[Request] = field(default_factory=set)

    @property
    def revenue(self) -> int:
        return plan_revenue(self)

    def accepted(self) -> list[Request]:
        return sorted(self.assignments)

    def coach_of(self, r: Request) -> int | None:
        return self.assignments.get(r)


def plan_revenue(plan: AssignmentPlan) -> int:
    return int(sum(r.price for r in plan.assignments))


@dataclass(frozen=True)
class CapacityViolation:
    request: Request
    coach: int
    leg: int
    overflow: int


@dataclass(frozen=True)
class ConsistencyViolation:
    request: Request
    reason: str


def validate_plan(
    plan: AssignmentPlan, train: Train, arrival_order: Sequence[Request], n_legs: int | None = None
) -> list:
    """Replay ``plan`` in arrival order and report every violation found.

    Violations are returned, not raised: a capacity overflow is reported once
    per (request, coach, leg) at the moment it happens.
    """
    violations: list = []
    known = set(arrival_order)
    for r in plan.assignments:
        if r in plan.rejected:
            violations.append(ConsistencyViolation(r, "both assigned and rejected"))
        if r not in known:
            violations.append(ConsistencyViolation(r, "not in arrival order"))
        c = plan.assignments[r]
        if not 1 <= c <= train.n_coaches:
            violations.append(ConsistencyViolation(r, f"unknown coach {c}"))
    for r in plan.rejected:
        if r not in known:
            violations.append(ConsistencyViolation(r, "not in arrival order"))

    if n_legs is None:
        n_legs = max((r.rtype.destination for r in arrival_order), default=2) - 1
    load = np.zeros((train.n_coaches, n_legs), dtype=np.int64)
    caps = np.array(train.coach_capacities)
    for r in sorted(arrival_order):
        c = plan.assignments.get(r)
        if c is None or not 1 <= c <= train.n_coaches:
            continue
        for leg in r.legs:
            load[c - 1, leg - 1] += r.n
            over = load[c - 1, leg - 1] - caps[c - 1]
            if over > 0:
                violations.append(CapacityViolation(r, c, leg, int(over)))
    return violations


@dataclass
class Instance:
    """A network, a train, the request types and (optionally) a fixed arrival sequence."""

    network: Network
    train: Train
    types: list[RequestType]
    arrivals: list[int] | None = None
    arrival_model: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if not self.types:
            raise ValueError("an instance needs at least one request type")
        smallest = min(self.train.coach_capacities)
        for k, t in enumerate(self.types):
            if t.destination > len(self.network.station_names):
                raise ValueError(f"type {k} ends beyond the last station")
            if t.group_size > smallest:
                raise ValueError(
                    f"type {k} has group size {t.group_size} > smallest coach ({smallest})"
                )
        if self.arrivals is not None:
            bad = [a for a in self.arrivals if not 0 <= a < len(self.types)]
            if bad:
                raise ValueError(f"unknown type ids in arrivals: {bad[:5]}")

    @property
    def n_legs(self) -> int:
        return self.network.leg_count

    def empty_capacity(self) -> ResidualCapacity:
        return ResidualCapacity.empty(self.train, self.n_legs)

    def requests(self) -> list[Request]:
        if self.arrivals is None:
            return []
        return make_requests(self.types, self.arrivals)

    # -- JSON ----------------------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "stations": list(self.network.station_names),
            "coach_capacities": list(self.train.coach_capacities),
            "types": [
                {
                    "origin": t.origin,
                    "destination": t.destination,
                    "group_size": t.group_size,
                    "price": t.price,
                    "arrival_rate": t.arrival_rate,
                }
                for t in self.types
            ],
        }
        if self.arrivals is not None:
            d["arrivals"] = list(self.arrivals)
        if self.arrival_model:
            d["arrival_model"] = self.arrival_model
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Instance":
        for key in ("stations", "coach_capacities", "types"):
            if key not in d:
                raise ValueError(f"instance is missing '{key}'")
        types = [
            RequestType(
                int(t["origin"]),
                int(t["destination"]),
                int(t["group_size"]),
                int(t["price"]),
                float(t.get("arrival_rate", 1.0)),
            )
            for t in d["types"]
        ]
        arrivals = d.get("arrivals")
        return cls(
            Network(tuple(d["stations"])),
            Train(tuple(d["coach_capacities"])),
            types,
            None if arrivals is None else [int(a) for a in arrivals],
            dict(d.get("arrival_model", {})),
            d.get("name", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Instance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def max_group_fraction(instance: Instance) -> float:
    """Largest group size over the reference (largest) coach capacity."""
    return max(t.group_size for t in instance.types) / instance.train.omega
