"""Arrival model, survival curves, the fluid LP and the a-priori pre-assignment MIP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .domain import RequestType, ResidualCapacity, Train
from .linprog import Model, Status, solve_lp, solve_mip

__all__ = [
    "DEFAULT_GROUP_SIZES",
    "OutOfHorizon",
    "EmptyPsi",
    "ArrivalModel",
    "SurvivalCurve",
    "PsiSet",
    "FluidSolution",
    "AprioriPlan",
    "default_horizon",
    "build_fluid_model",
    "solve_fluid",
    "psi_set",
    "build_apriori_model",
    "build_apriori_compact",
    "solve_apriori",
]

DEFAULT_GROUP_SIZES = (0.55, 0.25, 0.10, 0.05, 0.03, 0.02)


class OutOfHorizon(ValueError):
    """A time step outside ``1..horizon`` was requested."""


class EmptyPsi(ValueError):
    """No request copy clears the arrival-probability threshold."""


def default_horizon(total_mean: float) -> int:
    """``ceil(L + 4 sqrt(L))``: leaves a small but positive chance of more arrivals."""
    return int(math.ceil(total_mean + 4.0 * math.sqrt(total_mean)))


@dataclass(frozen=True)
class SurvivalCurve:
    values: np.ndarray  # values[i - 1] = Pr[X >= i]

    def __getitem__(self, i: int) -> float:
        return float(self.values[i - 1])

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ArrivalModel:
    """Total arrivals ``X`` over ``horizon`` steps; each arrival is of type ``t`` w.p. ``rates[t]``.

    ``distribution="poisson"``: ``X ~ Poisson(total_mean)`` conditioned on
    ``X >= 1``. ``"deterministic"``: exactly ``horizon`` arrivals.
    """

    rates: tuple[float, ...]
    horizon: int
    total_mean: float
    distribution: str = "poisson"
    group_size_distribution: tuple[float, ...] = DEFAULT_GROUP_SIZES

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(
            self, "group_size_distribution", tuple(float(g) for g in self.group_size_distribution)
        )
        if not rates or min(rates) < 0:
            raise ValueError("rates must be a non-empty list of non-negative numbers")
        if abs(sum(rates) - 1.0) > 1e-9:
            raise ValueError(f"rates must sum to 1 (got {sum(rates)!r})")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.total_mean <= 0:
            raise ValueError("total_mean must be positive")
        if self.distribution not in ("poisson", "deterministic"):
            raise ValueError("distribution must be 'poisson' or 'deterministic'")

    @classmethod
    def from_instance(cls, instance) -> "ArrivalModel":
        """Arrival model of an :class:`~coachres.domain.Instance`.

        Type rates are the types' ``arrival_rate`` values rescaled to sum to 1.
        ``total_mean`` falls back to the length of the stored arrival sequence.
        """
        model = dict(instance.arrival_model)
        raw = np.array([t.arrival_rate for t in instance.types], dtype=float)
        rates = tuple(raw / raw.sum())
        total = model.get("total_mean")
        if total is None:
            if not instance.arrivals:
                raise ValueError("instance has neither arrival_model.total_mean nor arrivals")
            total = float(len(instance.arrivals))
        horizon = int(model.get("horizon") or default_horizon(float(total)))
        return cls(
            rates,
            horizon,
            float(total),
            model.get("distribution", "poisson"),
            tuple(model.get("group_size_distribution", DEFAULT_GROUP_SIZES)),
        )

    @property
    def n_types(self) -> int:
        return len(self.rates)

    def _check_step(self, i: int) -> None:
        if not 1 <= i <= self.horizon:
            raise OutOfHorizon(f"step {i} outside 1..{self.horizon}")

    def survival(self, i: int) -> float:
        """``Pr[X >= i]`` given ``X >= 1``."""
        self._check_step(i)
        return float(self._survival_array(np.array([i]))[0])

    def _survival_array(self, steps: np.ndarray) -> np.ndarray:
        if self.distribution == "deterministic":
            return np.where(steps <= self.horizon, 1.0, 0.0)
        lam = self.total_mean
        # sf(i-1) = Pr[X >= i]; divide by Pr[X >= 1] (expm1 keeps small means accurate)
        return stats.poisson.sf(steps - 1, lam) / -math.expm1(-lam)

    def survival_curve(self) -> SurvivalCurve:
        vals = self._survival_array(np.arange(1, self.horizon + 1))
        vals[0] = 1.0
        return SurvivalCurve(vals)

    def continue_probability(self, i: int) -> float:
        """``Pr[X >= i+1 | X >= i]`` for ``1 <= i < horizon``."""
        if not 1 <= i < self.horizon:
            raise OutOfHorizon(f"step {i} outside 1..{self.horizon - 1}")
        return self.survival(i + 1) / self.survival(i)

    def continue_probabilities(self) -> np.ndarray:
        """``s_1 .. s_horizon`` with ``s_horizon = 0`` (no step after the horizon)."""
        v = self.survival_curve().values
        s = np.zeros(self.horizon)
        s[:-1] = v[1:] / v[:-1]
        return s

    def type_survival(self, t: int, j: int) -> float:
        """``Pr[X_t >= j]`` for the number ``X_t`` of type-``t`` arrivals."""
        return float(self.type_survival_array(t, np.array([j]))[0])

    def type_survival_array(self, t: int, js: np.ndarray, remaining_mean: float | None = None) -> np.ndarray:
        js = np.asarray(js)
        if (js < 1).any():
            raise ValueError("copy index j must be at least 1")
        lam_t = self.rates[t]
        if self.distribution == "deterministic" and remaining_mean is None:
            return stats.binom.sf(js - 1, self.horizon, lam_t)
        mean = (self.total_mean if remaining_mean is None else remaining_mean) * lam_t
        return stats.poisson.sf(js - 1, mean)

    def expected_remaining(self, i: int) -> float:
        """Expected arrivals at steps ``i..horizon`` given that step ``i`` is reached."""
        self._check_step(i)
        v = self.survival_curve().values
        return float(v[i - 1 :].sum() / v[i - 1])


# ---------------------------------------------------------------------------
# fluid relaxation
# ---------------------------------------------------------------------------
def _check_types(arrival: ArrivalModel, types: Sequence[RequestType]) -> None:
    if len(types) != arrival.n_types:
        raise ValueError("one arrival rate per request type is required")


def _legs(types: Sequence[RequestType]) -> list[int]:
    return sorted({leg for t in types for leg in t.legs})


def build_fluid_model(arrival: ArrivalModel, train: Train, types: Sequence[RequestType]) -> Model:
    """Per-coach fluid LP with variables ``x[t,i,c]`` laid out as a (T, I, C) array."""
    _check_types(arrival, types)
    T, I, C = len(types), arrival.horizon, train.n_coaches
    surv = arrival.survival_curve().values
    m = Model("fluid")
    obj = np.array([t.price for t in types], dtype=float)[:, None, None] * surv[None, :, None]
    obj = np.broadcast_to(obj, (T, I, C)).ravel()
    base = m.add_vars(T * I * C, 0.0, np.inf, False, obj)
    idx = base.reshape(T, I, C)
    for t in range(T):
        for i in range(I):
            m.add_constr({int(k): 1.0 for k in idx[t, i]}, "<=", arrival.rates[t])
    for leg in _legs(types):
        on = [t for t, rt in enumerate(types) if leg in rt.legs]
        for c in range(C):
            row = {int(k): float(types[t].group_size) for t in on for k in idx[t, :, c]}
            m.add_constr(row, "<=", train.coach_capacities[c], f"cap[{leg},{c + 1}]")
    return m


@dataclass
class FluidSolution:
    x: np.ndarray  # (types, steps, coaches)
    value: float

    def type_step_mass(self) -> np.ndarray:
        return self.x.sum(axis=2)


def solve_fluid(
    arrival: ArrivalModel, train: Train, types: Sequence[RequestType], *, aggregate: bool = True
) -> FluidSolution:
    """Fluid upper bound and its solution.

    The aggregated route solves over ``X[t,i] = sum_c x[t,i,c]`` with one seat
    constraint per leg against the whole train and splits each ``X[t,i]``
    across coaches in proportion to capacity; that split is feasible for the
    per-coach model and has the same objective, so both optima agree.
    """
    _check_types(arrival, types)
    T, I, C = len(types), arrival.horizon, train.n_coaches
    if not aggregate:
        m = build_fluid_model(arrival, train, types)
        sol = solve_lp(m)
        if sol.status is not Status.OPTIMAL:
            raise RuntimeError(f"fluid LP ended with status {sol.status.value}")
        return FluidSolution(sol.values.reshape(T, I, C), sol.objective)

    surv = arrival.survival_curve().values
    prices = np.array([t.price for t in types], dtype=float)
    m = Model("fluid-aggregated")
    ub = np.repeat(np.array(arrival.rates), I)
    m.add_vars(T * I, 0.0, ub, False, (prices[:, None] * surv[None, :]).ravel())
    total = float(sum(train.coach_capacities))
    for leg in _legs(types):
        row = {}
        for t, rt in enumerate(types):
            if leg in rt.legs:
                row.update({t * I + i: float(rt.group_size) for i in range(I)})
        m.add_constr(row, "<=", total, f"seats[{leg}]")
    sol = solve_lp(m)
    if sol.status is not Status.OPTIMAL:
        raise RuntimeError(f"fluid LP ended with status {sol.status.value}")
    X = np.clip(sol.values.reshape(T, I), 0.0, None)
    share = np.array(train.coach_capacities, dtype=float) / total
    return FluidSolution(X[:, :, None] * share[None, None, :], sol.objective)


# ---------------------------------------------------------------------------
# a-priori pre-assignment
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PsiSet:
    """Request copies ``(t, j)`` whose arrival probability clears the threshold."""

    members: frozenset
    probabilities: dict = field(compare=False, hash=False, default_factory=dict)

    def count(self, t: int) -> int:
        return sum(1 for (u, _) in self.members if u == t)

    def __contains__(self, item) -> bool:
        return item in self.members

    def __len__(self) -> int:
        return len(self.members)


def _copy_probabilities(arrival: ArrivalModel, threshold: float, remaining_mean=None, max_copies=None):
    probs = []
    for t in range(arrival.n_types):
        # Poisson tails vanish fast; scan far enough past the mean to cross any threshold
        mean = (arrival.total_mean if remaining_mean is None else remaining_mean) * arrival.rates[t]
        hi = int(mean + 12 * math.sqrt(mean + 1) + 20)
        if arrival.distribution == "deterministic" and remaining_mean is None:
            hi = arrival.horizon
        if max_copies is not None:
            hi = min(hi, max_copies)
        js = np.arange(1, max(hi, 1) + 1)
        p = arrival.type_survival_array(t, js, remaining_mean)
        probs.append(p[p >= threshold])
    return probs


def psi_set(arrival: ArrivalModel, threshold: float, remaining_mean: float | None = None) -> PsiSet:
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    probs = _copy_probabilities(arrival, threshold, remaining_mean)
    members = {(t, j + 1): float(p[j]) for t, p in enumerate(probs) for j in range(len(p))}
    return PsiSet(frozenset(members), members)


def _residual_free(train: Train, types: Sequence[RequestType], residual: ResidualCapacity | None):
    n_legs = max(t.destination for t in types) - 1
    if residual is None:
        return ResidualCapacity.empty(train, n_legs).free
    return residual.free


def build_apriori_model(
    arrival: ArrivalModel,
    train: Train,
    types: Sequence[RequestType],
    threshold: float = 0.001,
    *,
    residual: ResidualCapacity | None = None,
) -> tuple[Model, PsiSet]:
    """Binary ``x[t,j,c]`` over the copies in Psi; later copies only after earlier ones."""
    _check_types(arrival, types)
    psi = psi_set(arrival, threshold)
    if not psi.members:
        raise EmptyPsi(f"no request copy has arrival probability >= {threshold}")
    free = _residual_free(train, types, residual)
    m = Model("apriori")
    by_type: dict[int, list[int]] = {}
    for (t, j) in sorted(psi.members):
        by_type.setdefault(t, []).append(j)
    for t, js in by_type.items():
        for j in js:
            row = {}
            for c in train.coaches:
                k = m.add_var(f"x[{t},{j},{c}]", 0, 1, True, psi.probabilities[t, j] * types[t].price)
                row[k] = 1.0
            m.add_constr(row, "<=", 1, f"once[{t},{j}]")
        for j in js[1:]:
            row = {m.index(f"x[{t},{j},{c}]"): 1.0 for c in train.coaches}
            for c in train.coaches:
                row[m.index(f"x[{t},{j - 1},{c}]")] = -1.0
            m.add_constr(row, "<=", 0, f"order[{t},{j}]")
    for leg in _legs(types):
        for c in train.coaches:
            row = {
                m.index(f"x[{t},{j},{c}]"): float(types[t].group_size)
                for t, js in by_type.items()
                if leg in types[t].legs
                for j in js
            }
            if row:
                m.add_constr(row, "<=", float(free[c - 1, leg - 1]), f"cap[{leg},{c}]")
    return m, psi


def build_apriori_compact(
    copy_probs: Sequence[np.ndarray],
    train: Train,
    types: Sequence[RequestType],
    *,
    residual: ResidualCapacity | None = None,
) -> tuple[Model, dict, dict]:
    """Integer ``w[t,c]`` copies per coach with fractional ``u[t,j]`` tracking which copies.

    Because copy probabilities fall with ``j``, an optimal ``u`` fills the
    lowest copies first, so for integral ``w`` this has the same optimum as
    the binary per-copy model.
    """
    free = _residual_free(train, types, residual)
    m = Model("apriori-compact")
    w, u = {}, {}
    for t, probs in enumerate(copy_probs):
        if len(probs) == 0:
            continue
        n = types[t].group_size
        row = {}
        for c in train.coaches:
            cap = int(free[c - 1, types[t].origin - 1 : types[t].destination - 1].min())
            ub = min(len(probs), cap // n)
            w[t, c] = m.add_var(f"w[{t},{c}]", 0, ub, True)
            row[w[t, c]] = 1.0
        for j, p in enumerate(probs, start=1):
            u[t, j] = m.add_var(f"u[{t},{j}]", 0, 1, False, float(p) * types[t].price)
            row[u[t, j]] = -1.0
        m.add_constr(row, "==", 0, f"copies[{t}]")
    for leg in _legs(types):
        for c in train.coaches:
            row = {
                w[t, c]: float(types[t].group_size)
                for t in range(len(copy_probs))
                if (t, c) in w and leg in types[t].legs
            }
            if row:
                m.add_constr(row, "<=", float(free[c - 1, leg - 1]), f"cap[{leg},{c}]")
    return m, w, u


@dataclass
class AprioriPlan:
    """Copies planned per type and coach; copy ``j`` of type ``t`` sits in ``coach_for(t, j)``."""

    w: np.ndarray  # (types, coaches) integer copy counts
    objective: float
    status: str = "optimal"

    def planned(self, t: int) -> int:
        return int(self.w[t].sum())

    def coach_for(self, t: int, j: int) -> int | None:
        if j < 1:
            return None
        cum = np.cumsum(self.w[t])
        k = int(np.searchsorted(cum, j))
        return k + 1 if k < len(cum) else None

    def serviced(self) -> set[tuple[int, int]]:
        return {(t, j) for t in range(self.w.shape[0]) for j in range(1, self.planned(t) + 1)}


def solve_apriori(
    arrival: ArrivalModel,
    train: Train,
    types: Sequence[RequestType],
    *,
    psi_threshold: float = 0.001,
    residual: ResidualCapacity | None = None,
    remaining_mean: float | None = None,
    forced: int | None = None,
    time_limit: float | None = None,
) -> AprioriPlan:
    """Optimal pre-assignment for the copies in Psi.

    ``remaining_mean`` re-bases copy probabilities on the arrivals still to
    come; ``forced`` (a type id) adds one copy with probability 1 that must be
    planned, used when an arrival outside the current plan has to be served.
    Raises ``RuntimeError`` if the forced copy cannot be placed.
    """
    _check_types(arrival, types)
    if not 0 < psi_threshold <= 1:
        raise ValueError("psi_threshold must lie in (0, 1]")
    probs = _copy_probabilities(arrival, psi_threshold, remaining_mean)
    if forced is not None:
        probs[forced] = np.concatenate([[1.0], probs[forced]])
    if not any(len(p) for p in probs):
        raise EmptyPsi(f"no request copy has arrival probability >= {psi_threshold}")
    m, w, u = build_apriori_compact(probs, train, types, residual=residual)
    if forced is not None:
        if (forced, 1) not in u:
            raise RuntimeError("forced copy missing from the model")
        m.set_bounds(u[forced, 1], lb=1.0)
    sol = solve_mip(m, time_limit=time_limit)
    if sol.status is Status.INFEASIBLE:
        raise RuntimeError("the forced request does not fit the residual capacity")
    if sol.values is None:
        raise TimeoutError(f"a-priori solve ended with status {sol.status.value}")
    W = np.zeros((len(types), train.n_coaches), dtype=np.int64)
    for (t, c), k in w.items():
        W[t, c - 1] = int(round(sol.values[k]))
    return AprioriPlan(W, sol.objective, sol.status.value)
