"""Offline formulations: the plain assignment MIP, its LP relaxation, the FCFS model
with fairness variables, and the branch-and-cut driver used for fixed arrival orders.

Variable names follow one scheme so cuts can be written symbolically:
``x[i,c]`` (request with arrival index ``i`` sits in coach ``c``), ``y[i]``
(request accepted) and ``z[i,l,c]`` (coach ``c`` is full on leg ``l`` when
request ``i`` arrives).
"""

from __future__ import annotations

import json
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .domain import (
    AssignmentPlan,
    Request,
    ResidualCapacity,
    Train,
    random_fit_coach,
)
from .linprog import LinearCut, Model, Solution, Status, solve_lp, solve_mip

__all__ = [
    "FairnessVariables",
    "FairnessCut",
    "DominanceRelation",
    "OfflineLPResult",
    "FCFSConfig",
    "FCFSResult",
    "build_offline_model",
    "solve_offline",
    "packable",
    "solve_offline_lp",
    "build_fcfs_model",
    "fcfs_replay",
    "separate_unfair_rejection",
    "fairness_constraints",
    "forward_filtering_cuts",
    "dominance_relation",
    "dominance_cuts",
    "preprocess_forced_assignments",
    "solve_offline_fcfs",
]


def _xname(r: Request, c: int) -> str:
    return f"x[{r.arrival_index},{c}]"


def _yname(r: Request) -> str:
    return f"y[{r.arrival_index}]"


def _zname(r: Request, leg: int, c: int) -> str:
    return f"z[{r.arrival_index},{leg},{c}]"


def _legs_used(requests: Sequence[Request]) -> list[int]:
    return sorted({leg for r in requests for leg in r.legs})


def _n_legs(requests: Sequence[Request]) -> int:
    return max(r.rtype.destination for r in requests) - 1


def _plan_from_assignment(requests: Sequence[Request], assign: Mapping[Request, int]) -> AssignmentPlan:
    return AssignmentPlan(dict(assign), {r for r in requests if r not in assign})


# ---------------------------------------------------------------------------
# plain offline model
# ---------------------------------------------------------------------------
def build_offline_model(requests: Sequence[Request], train: Train, *, relax: bool = False) -> Model:
    """Binary ``x[i,c]``/``y[i]`` model maximizing accepted revenue."""
    if not requests:
        raise ValueError("the offline model needs at least one request")
    m = Model("offline")
    for r in requests:
        y = m.add_var(_yname(r), 0, 1, not relax, r.price)
        row = {y: -1.0}
        for c in train.coaches:
            row[m.add_var(_xname(r, c), 0, 1, not relax)] = 1.0
        m.add_constr(row, "==", 0, f"link[{r.arrival_index}]")
    _add_capacity_rows(m, requests, train)
    return m


def _add_capacity_rows(m: Model, requests: Sequence[Request], train: Train) -> None:
    for leg in _legs_used(requests):
        on_leg = [r for r in requests if leg in r.legs]
        for c in train.coaches:
            row = {m.index(_xname(r, c)): float(r.n) for r in on_leg}
            m.add_constr(row, "<=", train.capacity(c), f"cap[{leg},{c}]")


def _classes(requests: Sequence[Request]) -> dict[tuple, list[Request]]:
    """Interchangeable requests: same legs, group size and price; earliest first."""
    groups: dict[tuple, list[Request]] = defaultdict(list)
    for r in sorted(requests):
        groups[(r.rtype.origin, r.rtype.destination, r.n, r.price)].append(r)
    return dict(groups)


def _build_aggregated(classes: dict[tuple, list[Request]], train: Train, *, exact_count: bool):
    """Integer ``w[k,c]`` = copies of class ``k`` in coach ``c``."""
    m = Model("offline-aggregated")
    keys = list(classes)
    w = {}
    for k, key in enumerate(keys):
        o, d, n, p = key
        count = len(classes[key])
        row = {}
        for c in train.coaches:
            ub = min(count, train.capacity(c) // n)
            w[k, c] = m.add_var(f"w[{k},{c}]", 0, ub, True, 0.0 if exact_count else p)
            row[w[k, c]] = 1.0
        m.add_constr(row, "==" if exact_count else "<=", count, f"count[{k}]")
    legs = sorted({leg for (o, d, _, _) in keys for leg in range(o, d)})
    for leg in legs:
        members = [k for k, (o, d, _, _) in enumerate(keys) if o <= leg < d]
        for c in train.coaches:
            row = {w[k, c]: float(keys[k][2]) for k in members}
            m.add_constr(row, "<=", train.capacity(c), f"cap[{leg},{c}]")
    return m, keys, w


def _assignment_from_w(classes, keys, w, values, train) -> dict[Request, int]:
    assign = {}
    for k, key in enumerate(keys):
        queue = iter(classes[key])
        for c in train.coaches:
            for _ in range(int(round(values[w[k, c]]))):
                assign[next(queue)] = c
    return assign


def solve_offline(
    requests: Sequence[Request],
    train: Train,
    *,
    decision: bool = False,
    aggregate: bool = True,
    method: str = "highs",
    time_limit: float | None = None,
):
    """Optimal offline plan ``(AssignmentPlan, objective)``.

    With ``decision=True`` the call answers whether *every* request can be
    packed and returns a bool. ``aggregate=False`` solves the per-request
    binary model instead of the equivalent model over interchangeable classes.
    """
    if decision:
        return packable(requests, train)
    if not requests:
        raise ValueError("the offline model needs at least one request")
    if aggregate:
        classes = _classes(requests)
        m, keys, w = _build_aggregated(classes, train, exact_count=False)
        sol = solve_mip(m, method=method, time_limit=time_limit)
        _raise_unless_values(sol)
        assign = _assignment_from_w(classes, keys, w, sol.values, train)
    else:
        m = build_offline_model(requests, train)
        sol = solve_mip(m, method=method, time_limit=time_limit)
        _raise_unless_values(sol)
        assign = _decode_x(m, sol.values, requests, train)
    plan = _plan_from_assignment(requests, assign)
    return plan, plan.revenue


def _raise_unless_values(sol: Solution) -> None:
    if sol.values is None:
        raise RuntimeError(f"offline solve ended with status {sol.status.value}: {sol.message}")


def _decode_x(m: Model, values: np.ndarray, requests, train) -> dict[Request, int]:
    assign = {}
    for r in requests:
        for c in train.coaches:
            if values[m.index(_xname(r, c))] > 0.5:
                assign[r] = c
                break
    return assign


def _first_fit_all(requests: Sequence[Request], train: Train, n_legs: int) -> dict[Request, int] | None:
    kappa = ResidualCapacity.empty(train, n_legs)
    assign = {}
    # large, long requests first gives the heuristic its best chance
    for r in sorted(requests, key=lambda r: (-r.n * len(r.legs), -r.n, r.arrival_index)):
        coaches = kappa.feasible_coaches(r.rtype)
        if not coaches:
            return None
        kappa.consume(r.rtype, coaches[0])
        assign[r] = coaches[0]
    return assign


def packable(
    requests: Sequence[Request],
    train: Train,
    *,
    return_assignment: bool = False,
    time_limit: float | None = None,
):
    """Whether all ``requests`` fit simultaneously in ``train`` (coaches may be re-chosen).

    Cheap certificates are tried before the integer program: per-leg seat
    totals (a necessary condition, and sufficient for a single coach) and a
    first-fit-decreasing witness.
    """
    if not requests:
        return (True, {}) if return_assignment else True
    n_legs = _n_legs(requests)
    demand = np.zeros(n_legs, dtype=np.int64)
    for r in requests:
        demand[r.rtype.origin - 1 : r.rtype.destination - 1] += r.n
    if demand.max() > sum(train.coach_capacities):
        return (False, None) if return_assignment else False
    witness = _first_fit_all(requests, train, n_legs)
    if witness is None and train.n_coaches > 1:
        classes = defaultdict(list)
        for r in sorted(requests):
            classes[(r.rtype.origin, r.rtype.destination, r.n, 0)].append(r)
        classes = dict(classes)
        m, keys, w = _build_aggregated(classes, train, exact_count=True)
        sol = solve_mip(m, time_limit=time_limit)
        if sol.status is Status.OPTIMAL:
            witness = _assignment_from_w(classes, keys, w, sol.values, train)
        elif sol.status is not Status.INFEASIBLE:
            raise RuntimeError(f"packability check ended with status {sol.status.value}")
    ok = witness is not None
    return (ok, witness) if return_assignment else ok


# ---------------------------------------------------------------------------
# LP relaxation
# ---------------------------------------------------------------------------
@dataclass
class OfflineLPResult:
    mass: dict[Request, float]
    objective: float
    type_mass: dict[int, float]

    def __getitem__(self, r: Request) -> float:
        return self.mass[r]


def solve_offline_lp(
    requests: Sequence[Request], train: Train, *, aggregate: bool = True
) -> OfflineLPResult:
    """LP relaxation of the offline model; per-request mass ``sum_c x[r,c]``.

    The aggregated route solves over per-type totals ``Y_t <= count_t`` with
    one seat constraint per leg against the whole train's capacity. Any such
    point lifts to the per-coach relaxation by splitting proportionally to
    coach capacity, so both optima coincide. A type's mass is handed out to
    its copies earliest-first.
    """
    if not requests:
        raise ValueError("the offline model needs at least one request")
    if not aggregate:
        m = build_offline_model(requests, train, relax=True)
        sol = solve_lp(m)
        _raise_unless_values(sol)
        mass = {r: float(sol.values[m.index(_yname(r))]) for r in requests}
        tmass: dict[int, float] = defaultdict(float)
        for r, v in mass.items():
            tmass[r.type_id] += v
        return OfflineLPResult(mass, sol.objective, dict(tmass))

    by_type: dict[int, list[Request]] = defaultdict(list)
    for r in sorted(requests):
        by_type[r.type_id].append(r)
    tids = list(by_type)
    m = Model("offline-lp")
    for t in tids:
        rs = by_type[t]
        m.add_var(f"Y[{t}]", 0, len(rs), False, rs[0].price)
    total = float(sum(train.coach_capacities))
    for leg in _legs_used(requests):
        row = {k: float(by_type[t][0].n) for k, t in enumerate(tids) if leg in by_type[t][0].legs}
        m.add_constr(row, "<=", total, f"seats[{leg}]")
    sol = solve_lp(m)
    _raise_unless_values(sol)
    mass = {}
    tmass = {}
    for k, t in enumerate(tids):
        y = float(sol.values[k])
        tmass[t] = y
        for j, r in enumerate(by_type[t]):
            mass[r] = min(1.0, max(0.0, y - j))
    return OfflineLPResult(mass, sol.objective, tmass)


# ---------------------------------------------------------------------------
# FCFS model
# ---------------------------------------------------------------------------
@dataclass
class FairnessVariables:
    """Variable index of ``z[r, leg, coach]`` for every leg of every request."""

    z: dict[tuple[Request, int, int], int] = field(default_factory=dict)


@dataclass(frozen=True)
class FairnessCut:
    """Coach ``coach`` must be full on ``leg`` when ``request`` arrives, or it is accepted."""

    request: Request
    leg: int
    coach: int


def fairness_constraints(
    cut: FairnessCut, arrival_order: Sequence[Request], train: Train
) -> list[LinearCut]:
    """Linear form: earlier load on ``(leg, coach)`` >= (capacity - n + 1) * z."""
    r, leg, c = cut.request, cut.leg, cut.coach
    terms = {
        _xname(q, c): float(q.n)
        for q in arrival_order
        if q.arrival_index < r.arrival_index and leg in q.legs
    }
    terms[_zname(r, leg, c)] = -float(train.capacity(c) - r.n + 1)
    return [LinearCut(terms, ">=", 0.0, f"fair[{r.arrival_index},{leg},{c}]")]


def build_fcfs_model(
    arrival_order: Sequence[Request], train: Train, *, lazy: bool = False
) -> tuple[Model, FairnessVariables]:
    """Offline model plus fairness variables.

    For each request and coach, ``y[i] + sum_l z[i,l,c] = 1``: a request is
    either accepted or every coach is full on one of its legs. With
    ``lazy=True`` the load constraints tying ``z`` to earlier assignments are
    left out, to be supplied as cuts.
    """
    order = sorted(arrival_order)
    m = build_offline_model(order, train)
    fv = FairnessVariables()
    for r in order:
        for c in train.coaches:
            row = {m.index(_yname(r)): 1.0}
            for leg in r.legs:
                k = m.add_var(_zname(r, leg, c), 0, 1, True)
                fv.z[r, leg, c] = k
                row[k] = 1.0
            m.add_constr(row, "==", 1, f"fcfs[{r.arrival_index},{c}]")
    if not lazy:
        for r in order:
            for c in train.coaches:
                for leg in r.legs:
                    for cut in fairness_constraints(FairnessCut(r, leg, c), order, train):
                        m.add_cut(cut)
    return m, fv


def fcfs_replay(
    assign: Mapping[Request, int], arrival_order: Sequence[Request], train: Train, n_legs: int | None = None
) -> list[tuple[Request, int]]:
    """Every rejection that had a free coach, with the first such coach, in arrival order."""
    order = sorted(arrival_order)
    if not order:
        return []
    kappa = ResidualCapacity.empty(train, n_legs or _n_legs(order))
    unfair = []
    for r in order:
        c = assign.get(r)
        if c is not None:
            kappa.consume(r.rtype, c)
            continue
        coaches = kappa.feasible_coaches(r.rtype)
        if coaches:
            unfair.append((r, coaches[0]))
    return unfair


def separate_unfair_rejection(
    incumbent: Mapping[Request, int] | AssignmentPlan,
    arrival_order: Sequence[Request],
    train: Train,
    *,
    all_rejections: bool = False,
) -> list[FairnessCut]:
    """Fairness cuts for the earliest unfair rejection (empty list = certified)."""
    assign = incumbent.assignments if isinstance(incumbent, AssignmentPlan) else incumbent
    unfair = fcfs_replay(assign, arrival_order, train)
    if not all_rejections:
        unfair = unfair[:1]
    return [FairnessCut(r, leg, c) for r, c in unfair for leg in r.legs]


def forward_filtering_cuts(arrival_order: Sequence[Request], train: Train) -> list[LinearCut]:
    """Later load on ``(leg, c)`` <= capacity, tightened to ``n - 1`` seats when ``z = 1``."""
    order = sorted(arrival_order)
    cuts = []
    for i, r in enumerate(order):
        for c in train.coaches:
            cap = train.capacity(c)
            for leg in r.legs:
                terms = {_xname(q, c): float(q.n) for q in order[i + 1 :] if leg in q.legs}
                if not terms:
                    continue
                terms[_zname(r, leg, c)] = float(cap - (r.n - 1))
                cuts.append(LinearCut(terms, "<=", float(cap), f"ff[{r.arrival_index},{leg},{c}]"))
    return cuts


@dataclass
class DominanceRelation:
    """``dominated_by[r]``: earlier requests needing no more seats on a subset of ``r``'s legs."""

    dominated_by: dict[Request, set[Request]] = field(default_factory=dict)


def dominance_relation(arrival_order: Sequence[Request]) -> DominanceRelation:
    order = sorted(arrival_order)
    rel = DominanceRelation()
    for i, r in enumerate(order):
        o, d = r.rtype.origin, r.rtype.destination
        rel.dominated_by[r] = {
            q for q in order[:i] if o <= q.rtype.origin and q.rtype.destination <= d and q.n <= r.n
        }
    return rel


def dominance_cuts(arrival_order: Sequence[Request], *, full: bool = False) -> list[LinearCut]:
    """Same-type precedence ``y[t,k] >= y[t,k+1]``; with ``full`` also the dominance sums."""
    order = sorted(arrival_order)
    cuts = []
    last_of_type: dict[int, Request] = {}
    for r in order:
        prev = last_of_type.get(r.type_id)
        if prev is not None:
            cuts.append(LinearCut({_yname(prev): 1.0, _yname(r): -1.0}, ">=", 0.0,
                                  f"prec[{prev.arrival_index},{r.arrival_index}]"))
        last_of_type[r.type_id] = r
    if full:
        for r, dom in dominance_relation(order).dominated_by.items():
            if not dom:
                continue
            terms = {_yname(q): 1.0 for q in dom}
            terms[_yname(r)] = -float(len(dom))
            cuts.append(LinearCut(terms, ">=", 0.0, f"dom[{r.arrival_index}]"))
    return cuts


def preprocess_forced_assignments(
    arrival_order: Sequence[Request], train: Train, delta: float, *, rule: str = "safe"
) -> set[Request]:
    """Requests that every FCFS plan must accept, judged from prior demand alone.

    ``rule="safe"``: forced when the seats requested by earlier arrivals, summed
    over the request's legs, stay within ``sum_c cap_c - |C| * delta * omega``.
    If every coach were blocked, each would have more than ``cap_c - delta*omega``
    seats taken on some leg of the itinerary, which that sum rules out.

    ``rule="per_leg"`` checks each leg separately against ``(1 - delta) * sum_c cap_c``.
    It is exact for single-leg itineraries on equal coaches but can force a
    request that some FCFS plan rejects when itineraries span several legs.
    """
    if rule not in ("safe", "per_leg"):
        raise ValueError("rule must be 'safe' or 'per_leg'")
    order = sorted(arrival_order)
    if not order:
        return set()
    demand = np.zeros(_n_legs(order), dtype=np.int64)
    total = float(sum(train.coach_capacities))
    slack = train.n_coaches * delta * train.omega
    forced = set()
    for r in order:
        seg = demand[r.rtype.origin - 1 : r.rtype.destination - 1]
        if rule == "safe":
            ok = seg.sum() <= total - slack + 1e-9
        else:
            ok = bool((seg <= (1.0 - delta) * total + 1e-9).all())
        if ok:
            forced.add(r)
        seg += r.n
    return forced


# ---------------------------------------------------------------------------
# branch-and-cut driver
# ---------------------------------------------------------------------------
@dataclass
class FCFSConfig:
    time_limit: float = 30.0
    node_limit: int = 50_000
    method: str = "highs"
    seed: int = 0
    cuts_per_round: str = "first"
    dominance: str = "precedence"  # or "full" / "none"
    forward_filtering: bool = False
    preprocess: bool = True
    preprocess_rule: str = "safe"
    delta: float | None = None

    def __post_init__(self):
        if self.cuts_per_round not in ("first", "all"):
            raise ValueError("cuts_per_round must be 'first' or 'all'")
        if self.dominance not in ("precedence", "full", "none"):
            raise ValueError("dominance must be 'precedence', 'full' or 'none'")


@dataclass
class FCFSResult:
    plan: AssignmentPlan
    objective: float
    bound: float
    gap: float  # percent
    status: str
    rounds: int
    cuts: int
    nodes: int
    runtime: float

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "bound": self.bound,
            "gap_percent": self.gap,
            "status": self.status,
            "rounds": self.rounds,
            "cuts": self.cuts,
            "nodes": self.nodes,
            "runtime": self.runtime,
            "accepted": len(self.plan.assignments),
            "rejected": len(self.plan.rejected),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _random_fit_extend(
    prefix: Mapping[Request, int], cutoff: Request | None, order, train, n_legs, rng
) -> dict[Request, int]:
    """Keep decisions before ``cutoff``, then place the rest by RandomFit."""
    kappa = ResidualCapacity.empty(train, n_legs)
    assign = {}
    for r in order:
        if cutoff is None or r < cutoff:
            c = prefix.get(r)
        else:
            c = random_fit_coach(kappa, r.rtype, rng)
        if c is not None:
            kappa.consume(r.rtype, c)
            assign[r] = c
    return assign


def solve_offline_fcfs(
    arrival_order: Sequence[Request], train: Train, config: FCFSConfig | None = None
) -> FCFSResult:
    """Best plan that never rejects a request some coach could still take.

    The master problem starts without the fairness load constraints; each
    integral master solution is replayed and the earliest unfair rejection
    yields cuts. Every master solution is also repaired into a fair plan
    (its fair prefix, then RandomFit) so an incumbent exists at all times.
    """
    config = config or FCFSConfig()
    start = time.monotonic()
    order = sorted(arrival_order)
    if not order:
        raise ValueError("the offline model needs at least one request")
    n_legs = _n_legs(order)
    rng = np.random.default_rng(config.seed)

    best = _random_fit_extend({}, order[0], order, train, n_legs, rng)
    best_val = sum(r.price for r in best)

    m, fv = build_fcfs_model(order, train, lazy=True)
    if config.dominance != "none":
        for cut in dominance_cuts(order, full=config.dominance == "full"):
            m.add_cut(cut)
    if config.forward_filtering:
        for cut in forward_filtering_cuts(order, train):
            m.add_cut(cut)
    if config.preprocess:
        delta = config.delta if config.delta is not None else max(r.n for r in order) / train.omega
        for r in preprocess_forced_assignments(order, train, delta, rule=config.preprocess_rule):
            m.set_bounds(m.index(_yname(r)), lb=1)

    # the highs backend re-solves masters to optimality, so each master value
    # is a global bound and a repaired plan matching it ends the search
    global_masters = config.method == "highs"
    state = {"best": best, "val": best_val, "cuts": 0, "rounds": 0}

    def callback(values: np.ndarray):
        state["rounds"] += 1
        assign = _decode_x(m, values, order, train)
        unfair = fcfs_replay(assign, order, train, n_legs)
        if not unfair:
            val = sum(r.price for r in assign)
            if val > state["val"]:
                state["best"], state["val"] = assign, val
            return None
        repaired = _random_fit_extend(assign, unfair[0][0], order, train, n_legs, rng)
        val = sum(r.price for r in repaired)
        if val > state["val"]:
            state["best"], state["val"] = repaired, val
        if global_masters and state["val"] >= m.evaluate(values) - 1e-9:
            return None
        chosen = unfair if config.cuts_per_round == "all" else unfair[:1]
        cuts = []
        for r, c in chosen:
            for leg in r.legs:
                cuts.extend(fairness_constraints(FairnessCut(r, leg, c), order, train))
        state["cuts"] += len(cuts)
        return cuts

    sol = solve_mip(
        m, callback, method=config.method, node_limit=config.node_limit, time_limit=config.time_limit
    )
    if sol.status is Status.OPTIMAL:
        bound = sol.objective
    elif sol.status is Status.INFEASIBLE:
        raise RuntimeError("FCFS master became infeasible; a forced acceptance is invalid")
    else:
        bound = sol.bound if math.isfinite(sol.bound) else math.inf
    val = float(state["val"])
    gap = 0.0 if bound <= val + 1e-9 else (100.0 * (bound - val) / bound if math.isfinite(bound) else math.inf)
    status = "optimal" if gap == 0.0 else sol.status.value
    plan = _plan_from_assignment(order, state["best"])
    return FCFSResult(
        plan, val, bound, gap, status, state["rounds"], state["cuts"], sol.nodes,
        time.monotonic() - start,
    )
