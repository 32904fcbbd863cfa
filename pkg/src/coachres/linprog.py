"""Small LP / MIP layer with a lazy-constraint callback.

Continuous relaxations are solved with HiGHS (through :mod:`scipy.optimize`).
Integer models are solved either by HiGHS' own branch-and-cut (``method="highs"``)
or by the best-bound branch-and-bound in this module (``method="bnb"``), which
branches on the most fractional variable and breaks ties by lowest index.

Lazy constraints: ``solve_mip(model, cuts=callback)`` hands every integral
incumbent to ``callback(values)``. The callback returns ``None`` (or an empty
list) to accept it, or a list of :class:`LinearCut` that are added to the model
before the search resumes. With ``method="highs"`` the search resumes by
re-solving the augmented model from scratch.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

__all__ = [
    "FEAS_TOL",
    "INT_TOL",
    "Status",
    "LinearCut",
    "Model",
    "Solution",
    "solve_lp",
    "solve_mip",
]

FEAS_TOL = 1e-7
INT_TOL = 1e-6

_SENSES = ("<=", "==", ">=")


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"
    NODE_LIMIT = "node_limit"
    TIME_LIMIT = "time_limit"


@dataclass(frozen=True)
class LinearCut:
    """A constraint ``sum(coef * var) <sense> rhs`` over variable *names*."""

    terms: Mapping[str, float]
    sense: str
    rhs: float
    label: str = ""

    def __post_init__(self):
        if self.sense not in _SENSES:
            raise ValueError(f"sense must be one of {_SENSES}")

    def violation(self, model: "Model", values: np.ndarray) -> float:
        lhs = sum(coef * values[model.index(name)] for name, coef in self.terms.items())
        if self.sense == "<=":
            return max(0.0, lhs - self.rhs)
        if self.sense == ">=":
            return max(0.0, self.rhs - lhs)
        return abs(lhs - self.rhs)


class Model:
    """A maximization (default) or minimization model in sparse row form."""

    def __init__(self, name: str = "", sense: str = "max"):
        if sense not in ("max", "min"):
            raise ValueError("sense must be 'max' or 'min'")
        self.name = name
        self.sense = sense
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._int: list[bool] = []
        self._obj: list[float] = []
        self._names: list[str | None] = []
        self._by_name: dict[str, int] = {}
        # constraint rows: (indices, coefficients, lo, hi, name)
        self._rows: list[tuple[np.ndarray, np.ndarray, float, float, str | None]] = []

    # -- variables ---------------------------------------------------------
    def add_var(
        self,
        name: str | None = None,
        lb: float = 0.0,
        ub: float = math.inf,
        integer: bool = False,
        obj: float = 0.0,
    ) -> int:
        if lb > ub:
            raise ValueError(f"variable {name!r}: lower bound {lb} > upper bound {ub}")
        idx = len(self._lb)
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        self._int.append(bool(integer))
        self._obj.append(float(obj))
        self._names.append(name)
        if name is not None:
            if name in self._by_name:
                raise ValueError(f"duplicate variable name {name!r}")
            self._by_name[name] = idx
        return idx

    def add_vars(self, count: int, lb=0.0, ub=math.inf, integer=False, obj=0.0) -> np.ndarray:
        """Add ``count`` anonymous variables at once; returns their indices."""
        start = len(self._lb)
        lb = np.broadcast_to(np.asarray(lb, dtype=float), (count,))
        ub = np.broadcast_to(np.asarray(ub, dtype=float), (count,))
        if (lb > ub).any():
            raise ValueError("lower bound exceeds upper bound")
        self._lb.extend(lb.tolist())
        self._ub.extend(ub.tolist())
        self._int.extend([bool(integer)] * count)
        self._obj.extend(np.broadcast_to(np.asarray(obj, dtype=float), (count,)).tolist())
        self._names.extend([None] * count)
        return np.arange(start, start + count)

    def index(self, name: str) -> int:
        return self._by_name[name]

    def has_var(self, name: str) -> bool:
        return name in self._by_name

    def var_name(self, idx: int) -> str:
        return self._names[idx] or f"v{idx}"

    def set_bounds(self, idx: int, lb: float | None = None, ub: float | None = None) -> None:
        if lb is not None:
            self._lb[idx] = float(lb)
        if ub is not None:
            self._ub[idx] = float(ub)
        if self._lb[idx] > self._ub[idx]:
            raise ValueError(f"{self.var_name(idx)}: lower bound exceeds upper bound")

    def set_obj(self, idx: int, coef: float) -> None:
        self._obj[idx] = float(coef)

    @property
    def num_vars(self) -> int:
        return len(self._lb)

    @property
    def num_constrs(self) -> int:
        return len(self._rows)

    @property
    def integer_indices(self) -> np.ndarray:
        return np.flatnonzero(self._int)

    # -- constraints -------------------------------------------------------
    def add_constr(self, coeffs, sense: str, rhs: float, name: str | None = None) -> int:
        """Add ``sum(coeffs) <sense> rhs``; ``coeffs`` maps variable index -> coefficient."""
        if sense not in _SENSES:
            raise ValueError(f"sense must be one of {_SENSES}")
        if isinstance(coeffs, Mapping):
            items = list(coeffs.items())
        else:
            items = list(coeffs)
        idx = np.array([int(k) for k, _ in items], dtype=np.int64)
        val = np.array([float(v) for _, v in items], dtype=float)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_vars):
            raise ValueError("constraint references an undeclared variable")
        lo, hi = {"<=": (-math.inf, rhs), ">=": (rhs, math.inf), "==": (rhs, rhs)}[sense]
        self._rows.append((idx, val, float(lo), float(hi), name))
        return len(self._rows) - 1

    def add_cut(self, cut: LinearCut) -> int:
        coeffs = {}
        for name, coef in cut.terms.items():
            k = self.index(name)
            coeffs[k] = coeffs.get(k, 0.0) + coef
        return self.add_constr(coeffs, cut.sense, cut.rhs, cut.label or None)

    # -- export ------------------------------------------------------------
    def objective_vector(self) -> np.ndarray:
        return np.array(self._obj)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self._lb), np.array(self._ub)

    def matrix(self) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
        n = self.num_vars
        if not self._rows:
            return sp.csr_matrix((0, n)), np.zeros(0), np.zeros(0)
        indptr = np.zeros(len(self._rows) + 1, dtype=np.int64)
        np.cumsum([len(r[0]) for r in self._rows], out=indptr[1:])
        indices = np.concatenate([r[0] for r in self._rows])
        data = np.concatenate([r[1] for r in self._rows])
        A = sp.csr_matrix((data, indices, indptr), shape=(len(self._rows), n))
        A.sum_duplicates()
        lo = np.array([r[2] for r in self._rows])
        hi = np.array([r[3] for r in self._rows])
        return A, lo, hi

    def evaluate(self, values: np.ndarray) -> float:
        return float(np.dot(self._obj, values))

    def max_violation(self, values: np.ndarray) -> float:
        A, lo, hi = self.matrix()
        lhs = A @ values if A.shape[0] else np.zeros(0)
        lb, ub = self.bounds()
        viol = [0.0]
        if lhs.size:
            viol.append(float(np.max(np.maximum(lo - lhs, lhs - hi))))
        viol.append(float(np.max(np.maximum(lb - values, values - ub))))
        return max(viol)

    def to_lp_string(self) -> str:
        """CPLEX-LP text, for cross-checking with external solvers."""
        def term(coef, name):
            sign = "-" if coef < 0 else "+"
            return f"{sign} {abs(coef):.12g} {name}"

        lines = [f"\\ {self.name}", "Maximize" if self.sense == "max" else "Minimize"]
        obj = [term(c, self.var_name(i)) for i, c in enumerate(self._obj) if c != 0]
        lines.append(" obj: " + (" ".join(obj) if obj else "0 " + self.var_name(0)))
        lines.append("Subject To")
        for k, (idx, val, lo, hi, name) in enumerate(self._rows):
            body = " ".join(term(v, self.var_name(i)) for i, v in zip(idx, val)) or "0 v0"
            label = name or f"c{k}"
            if lo == hi:
                lines.append(f" {label}: {body} = {lo:.12g}")
            else:
                if lo > -math.inf:
                    lines.append(f" {label}_lo: {body} >= {lo:.12g}")
                if hi < math.inf:
                    lines.append(f" {label}: {body} <= {hi:.12g}")
        lines.append("Bounds")
        for i in range(self.num_vars):
            ub = "+inf" if self._ub[i] == math.inf else f"{self._ub[i]:.12g}"
            lines.append(f" {self._lb[i]:.12g} <= {self.var_name(i)} <= {ub}")
        ints = [self.var_name(i) for i in self.integer_indices]
        if ints:
            lines.append("General")
            lines.extend(f" {n}" for n in ints)
        lines.append("End")
        return "\n".join(lines) + "\n"


@dataclass
class Solution:
    status: Status
    values: np.ndarray | None = None
    objective: float = math.nan
    bound: float = math.nan
    nodes: int = 0
    cuts_added: int = 0
    rounds: int = 0
    message: str = ""
    model: Model | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL

    @property
    def has_values(self) -> bool:
        return self.values is not None

    @property
    def gap(self) -> float:
        """Relative gap ``|bound - objective| / |bound|`` (0 when optimal)."""
        if self.status is Status.OPTIMAL:
            return 0.0
        if self.values is None or not math.isfinite(self.bound):
            return math.inf
        denom = max(abs(self.bound), 1e-12)
        return abs(self.bound - self.objective) / denom

    def value(self, name: str) -> float:
        return float(self.values[self.model.index(name)])


CutCallback = Callable[[np.ndarray], "Sequence[LinearCut] | None"]


def _lp_arrays(model: Model):
    c = model.objective_vector()
    if model.sense == "max":
        c = -c
    A, lo, hi = model.matrix()
    return c, A, lo, hi


def _split_rows(A, lo, hi):
    """Convert ranged rows into the A_ub/A_eq form linprog expects."""
    eq = lo == hi
    ub_rows, ub_rhs = [], []
    fin_hi = ~eq & np.isfinite(hi)
    fin_lo = ~eq & np.isfinite(lo)
    if fin_hi.any():
        ub_rows.append(A[fin_hi])
        ub_rhs.append(hi[fin_hi])
    if fin_lo.any():
        ub_rows.append(-A[fin_lo])
        ub_rhs.append(-lo[fin_lo])
    A_ub = sp.vstack(ub_rows).tocsr() if ub_rows else None
    b_ub = np.concatenate(ub_rhs) if ub_rhs else None
    A_eq = A[eq] if eq.any() else None
    b_eq = lo[eq] if eq.any() else None
    return A_ub, b_ub, A_eq, b_eq


def _run_linprog(c, A, lo, hi, lb, ub, time_limit=None, iteration_limit=None):
    A_ub, b_ub, A_eq, b_eq = _split_rows(A, lo, hi)
    options = {"presolve": True}
    if time_limit is not None:
        options["time_limit"] = max(float(time_limit), 1e-3)
    if iteration_limit is not None:
        options["maxiter"] = int(iteration_limit)
    bounds = np.column_stack([lb, np.where(np.isinf(ub), np.inf, ub)])
    bounds = [(l, None if math.isinf(u) else u) for l, u in bounds]
    return linprog(
        c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
        method="highs-ds", options=options,
    )


def _lp_status(res) -> Status:
    return {
        0: Status.OPTIMAL,
        1: Status.ITERATION_LIMIT,
        2: Status.INFEASIBLE,
        3: Status.UNBOUNDED,
    }.get(res.status, Status.ITERATION_LIMIT)


def solve_lp(
    model: Model,
    *,
    time_limit: float | None = None,
    iteration_limit: int | None = None,
    _bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> Solution:
    """Solve the continuous relaxation of ``model`` (integrality flags are ignored)."""
    c, A, lo, hi = _lp_arrays(model)
    lb, ub = _bounds if _bounds is not None else model.bounds()
    if (lb > ub + FEAS_TOL).any():
        return Solution(Status.INFEASIBLE, model=model, message="empty variable domain")
    res = _run_linprog(c, A, lo, hi, lb, ub, time_limit, iteration_limit)
    status = _lp_status(res)
    if status is not Status.OPTIMAL:
        return Solution(status, model=model, message=res.message)
    obj = -res.fun if model.sense == "max" else res.fun
    return Solution(Status.OPTIMAL, np.asarray(res.x), float(obj), float(obj), model=model)


def solve_mip(
    model: Model,
    cuts: CutCallback | None = None,
    *,
    method: str = "highs",
    node_limit: int = 50_000,
    time_limit: float | None = None,
    mip_rel_gap: float = 0.0,
    max_rounds: int = 10_000,
) -> Solution:
    """Solve ``model`` to optimality, honouring integrality flags.

    Returns a :class:`Solution`; limits yield ``NODE_LIMIT``/``TIME_LIMIT`` with
    the best incumbent (if any) and the best known bound.
    """
    if method == "highs":
        return _solve_highs(model, cuts, node_limit, time_limit, mip_rel_gap, max_rounds)
    if method == "bnb":
        return _solve_bnb(model, cuts, node_limit, time_limit)
    raise ValueError(f"unknown method {method!r}")


def _highs_once(model, node_limit, time_limit, mip_rel_gap):
    c, A, lo, hi = _lp_arrays(model)
    lb, ub = model.bounds()
    constraints = [LinearConstraint(A, lo, hi)] if A.shape[0] else []
    options = {"node_limit": int(node_limit), "mip_rel_gap": float(mip_rel_gap), "presolve": True}
    if time_limit is not None:
        options["time_limit"] = max(float(time_limit), 1e-3)
    integrality = np.array(model._int, dtype=np.uint8)
    if not integrality.any():
        integrality = None
    res = milp(c, constraints=constraints, integrality=integrality, bounds=Bounds(lb, ub),
               options=options)
    sign = -1.0 if model.sense == "max" else 1.0
    x = None if res.x is None else np.asarray(res.x)
    obj = sign * res.fun if res.fun is not None else math.nan
    dual = getattr(res, "mip_dual_bound", None)
    bound = sign * dual if dual is not None and math.isfinite(dual) else obj
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    if res.status == 0:
        status = Status.OPTIMAL
        bound = obj
    elif res.status == 2:
        status = Status.INFEASIBLE
    elif res.status == 3:
        status = Status.UNBOUNDED
    elif "node" in (res.message or "").lower():
        status = Status.NODE_LIMIT
    elif "time" in (res.message or "").lower():
        status = Status.TIME_LIMIT
    else:
        status = Status.ITERATION_LIMIT
    return Solution(status, x, obj, bound, nodes, model=model, message=res.message or "")


def _solve_highs(model, cuts, node_limit, time_limit, mip_rel_gap, max_rounds):
    start = time.monotonic()
    added = 0
    nodes = 0
    rounds = 0
    # every master optimum bounds all later (more constrained) masters
    last_bound = math.nan
    while True:
        remaining = None if time_limit is None else time_limit - (time.monotonic() - start)
        if remaining is not None and remaining <= 0:
            return Solution(Status.TIME_LIMIT, None, math.nan, last_bound, nodes, added, rounds,
                            model=model, message="time limit between cut rounds")
        sol = _highs_once(model, max(node_limit - nodes, 1), remaining, mip_rel_gap)
        rounds += 1
        nodes += sol.nodes
        sol.nodes, sol.cuts_added, sol.rounds = nodes, added, rounds
        if cuts is None or sol.status is not Status.OPTIMAL:
            if cuts is not None and sol.values is not None:
                # an incumbent from a truncated master is not certified
                sol.values = None
                sol.objective = math.nan
            if cuts is not None and not math.isfinite(sol.bound):
                sol.bound = last_bound
            return sol
        last_bound = sol.objective
        new = cuts(sol.values) or []
        if not new:
            return sol
        for cut in new:
            model.add_cut(cut)
        added += len(new)
        if rounds >= max_rounds:
            return Solution(Status.ITERATION_LIMIT, None, math.nan, sol.objective, nodes, added,
                            rounds, model=model, message="cut round limit")


def _most_fractional(values: np.ndarray, int_idx: np.ndarray) -> int | None:
    if int_idx.size == 0:
        return None
    frac = np.abs(values[int_idx] - np.round(values[int_idx]))
    k = int(np.argmax(frac))  # argmax returns the first (lowest id) on ties
    if frac[k] <= INT_TOL:
        return None
    # prefer the variable closest to 0.5; ties resolved by lowest index
    dist = np.abs(values[int_idx] - np.floor(values[int_idx]) - 0.5)
    dist[frac <= INT_TOL] = np.inf
    return int(int_idx[int(np.argmin(dist))])


def _solve_bnb(model: Model, cuts, node_limit, time_limit) -> Solution:
    start = time.monotonic()
    maximize = model.sense == "max"
    int_idx = model.integer_indices
    lb0, ub0 = model.bounds()
    lb0 = lb0.copy()
    ub0 = ub0.copy()
    lb0[int_idx] = np.ceil(lb0[int_idx] - INT_TOL)
    ub0[int_idx] = np.floor(ub0[int_idx] + INT_TOL)

    best_x: np.ndarray | None = None
    best_obj = -math.inf if maximize else math.inf
    counter = itertools.count()
    # heap of (priority, fifo, lb, ub, parent_bound); priority favours best bound
    root = solve_lp(model, _bounds=(lb0, ub0))
    if root.status is Status.INFEASIBLE:
        return Solution(Status.INFEASIBLE, model=model)
    if root.status is Status.UNBOUNDED:
        return Solution(Status.UNBOUNDED, model=model)
    heap = [(-root.objective if maximize else root.objective, next(counter), lb0, ub0)]
    nodes = 0
    added = 0

    def better(a, b):
        return a > b + 1e-9 if maximize else a < b - 1e-9

    while heap:
        if nodes >= node_limit or (time_limit is not None and time.monotonic() - start > time_limit):
            status = Status.NODE_LIMIT if nodes >= node_limit else Status.TIME_LIMIT
            bound = -heap[0][0] if maximize else heap[0][0]
            if best_x is not None:
                bound = max(bound, best_obj) if maximize else min(bound, best_obj)
            return Solution(status, best_x, best_obj if best_x is not None else math.nan, bound,
                            nodes, added, model=model)
        prio, _, lb, ub = heapq.heappop(heap)
        parent_bound = -prio if maximize else prio
        if best_x is not None and not better(parent_bound, best_obj):
            continue
        sol = solve_lp(model, _bounds=(lb, ub))
        nodes += 1
        if sol.status is not Status.OPTIMAL:
            continue
        if best_x is not None and not better(sol.objective, best_obj):
            continue
        j = _most_fractional(sol.values, int_idx)
        if j is None:
            x = sol.values.copy()
            x[int_idx] = np.round(x[int_idx])
            if cuts is not None:
                new = cuts(x) or []
                if new:
                    for cut in new:
                        model.add_cut(cut)
                    added += len(new)
                    heapq.heappush(heap, (prio, next(counter), lb, ub))
                    continue
            best_x, best_obj = x, model.evaluate(x)
            continue
        v = sol.values[j]
        child_prio = -sol.objective if maximize else sol.objective
        down_ub = ub.copy()
        down_ub[j] = math.floor(v)
        up_lb = lb.copy()
        up_lb[j] = math.ceil(v)
        heapq.heappush(heap, (child_prio, next(counter), lb, down_ub))
        heapq.heappush(heap, (child_prio, next(counter), up_lb, ub))

    if best_x is None:
        return Solution(Status.INFEASIBLE, nodes=nodes, cuts_added=added, model=model)
    return Solution(Status.OPTIMAL, best_x, best_obj, best_obj, nodes, added, model=model)
