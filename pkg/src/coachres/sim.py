"""Seeded instance generation, the policy harness, fairness audits and experiment metrics."""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import (
    InfeasibleAssignment,
    Instance,
    Request,
    ResidualCapacity,
    Train,
    validate_plan,
    AssignmentPlan,
)
from .offline import packable, solve_offline
from .policies import Policy, PolicyContext, make_policy
from .stochastic import ArrivalModel

__all__ = [
    "rng_stream",
    "SimConfig",
    "TraceRecord",
    "RunTrace",
    "FCFSViolation",
    "SFCFSViolation",
    "generate_instance",
    "random_order_permutation",
    "day_of",
    "run_policy",
    "audit_fcfs",
    "audit_sfcfs",
    "exact_value",
    "summarize",
    "bootstrap_ci",
    "bland_altman",
    "metrics",
    "ExperimentResult",
    "run_experiment",
]


def rng_stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Independent generator per (seed, purpose): policy coins never shift instance draws."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(purpose.encode()), *extra]))


@dataclass
class SimConfig:
    seed: int = 0
    replications: int = 1
    horizon_days: int = 30
    policies: list = field(default_factory=list)  # [(name, params)]

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.horizon_days < 1:
            raise ValueError("horizon_days must be at least 1")

    @property
    def seeds(self) -> list[int]:
        return [self.seed + k for k in range(self.replications)]


def generate_instance(base: Instance, seed: int, arrival: ArrivalModel | None = None) -> Instance:
    """Draw an arrival sequence: total count, then i.i.d. types."""
    arrival = arrival or ArrivalModel.from_instance(base)
    rng = rng_stream(seed, "instance")
    if arrival.distribution == "deterministic":
        count = arrival.horizon
    else:
        count = 0
        while count < 1:
            count = int(rng.poisson(arrival.total_mean))
        count = min(count, arrival.horizon)
    types = rng.choice(len(arrival.rates), size=count, p=np.array(arrival.rates))
    out = copy.copy(base)
    out.arrivals = [int(t) for t in types]
    out.name = f"{base.name}#{seed}" if base.name else f"#{seed}"
    return out


def random_order_permutation(requests: Sequence, rng) -> list:
    """Uniformly random order (numpy's Fisher-Yates shuffle)."""
    rng = rng if isinstance(rng, np.random.Generator) else rng_stream(int(rng), "permutation")
    return [requests[k] for k in rng.permutation(len(requests))]


def day_of(step: int, horizon: int, days: int) -> int:
    """Equal-width blocks of steps: ``ceil(step * days / horizon)``, clipped to ``1..days``."""
    return min(days, max(1, math.ceil(step * days / horizon)))


@dataclass
class TraceRecord:
    step: int
    request: Request
    verdict: str
    coach: int | None
    reason: str
    residual_min: int


@dataclass
class RunTrace:
    policy: str
    seed: int
    records: list[TraceRecord] = field(default_factory=list)
    assignments: dict = field(default_factory=dict)
    revenue: int = 0
    daily_revenue: list[int] = field(default_factory=list)
    daily_utilization: list[float] = field(default_factory=list)
    n_legs: int = 0
    error: str | None = None
    runtime: float = 0.0  # seconds, excluded from reports

    @property
    def requests(self) -> list[Request]:
        return [rec.request for rec in self.records]

    @property
    def accepted(self) -> list[Request]:
        return [rec.request for rec in self.records if rec.verdict == "accept"]

    def plan(self) -> AssignmentPlan:
        rejected = {rec.request for rec in self.records if rec.verdict != "accept"}
        return AssignmentPlan(dict(self.assignments), rejected)

    def csv_rows(self) -> list[list]:
        rows = [["step", "type", "group", "decision", "coach", "residual_min"]]
        for rec in self.records:
            coach = self.assignments.get(rec.request, rec.coach)
            rows.append([rec.step, rec.request.type_id, rec.request.n, rec.verdict,
                         "" if coach is None else coach, rec.residual_min])
        return rows

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", newline="") as fh:
            csv.writer(fh).writerows(self.csv_rows())
        os.replace(tmp, path)


def run_policy(
    instance: Instance,
    policy: Policy,
    seed: int,
    context: PolicyContext | None = None,
    days: int = 30,
) -> RunTrace:
    """Feed the instance's arrivals to ``policy`` and record every decision.

    Accepted coaches are checked against the residual capacity; a policy or
    solver error stops the run and is stored in ``trace.error`` with the
    partial trace kept.
    """
    start = time.perf_counter()
    if not hasattr(policy, "context_"):
        policy.fit(context or PolicyContext.from_instance(instance, days=days))
    ctx = policy.context_
    horizon = ctx.arrival.horizon
    n_legs = instance.n_legs
    trace = RunTrace(policy.label, seed, n_legs=n_legs)
    kappa = instance.empty_capacity()
    requests = instance.requests()
    day_rev = np.zeros(days, dtype=np.int64)
    day_seat_legs = np.zeros(days, dtype=np.int64)
    total_seat_legs = sum(instance.train.coach_capacities) * n_legs
    try:
        policy.begin(rng_stream(seed, "policy:" + policy.label))
        for step, r in enumerate(requests, start=1):
            sl = slice(r.rtype.origin - 1, r.rtype.destination - 1)
            residual = int(kappa.free[:, sl].min(axis=1).max())
            d = policy.decide(r, step, kappa)
            if d.accepted and not policy.defers_coaches:
                if d.coach is None or not kappa.fits(r.rtype, d.coach):
                    trace.records.append(TraceRecord(step, r, "reject", d.coach, "infeasible-choice", residual))
                    raise InfeasibleAssignment(f"{trace.policy} chose coach {d.coach} for {r}")
            trace.records.append(TraceRecord(step, r, d.verdict, d.coach, d.reason, residual))
            if not d.accepted:
                continue
            if not policy.defers_coaches:
                kappa.consume(r.rtype, d.coach)
                trace.assignments[r] = d.coach
            k = day_of(step, horizon, days) - 1
            day_rev[k] += r.price
            day_seat_legs[k] += r.n * len(r.legs)
        if policy.defers_coaches:
            final = policy.end() or {}
            if set(final) != set(trace.accepted):
                raise RuntimeError("deferred coach choices do not cover the accepted set")
            trace.assignments = dict(final)
        else:
            policy.end()
    except Exception as exc:  # keep the partial trace for inspection
        trace.error = f"{type(exc).__name__}: {exc}"
    trace.revenue = int(sum(r.price for r in trace.accepted))
    trace.daily_revenue = np.cumsum(day_rev).tolist()
    trace.daily_utilization = (np.cumsum(day_seat_legs) / total_seat_legs).tolist()
    trace.runtime = time.perf_counter() - start
    return trace


@dataclass(frozen=True)
class FCFSViolation:
    step: int
    request: Request
    coach: int


@dataclass(frozen=True)
class SFCFSViolation:
    step: int
    request: Request


def audit_fcfs(trace: RunTrace, train: Train, n_legs: int | None = None) -> list[FCFSViolation]:
    """Rejections made while some coach still had room, replaying the trace's coaches."""
    n_legs = n_legs or trace.n_legs or max((r.rtype.destination for r in trace.requests), default=2) - 1
    kappa = ResidualCapacity.empty(train, n_legs)
    out = []
    for rec in trace.records:
        r = rec.request
        if rec.verdict == "accept":
            kappa.consume(r.rtype, trace.assignments.get(r, rec.coach))
            continue
        coaches = kappa.feasible_coaches(r.rtype)
        if coaches:
            out.append(FCFSViolation(rec.step, r, coaches[0]))
    return out


def audit_sfcfs(trace: RunTrace, train: Train) -> list[SFCFSViolation]:
    """Rejections of a request that, with everything accepted before it, could still be packed."""
    accepted: list[Request] = []
    blocked: list[tuple[int, int, int]] = []
    out = []
    for rec in trace.records:
        r = rec.request
        if rec.verdict == "accept":
            accepted.append(r)
            continue
        o, d, n = r.rtype.origin, r.rtype.destination, r.n
        # packability is monotone: a larger accepted set or a bigger request cannot fit either
        if any(bo >= o and bd <= d and bn <= n for bo, bd, bn in blocked):
            continue
        if packable(accepted + [r], train):
            out.append(SFCFSViolation(rec.step, r))
        else:
            blocked.append((o, d, n))
    return out


def exact_value(instance: Instance) -> int:
    """Offline optimum on the realized requests (the ``Exact`` baseline)."""
    reqs = instance.requests()
    if not reqs:
        return 0
    return int(solve_offline(reqs, instance.train)[1])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    return {
        "n": int(v.size),
        "mean": float(v.mean()) if v.size else None,
        "sd": float(v.std(ddof=1)) if v.size > 1 else None,
        "min": float(v.min()) if v.size else None,
    }


def bootstrap_ci(
    samples: Sequence[float], seed: int = 0, n_boot: int = 10_000, level: float = 0.95
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(samples, dtype=float)
    rng = rng_stream(seed, "bootstrap")
    means = x[rng.integers(0, x.size, size=(n_boot, x.size))].mean(axis=1)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [a, 1.0 - a])
    return float(lo), float(hi)


def bland_altman(a: Sequence[float], b: Sequence[float]) -> dict:
    """Pairwise means and differences with ``mean diff +- 1.96 sd`` limits."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired series must have equal length")
    diff = a - b
    mean_diff = float(diff.mean())
    sd = float(diff.std(ddof=1)) if diff.size > 1 else None
    return {
        "mean": ((a + b) / 2.0).tolist(),
        "difference": diff.tolist(),
        "bias": mean_diff,
        "lower": None if sd is None else mean_diff - 1.96 * sd,
        "upper": None if sd is None else mean_diff + 1.96 * sd,
    }


def metrics(traces: Mapping[str, Sequence[RunTrace]], baseline: Mapping[int, float]) -> dict:
    """Relative revenue per policy against the offline optimum, plus per-day curves."""
    out = {}
    for label, runs in traces.items():
        rel = [t.revenue / baseline[t.seed] if baseline[t.seed] else 1.0 for t in runs]
        days = max((len(t.daily_revenue) for t in runs), default=0)
        curve = np.array([
            [v / baseline[t.seed] if baseline[t.seed] else 1.0 for v in t.daily_revenue] for t in runs
        ]) if runs else np.zeros((0, days))
        util = np.array([t.daily_utilization for t in runs]) if runs else np.zeros((0, days))
        out[label] = {
            **summarize(rel),
            "relative": rel,
            "revenue": [t.revenue for t in runs],
            "curve_mean": curve.mean(axis=0).tolist() if len(runs) else [],
            "curve_sd": (curve.std(axis=0, ddof=1).tolist() if len(runs) > 1 else None),
            "utilization_mean": util.mean(axis=0).tolist() if len(runs) else [],
        }
    return out


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------
@dataclass
class ExperimentResult:
    name: str
    seeds: list[int]
    exact: dict[int, int]
    traces: dict[str, list[RunTrace]]
    fcfs_violations: dict[str, int]
    sfcfs_violations: dict[str, int]
    errors: dict[str, list[str]]
    exact_runtime: dict[int, float] = field(default_factory=dict)

    def report(self) -> dict:
        rep = metrics(self.traces, self.exact)
        for label in rep:
            rep[label]["audit_fcfs_violations"] = self.fcfs_violations.get(label)
            rep[label]["audit_sfcfs_violations"] = self.sfcfs_violations.get(label)
            rep[label]["errors"] = self.errors.get(label, [])
        return {
            "experiment": self.name,
            "seeds": self.seeds,
            "exact": {str(s): v for s, v in self.exact.items()},
            "policies": rep,
        }

    def relative(self, label: str) -> np.ndarray:
        return np.array([t.revenue / self.exact[t.seed] for t in self.traces[label]])

    def write(self, out_dir: str | Path) -> Path:
        root = Path(out_dir) / self.name
        root.mkdir(parents=True, exist_ok=True)
        for label, runs in self.traces.items():
            for t in runs:
                t.write_csv(root / label / f"{t.seed}.trace.csv")
        _atomic_write(root / "metrics.json", json.dumps(self.report(), indent=2, sort_keys=True) + "\n")
        rep = metrics(self.traces, self.exact)
        rows = [["day", "policy", "mean", "sd"]]
        for label, m in rep.items():
            for d, mean in enumerate(m["curve_mean"], start=1):
                sd = m["curve_sd"][d - 1] if m["curve_sd"] else ""
                rows.append([d, label, f"{mean:.6g}", sd if sd == "" else f"{sd:.6g}"])
        _atomic_csv(root / "curves.csv", rows)
        labels = list(self.traces)
        rows = [["policy_a", "policy_b", "seed", "mean", "difference", "bias", "lower", "upper"]]
        for i, a in enumerate(labels):
            for b in labels[i + 1 :]:
                ba = bland_altman(self.relative(a), self.relative(b))
                for s, mu, df in zip(self.seeds, ba["mean"], ba["difference"]):
                    rows.append([a, b, s, f"{mu:.6g}", f"{df:.6g}", f"{ba['bias']:.6g}",
                                 "" if ba["lower"] is None else f"{ba['lower']:.6g}",
                                 "" if ba["upper"] is None else f"{ba['upper']:.6g}"])
        _atomic_csv(root / "bland_altman.csv", rows)
        return root


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_csv(path: Path, rows) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    os.replace(tmp, path)


def _run_seed(base: Instance, roster: Sequence[tuple[str, dict]], seed: int, days: int,
              context: PolicyContext | None = None):
    inst = generate_instance(base, seed)
    ctx = context or PolicyContext.from_instance(base, days=days)
    t0 = time.perf_counter()
    exact = exact_value(inst)
    exact_time = time.perf_counter() - t0
    traces = []
    for name, params in roster:
        pol = make_policy(name, **params).fit(ctx)
        traces.append(run_policy(inst, pol, seed, days=days))
    return seed, exact, exact_time, traces


def run_experiment(
    base: Instance,
    roster: Sequence[tuple[str, dict]],
    seeds: Iterable[int],
    *,
    name: str = "experiment",
    days: int = 30,
    parallel: int = 1,
    audit: bool = True,
) -> ExperimentResult:
    """Run every policy in ``roster`` on one generated instance per seed."""
    seeds = list(seeds)
    if not roster:
        raise ValueError("the roster needs at least one policy")
    if not seeds:
        raise ValueError("at least one seed is required")
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_seed, [base] * len(seeds), [roster] * len(seeds), seeds,
                                    [days] * len(seeds)))
    else:
        # one shared context: fluid and a-priori solves happen once per experiment
        ctx = PolicyContext.from_instance(base, days=days)
        results = [_run_seed(base, roster, s, days, ctx) for s in seeds]
    exact: dict[int, int] = {}
    exact_time: dict[int, float] = {}
    traces: dict[str, list[RunTrace]] = {}
    errors: dict[str, list[str]] = {}
    for seed, ex, ex_time, runs in results:
        exact[seed] = ex
        exact_time[seed] = ex_time
        for t in runs:
            traces.setdefault(t.policy, []).append(t)
            if t.error:
                errors.setdefault(t.policy, []).append(f"seed {seed}: {t.error}")
    fcfs_v: dict[str, int] = {}
    sfcfs_v: dict[str, int] = {}
    if audit:
        for label, runs in traces.items():
            if any(t.error for t in runs):
                continue
            if label == "SFCFS":
                sfcfs_v[label] = sum(len(audit_sfcfs(t, base.train)) for t in runs)
            fcfs_v[label] = sum(len(audit_fcfs(t, base.train, base.n_legs)) for t in runs)
            for t in runs:
                bad = validate_plan(t.plan(), base.train, t.requests, base.n_legs)
                if bad:
                    errors.setdefault(label, []).append(f"seed {t.seed}: {len(bad)} plan violations")
    return ExperimentResult(name, seeds, exact, traces, fcfs_v, sfcfs_v, errors, exact_time)
