"""Online accept-or-assign policies.

Every policy follows one estimator-style lifecycle:

* ``fit(context)`` does per-experiment work (fluid LP, a-priori plan) and may
  be shared by many runs through the context cache;
* ``begin(rng)`` resets per-run state;
* ``decide(request, step, kappa)`` returns a :class:`PolicyDecision`;
* ``end()`` returns final coach choices for policies that defer them.

Constructor arguments are plain hyper-parameters, so ``get_params`` and
``set_params`` (from scikit-learn's ``BaseEstimator``) work as usual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import (
    check_choice,
    check_fraction,
    check_positive,
    check_positive_int,
    check_probability,
    check_random_state,
)
from .bounds import optimal_q
from .domain import (
    Instance,
    Request,
    RequestType,
    ResidualCapacity,
    Train,
    first_fit_coach,
    random_fit_coach,
)
from .offline import packable, solve_offline_lp
from .stochastic import AprioriPlan, ArrivalModel, FluidSolution, solve_apriori, solve_fluid

__all__ = [
    "ACCEPT",
    "REJECT",
    "PolicyDecision",
    "PolicyContext",
    "Policy",
    "first_fit",
    "random_fit",
    "FirstFitPolicy",
    "RandomFitPolicy",
    "NRQPolicy",
    "LambdaPolicy",
    "FluidPolicy",
    "FixedPolicy",
    "FCFSPolicy",
    "SFCFSPolicy",
    "POLICY_NAMES",
    "make_policy",
]

ACCEPT = "accept"
REJECT = "reject"


@dataclass(frozen=True)
class PolicyDecision:
    verdict: str
    coach: int | None = None
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return self.verdict == ACCEPT

    @classmethod
    def accept(cls, coach: int | None, reason: str = "") -> "PolicyDecision":
        return cls(ACCEPT, coach, reason)

    @classmethod
    def reject(cls, reason: str = "") -> "PolicyDecision":
        return cls(REJECT, None, reason)


@dataclass
class PolicyContext:
    """What a policy may know before the horizon starts, plus a shared solve cache."""

    types: list[RequestType]
    train: Train
    n_legs: int
    arrival: ArrivalModel
    days: int = 30
    cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_instance(cls, instance: Instance, arrival: ArrivalModel | None = None, days: int = 30):
        arrival = arrival or ArrivalModel.from_instance(instance)
        return cls(list(instance.types), instance.train, instance.n_legs, arrival, days)

    @property
    def delta(self) -> float:
        return max(t.group_size for t in self.types) / self.train.omega

    def survival(self) -> np.ndarray:
        if "survival" not in self.cache:
            self.cache["survival"] = self.arrival.survival_curve().values
        return self.cache["survival"]

    def expected_remaining(self, step: int) -> float:
        """Expected arrivals from ``step`` on, given that ``step`` is reached."""
        if "tail" not in self.cache:
            v = self.survival()
            self.cache["tail"] = np.cumsum(v[::-1])[::-1] / v
        if step > self.arrival.horizon:
            return 0.0
        return float(self.cache["tail"][step - 1])

    def fluid(self) -> FluidSolution:
        if "fluid" not in self.cache:
            self.cache["fluid"] = solve_fluid(self.arrival, self.train, self.types)
        return self.cache["fluid"]

    def apriori(self, psi_threshold: float) -> AprioriPlan:
        key = ("apriori", psi_threshold)
        if key not in self.cache:
            self.cache[key] = solve_apriori(
                self.arrival, self.train, self.types, psi_threshold=psi_threshold
            )
        return self.cache[key]


def first_fit(request: Request, kappa: ResidualCapacity) -> PolicyDecision:
    """Lowest-numbered coach with room, otherwise reject."""
    c = first_fit_coach(kappa, request.rtype)
    return PolicyDecision.accept(c, "first-fit") if c else PolicyDecision.reject("no-fit")


def random_fit(request: Request, kappa: ResidualCapacity, rng: np.random.Generator) -> PolicyDecision:
    """Uniformly random coach with room, otherwise reject."""
    c = random_fit_coach(kappa, request.rtype, rng)
    return PolicyDecision.accept(c, "random-fit") if c else PolicyDecision.reject("no-fit")


class Policy(BaseEstimator):
    """Base class; subclasses implement :meth:`decide`."""

    #: policies that only pick coaches after the last arrival
    defers_coaches = False

    def fit(self, context: PolicyContext):
        self.context_ = context
        return self

    def begin(self, rng=None):
        self.rng_ = check_random_state(rng)
        return self

    def decide(self, request: Request, step: int, kappa: ResidualCapacity) -> PolicyDecision:
        raise NotImplementedError

    def end(self) -> dict[Request, int] | None:
        return None

    @property
    def label(self) -> str:
        return type(self).__name__.removesuffix("Policy")


class FirstFitPolicy(Policy):
    def decide(self, request, step, kappa):
        return first_fit(request, kappa)


class RandomFitPolicy(Policy):
    def decide(self, request, step, kappa):
        return random_fit(request, kappa, self.rng_)


class NRQPolicy(Policy):
    """Sample-then-pack: reject the first ``q * n_estimate`` arrivals, then follow the LP.

    In the packing phase the LP relaxation over every request observed so far
    is solved and the current request is accepted when a uniform draw falls
    below its fractional mass. ``adaptive=True`` compares the draw against the
    type's total LP mass minus the copies of that type already accepted.
    ``stride`` > 1 re-solves only every ``stride``-th packing arrival.
    """

    def __init__(self, q=None, n_estimate=None, stride=1, adaptive=False):
        self.q = q
        self.n_estimate = n_estimate
        self.stride = stride
        self.adaptive = adaptive

    def fit(self, context):
        super().fit(context)
        self.q_ = optimal_q(context.delta) if self.q is None else check_probability(self.q, "q")
        self.n_estimate_ = (
            context.arrival.total_mean if self.n_estimate is None
            else check_positive(self.n_estimate, "n_estimate")
        )
        check_positive_int(self.stride, "stride")
        self.cutoff_ = self.q_ * self.n_estimate_
        return self

    @property
    def label(self) -> str:
        return "AdaptiveROM" if self.adaptive else "ROM"

    def begin(self, rng=None):
        super().begin(rng)
        self.history_: list[Request] = []
        self.seen_: dict[int, int] = {}
        self.assigned_: dict[int, int] = {}
        self.packing_steps_ = 0
        self.last_lp_ = None
        self.lp_solves_ = 0
        return self

    def decide(self, request, step, kappa):
        self.history_.append(request)
        t = request.type_id
        self.seen_[t] = self.seen_.get(t, 0) + 1
        if step <= self.cutoff_:
            return PolicyDecision.reject("sampling")
        if self.packing_steps_ % self.stride == 0 or self.last_lp_ is None:
            self.last_lp_ = solve_offline_lp(self.history_, self.context_.train)
            self.lp_solves_ += 1
        self.packing_steps_ += 1
        type_mass = self.last_lp_.type_mass.get(t, 0.0)
        if self.adaptive:
            score = type_mass - self.assigned_.get(t, 0)
        else:
            # the newest copy of a type receives what is left after the earlier copies
            score = type_mass - (self.seen_[t] - 1)
        score = min(1.0, max(0.0, score))
        z = self.rng_.random()
        if not z < score:
            return PolicyDecision.reject("lp-mass")
        c = first_fit_coach(kappa, request.rtype)
        if c is None:
            return PolicyDecision.reject("no-fit")
        self.assigned_[t] = self.assigned_.get(t, 0) + 1
        return PolicyDecision.accept(c, "lp-mass")


class LambdaPolicy(Policy):
    """Offer type ``t`` at step ``i`` with probability ``min(1, theta * sum_c x[t,i,c] / rate_t)``."""

    def __init__(self, theta=1.0):
        self.theta = theta

    def fit(self, context):
        super().fit(context)
        check_fraction(self.theta, "theta")
        self.mass_ = context.fluid().type_step_mass()
        return self

    @property
    def label(self) -> str:
        return "Lambda" if self.theta == 1.0 else f"Theta{self.theta:g}"

    def offer_probability(self, t: int, step: int) -> float:
        if step > self.mass_.shape[1]:
            return 0.0
        rate = self.context_.arrival.rates[t]
        if rate <= 0:
            return 0.0
        return min(1.0, self.theta * self.mass_[t, step - 1] / rate)

    def decide(self, request, step, kappa):
        z = self.rng_.random()
        if not z < self.offer_probability(request.type_id, step):
            return PolicyDecision.reject("not-offered")
        c = first_fit_coach(kappa, request.rtype)
        return PolicyDecision.accept(c, "offered") if c else PolicyDecision.reject("no-fit")


class FluidPolicy(Policy):
    """Follow the fluid solution's support.

    Among the coaches that still fit, coach ``c`` carries the share
    ``x[t,i,c] / sum_{c' fits} x[t,i,c']`` of the fluid mass. Those shares sum
    to 1 whenever any fitting coach has mass, so the request is accepted
    exactly then, into the first coach that fits. No mass means reject.
    """

    def fit(self, context):
        super().fit(context)
        self.x_ = context.fluid().x
        return self

    def acceptance_probability(self, t: int, step: int, coaches: Sequence[int]) -> float:
        if step > self.x_.shape[1] or not coaches:
            return 0.0
        mass = self.x_[t, step - 1, np.asarray(coaches) - 1]
        total = mass.sum()
        if total <= 1e-12:
            return 0.0
        return float(min(1.0, (mass / total).sum()))

    def decide(self, request, step, kappa):
        coaches = kappa.feasible_coaches(request.rtype)
        p = self.acceptance_probability(request.type_id, step, coaches)
        if p <= 0.0:
            return PolicyDecision.reject("no-fit" if not coaches else "no-mass")
        if p < 1.0 and not self.rng_.random() < p:
            return PolicyDecision.reject("fluid-coin")
        return PolicyDecision.accept(coaches[0], "fluid")


class FixedPolicy(Policy):
    """Serve the ``j``-th arrival of type ``t`` in the coach the a-priori plan reserved for it."""

    def __init__(self, psi_threshold=0.001):
        self.psi_threshold = psi_threshold

    def fit(self, context):
        super().fit(context)
        check_fraction(self.psi_threshold, "psi_threshold")
        self.plan_ = context.apriori(self.psi_threshold)
        return self

    def begin(self, rng=None):
        super().begin(rng)
        self.seen_: dict[int, int] = {}
        return self

    def decide(self, request, step, kappa):
        t = request.type_id
        j = self.seen_[t] = self.seen_.get(t, 0) + 1
        c = self.plan_.coach_for(t, j)
        if c is None:
            return PolicyDecision.reject("unplanned")
        if not kappa.fits(request.rtype, c):  # cannot happen: the plan is capacity-feasible
            return PolicyDecision.reject("plan-conflict")
        return PolicyDecision.accept(c, "planned")


class FCFSPolicy(Policy):
    """Follow an a-priori plan re-optimized at every block start; never turn away a request that fits.

    A request outside the plan that still fits triggers a re-solve with that
    request forced in, and the new plan replaces the old one. If that solve
    runs out of time the request goes to a RandomFit coach.
    """

    def __init__(self, psi_threshold=0.001, block_length=None, time_limit=10.0):
        self.psi_threshold = psi_threshold
        self.block_length = block_length
        self.time_limit = time_limit

    def fit(self, context):
        super().fit(context)
        check_fraction(self.psi_threshold, "psi_threshold")
        if self.block_length is None:
            self.block_length_ = max(1, round(context.arrival.horizon / context.days))
        else:
            self.block_length_ = check_positive_int(self.block_length, "block_length")
        return self

    @property
    def label(self) -> str:
        return "FCFS"

    def begin(self, rng=None):
        super().begin(rng)
        self.block_ = None
        self.plan_: AprioriPlan | None = None
        self.used_: dict[int, int] = {}
        self.block_solves_ = 0
        self.forced_solves_ = 0
        self.fallbacks_ = 0
        return self

    def _solve(self, kappa, step, forced=None):
        ctx = self.context_
        remaining = ctx.expected_remaining(step)
        if remaining <= 0:
            remaining = 1e-9
        return solve_apriori(
            ctx.arrival, ctx.train, ctx.types, psi_threshold=self.psi_threshold,
            residual=kappa, remaining_mean=remaining, forced=forced, time_limit=self.time_limit,
        )

    def decide(self, request, step, kappa):
        block = (step - 1) // self.block_length_
        if block != self.block_:
            self.block_ = block
            try:
                self.plan_ = self._solve(kappa, step)
            except (TimeoutError, ValueError):
                self.plan_ = None
            self.used_ = {}
            self.block_solves_ += 1
        t = request.type_id
        if self.plan_ is not None:
            j = self.used_.get(t, 0) + 1
            c = self.plan_.coach_for(t, j)
            if c is not None and kappa.fits(request.rtype, c):
                self.used_[t] = j
                return PolicyDecision.accept(c, "planned")
        coaches = kappa.feasible_coaches(request.rtype)
        if not coaches:
            return PolicyDecision.reject("no-fit")
        self.forced_solves_ += 1
        try:
            # arrivals still to come exclude the current one
            plan = self._solve(kappa, step + 1, forced=t)
        except (TimeoutError, RuntimeError):
            self.fallbacks_ += 1
            return random_fit(request, kappa, self.rng_)
        c = plan.coach_for(t, 1)
        assert c is not None and kappa.fits(request.rtype, c), "forced plan must place the request"
        self.plan_ = plan
        self.used_ = {t: 1}
        return PolicyDecision.accept(c, "forced")


class SFCFSPolicy(Policy):
    """Accept whenever the accepted set plus the request can still be packed; coaches chosen at the end."""

    defers_coaches = True

    @property
    def label(self) -> str:
        return "SFCFS"

    def begin(self, rng=None):
        super().begin(rng)
        self.accepted_: list[Request] = []
        self.blocked_: list[tuple[int, int, int]] = []
        self.oracle_calls_ = 0
        return self

    def _known_blocked(self, t: RequestType) -> bool:
        # the accepted set only grows, so a blocked shape stays blocked, as does
        # any shape needing at least as many seats on a superset of its legs
        return any(
            o >= t.origin and d <= t.destination and n <= t.group_size for (o, d, n) in self.blocked_
        )

    def decide(self, request, step, kappa):
        t = request.rtype
        if self._known_blocked(t):
            return PolicyDecision.reject("not-packable")
        self.oracle_calls_ += 1
        if packable(self.accepted_ + [request], self.context_.train):
            self.accepted_.append(request)
            return PolicyDecision.accept(None, "packable")
        self.blocked_.append((t.origin, t.destination, t.group_size))
        return PolicyDecision.reject("not-packable")

    def end(self):
        ok, assign = packable(self.accepted_, self.context_.train, return_assignment=True)
        if not ok:
            raise RuntimeError("accepted set is not packable")
        return assign


POLICY_NAMES = {
    "FirstFit": FirstFitPolicy,
    "RandomFit": RandomFitPolicy,
    "ROM": lambda **kw: NRQPolicy(adaptive=False, **kw),
    "AdaptiveROM": lambda **kw: NRQPolicy(adaptive=True, **kw),
    "Lambda": LambdaPolicy,
    "Fluid": FluidPolicy,
    "Fixed": FixedPolicy,
    "FCFS": FCFSPolicy,
    "SFCFS": SFCFSPolicy,
}


def make_policy(name: str, **params) -> Policy:
    """Build a policy from its roster name (see ``POLICY_NAMES``)."""
    check_choice(name, "policy", POLICY_NAMES)
    return POLICY_NAMES[name](**params)
