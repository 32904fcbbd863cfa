"""Closed-form performance guarantees and an exact dynamic-programming oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import RequestType, Train
from .stochastic import ArrivalModel

__all__ = [
    "DomainError",
    "HypothesisViolated",
    "StateSpaceTooLarge",
    "BoundInputs",
    "Guarantee",
    "rom_ratio",
    "optimal_q",
    "naori_baseline",
    "per_arrival_bound",
    "fluid_guarantee",
    "theta_guarantee",
    "optimize_theta",
    "safe_assignment_threshold",
    "is_safe_occupancy",
    "exact_dp_value",
]

DP_STATE_LIMIT = 10**7


class DomainError(ValueError):
    """Argument outside the domain where the formula is defined."""


class HypothesisViolated(ValueError):
    """Parameters violate the hypothesis under which the guarantee holds."""


class StateSpaceTooLarge(ValueError):
    """The exact DP would need more states than the configured limit."""


@dataclass(frozen=True)
class BoundInputs:
    delta: float
    coaches: int
    omega: int
    legs: int
    theta: float | None = None

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise DomainError("delta must lie in (0, 1]")
        if self.delta * self.omega < 1 - 1e-12:
            raise DomainError("delta * omega must be at least 1 (a group takes a seat)")
        if self.coaches < 1 or self.omega < 1 or self.legs < 0:
            raise DomainError("coaches and omega must be positive, legs non-negative")


@dataclass(frozen=True)
class Guarantee:
    """A multiplicative factor; ``vacuous`` marks a raw value below 0 that was clamped."""

    factor: float
    raw: float
    vacuous: bool

    def __float__(self) -> float:
        return self.factor


def rom_ratio(delta: float) -> float:
    """Competitive ratio ``1 - ln(2 - delta) / (1 - delta)`` of the sample-then-pack rule."""
    if not 0 <= delta < 1:
        raise DomainError("delta must lie in [0, 1)")
    return 1.0 - math.log(2.0 - delta) / (1.0 - delta)


def optimal_q(delta: float) -> float:
    """Sampling fraction ``1 / (2 - delta)`` attaining :func:`rom_ratio`."""
    if not 0 <= delta < 1:
        raise DomainError("delta must lie in [0, 1)")
    return 1.0 / (2.0 - delta)


def naori_baseline(legs: int) -> float:
    """Earlier general-purpose ratio ``1 / (4 legs + 2)``."""
    if legs < 1:
        raise DomainError("legs must be at least 1")
    return 1.0 / (4 * legs + 2)


def per_arrival_bound(i: int, q: float, n: float, delta: float) -> float:
    """Multiplier ``1 - ln((i - 1) / (q n)) / (1 - delta)`` on ``OPT / n`` for arrival ``i``."""
    if not 0 <= delta < 1:
        raise DomainError("delta must lie in [0, 1)")
    if i <= q * n:
        raise DomainError(f"arrival {i} lies in the sampling phase (<= {q * n})")
    return 1.0 - math.log((i - 1) / (q * n)) / (1.0 - delta)


def _clamp(raw: float) -> Guarantee:
    return Guarantee(min(1.0, max(0.0, raw)), raw, raw < 0)


def fluid_guarantee(inputs: BoundInputs) -> Guarantee:
    """``1 - L exp(-C d^2 / (2 omega + 2 d / 3))`` with ``d = 1/delta - omega``."""
    if inputs.delta < 2.0 / inputs.omega - 1e-12:
        raise HypothesisViolated("the guarantee needs delta >= 2 / omega")
    d = 1.0 / inputs.delta - inputs.omega
    denom = 2.0 * inputs.omega + (2.0 / 3.0) * d
    if denom <= 0:
        raise DomainError("exponent denominator is not positive for these parameters")
    raw = 1.0 - inputs.legs * math.exp(-inputs.coaches * d * d / denom)
    return _clamp(raw)


def theta_guarantee(inputs: BoundInputs, theta: float) -> Guarantee:
    """Scaled-offer factor ``theta (1 - L exp(-(C/2) d^2 / (theta omega + d/3)))``, ``d = 1/delta - theta omega``."""
    if not 0 < theta <= 1:
        raise DomainError("theta must lie in (0, 1]")
    d = 1.0 / inputs.delta - theta * inputs.omega
    denom = theta * inputs.omega + d / 3.0
    if denom <= 0:
        raise DomainError("exponent denominator is not positive for these parameters")
    raw = theta * (1.0 - inputs.legs * math.exp(-(inputs.coaches / 2.0) * d * d / denom))
    return _clamp(raw)


def optimize_theta(inputs: BoundInputs, tol: float = 1e-5, grid: int = 400) -> tuple[float, float]:
    """Maximize :func:`theta_guarantee` over ``(0, 1]``.

    The factor need not be unimodal in ``theta`` (the deviation term changes
    sign), so a coarse grid locates the best bracket and golden-section search
    refines it to ``tol``.
    """
    def f(th: float) -> float:
        try:
            return theta_guarantee(inputs, th).raw
        except DomainError:
            return -math.inf

    thetas = np.linspace(1.0 / grid, 1.0, grid)
    vals = np.array([f(t) for t in thetas])
    k = int(np.argmax(vals))
    lo = thetas[max(k - 1, 0)] if k > 0 else 1e-9
    hi = thetas[min(k + 1, grid - 1)]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    best = max([(thetas[k], vals[k]), (c, fc), (d, fd), (1.0, f(1.0))], key=lambda p: p[1])
    theta = float(best[0])
    return theta, theta_guarantee(inputs, theta).factor


def safe_assignment_threshold(delta: float, coaches: int) -> float:
    """Normalized occupancy (coach capacity = 1), summed over coaches, up to which a group fits on a leg.

    On one leg with equal coaches, if the summed occupancy is at most
    ``(1 - delta) * coaches`` some coach has ``delta * capacity`` seats free.
    """
    if not 0 < delta <= 1:
        raise DomainError("delta must lie in (0, 1]")
    return (1.0 - delta) * coaches


def is_safe_occupancy(free: np.ndarray, capacities: Sequence[int], delta: float) -> bool:
    """Whether the normalized occupancy, summed over coaches, is within the threshold on every leg."""
    caps = np.asarray(capacities, dtype=float)
    occ = (caps[:, None] - np.asarray(free)) / caps[:, None]
    return bool((occ.sum(axis=0) <= safe_assignment_threshold(delta, len(caps)) + 1e-12).all())


def exact_dp_value(
    train: Train,
    types: Sequence[RequestType],
    arrival: ArrivalModel,
    n_legs: int | None = None,
    state_limit: int = DP_STATE_LIMIT,
) -> float:
    """Optimal expected revenue by backward induction over (free seats, step).

    ``J(k, i) = sum_t rate_t * max(s_i J(k, i+1), max_c [p_t + s_i J(k - load, i+1)])``
    over coaches ``c`` that can take type ``t``, with ``J(., horizon + 1) = 0``.
    """
    if n_legs is None:
        n_legs = max(t.destination for t in types) - 1
    caps = np.array(train.coach_capacities, dtype=np.int64)
    radices = np.repeat(caps + 1, n_legs)  # coach-major, matching free.ravel()
    n_states = int(np.prod(radices.astype(float)))
    if n_states * arrival.horizon > state_limit:
        raise StateSpaceTooLarge(f"{n_states} capacity states x {arrival.horizon} steps")
    weights = np.ones(len(radices), dtype=np.int64)
    for k in range(len(radices) - 2, -1, -1):
        weights[k] = weights[k + 1] * radices[k + 1]
    C = train.n_coaches

    # for every state code, enumerate free seats
    codes = np.arange(n_states, dtype=np.int64)
    digits = (codes[:, None] // weights[None, :]) % radices[None, :]
    free = digits.reshape(n_states, C, n_legs)

    # transitions: next_code[t][c] for states where coach c fits type t, else -1
    transitions = []
    for t in types:
        sl = slice(t.origin - 1, t.destination - 1)
        per_coach = []
        for c in range(C):
            fits = free[:, c, sl].min(axis=1) >= t.group_size
            delta = int(t.group_size * weights[c * n_legs + t.origin - 1 : c * n_legs + t.destination - 1].sum())
            per_coach.append(np.where(fits, codes - delta, -1))
        transitions.append(per_coach)

    s = arrival.continue_probabilities()
    rates = np.array(arrival.rates)
    J_next = np.zeros(n_states)
    for i in range(arrival.horizon, 0, -1):
        cont = s[i - 1] * J_next
        J = np.zeros(n_states)
        for t, rt in enumerate(types):
            best = cont.copy()
            for nxt in transitions[t][:]:
                ok = nxt >= 0
                cand = np.full(n_states, -np.inf)
                cand[ok] = rt.price + s[i - 1] * J_next[nxt[ok]]
                best = np.maximum(best, cand)
            J += rates[t] * best
        J_next = J
    start = int((caps.repeat(n_legs) * weights).sum())
    return float(J_next[start])
