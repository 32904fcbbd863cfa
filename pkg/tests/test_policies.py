import math

import numpy as np
import pytest
from scipy import stats

from coachres.data import shinkansen_mini, toy_instance
from coachres.domain import Instance, Network, RequestType, ResidualCapacity, Train, make_requests
from coachres.policies import (
    FCFSPolicy,
    FirstFitPolicy,
    FixedPolicy,
    FluidPolicy,
    LambdaPolicy,
    NRQPolicy,
    POLICY_NAMES,
    PolicyContext,
    PolicyDecision,
    RandomFitPolicy,
    SFCFSPolicy,
    first_fit,
    make_policy,
    random_fit,
)
from coachres.sim import audit_fcfs, audit_sfcfs, generate_instance, run_policy
from coachres.stochastic import ArrivalModel


def toy_with_order(*ids):
    inst = toy_instance()
    inst.arrivals = list(ids)
    return inst


def feed(policy, inst, rng=0):
    """Run ``policy`` on ``inst`` and return the decisions."""
    ctx = PolicyContext.from_instance(inst)
    policy.fit(ctx).begin(rng)
    kappa = inst.empty_capacity()
    out = []
    for step, r in enumerate(inst.requests(), start=1):
        d = policy.decide(r, step, kappa)
        if d.accepted and not policy.defers_coaches:
            kappa.consume(r.rtype, d.coach)
        out.append(d)
    return out


# ---------------------------------------------------------------- simple rules
def test_first_fit_lowest_coach():
    kappa = ResidualCapacity([[0, 2], [2, 2], [2, 2]], [2, 2, 2])
    r = make_requests([RequestType(1, 3, 1, 1)], [0])[0]
    assert first_fit(r, kappa) == PolicyDecision.accept(2, "first-fit")
    kappa.free[:] = 0
    assert not first_fit(r, kappa).accepted


def test_random_fit_is_uniform_over_fitting_coaches():
    kappa = ResidualCapacity([[2, 2], [0, 2], [2, 2], [2, 2]], [2] * 4)
    r = make_requests([RequestType(1, 3, 1, 1)], [0])[0]
    rng = np.random.default_rng(7)
    counts = np.bincount([random_fit(r, kappa, rng).coach for _ in range(6000)], minlength=5)
    assert counts[2] == 0
    chi2 = stats.chisquare(counts[[1, 3, 4]])
    assert chi2.pvalue > 0.001


# ---------------------------------------------------------------- NRQ
def test_nrq_rejects_the_sampling_phase():
    inst = generate_instance(shinkansen_mini(), 3)
    pol = NRQPolicy(q=0.5, n_estimate=40, stride=50)
    decisions = feed(pol, inst)
    assert all(d.reason == "sampling" for d in decisions[:20])
    assert all(d.reason != "sampling" for d in decisions[20:])


def test_nrq_default_q_from_group_share():
    ctx = PolicyContext.from_instance(shinkansen_mini())
    pol = NRQPolicy().fit(ctx)
    assert ctx.delta == pytest.approx(6 / 25)
    assert pol.q_ == pytest.approx(1 / (2 - 6 / 25))
    assert pol.cutoff_ == pytest.approx(pol.q_ * 350)


def test_nrq_follows_integral_lp_mass():
    # no sampling: the pair gets LP mass 1, the single behind it mass 0
    for adaptive in (False, True):
        pol = NRQPolicy(q=0.1, n_estimate=1, adaptive=adaptive)
        d = feed(pol, toy_with_order(0, 1, 2))
        assert [x.verdict for x in d] == ["accept", "reject", "reject"]
        assert d[0].coach == 1 and d[1].reason == "lp-mass"
        assert pol.lp_solves_ == 3


def test_nrq_scores_by_copy_and_by_assignment():
    # three identical singles, one seat: LP mass 1 for the type
    inst = Instance(Network(("A", "B")), Train((1,)), [RequestType(1, 2, 1, 5, 1.0)], [0, 0, 0],
                    {"total_mean": 3.0, "horizon": 3})
    plain = feed(NRQPolicy(q=0.1, n_estimate=1), inst)
    # mass 1 goes to the first copy; later copies score 1 - 1 = 0, 1 - 2 -> clipped to 0
    assert [d.verdict for d in plain] == ["accept", "reject", "reject"]
    adaptive = feed(NRQPolicy(q=0.1, n_estimate=1, adaptive=True), inst)
    assert [d.verdict for d in adaptive] == ["accept", "reject", "reject"]


def test_adaptive_nrq_recovers_unlucky_draws():
    # the plain rule hands each copy only its own share of the type mass, so a
    # missed draw is lost; the adaptive rule offers it again to later copies
    plain = adaptive = 0
    for seed in (1, 2):
        inst = generate_instance(shinkansen_mini(), seed)
        plain += run_policy(inst, NRQPolicy(stride=10), seed).revenue
        adaptive += run_policy(inst, NRQPolicy(stride=10, adaptive=True), seed).revenue
    assert adaptive > plain


def test_nrq_stride_reuses_the_lp():
    inst = generate_instance(shinkansen_mini(), 5)
    pol = NRQPolicy(q=0.5, n_estimate=40, stride=25)
    feed(pol, inst)
    packing = len(inst.arrivals) - 20
    assert pol.lp_solves_ == math.ceil(packing / 25)


def test_nrq_parameter_checks():
    ctx = PolicyContext.from_instance(toy_instance())
    for bad in (dict(q=1.5), dict(n_estimate=0), dict(stride=0)):
        with pytest.raises(ValueError):
            NRQPolicy(**bad).fit(ctx)


# ---------------------------------------------------------------- fluid family
def roomy_instance():
    types = [RequestType(1, 3, 2, 10, 0.5), RequestType(1, 2, 1, 4, 0.5)]
    return Instance(Network(("A", "B", "C")), Train((40, 40)), types, [0, 1, 1, 0, 1],
                    {"total_mean": 5.0, "horizon": 8})


def test_lambda_with_room_behaves_like_first_fit():
    inst = roomy_instance()
    lam = feed(LambdaPolicy(), inst)
    ff = feed(FirstFitPolicy(), inst)
    assert [(d.verdict, d.coach) for d in lam] == [(d.verdict, d.coach) for d in ff]
    pol = LambdaPolicy().fit(PolicyContext.from_instance(inst))
    assert pol.offer_probability(0, 1) == pytest.approx(1.0)
    assert pol.offer_probability(0, 99) == 0.0


def test_lambda_scaled_offer():
    inst = roomy_instance()
    pol = LambdaPolicy(theta=0.5).fit(PolicyContext.from_instance(inst))
    assert pol.offer_probability(1, 3) == pytest.approx(0.5)
    assert pol.label == "Theta0.5"
    hits = sum(feed(LambdaPolicy(theta=0.5), inst, s)[0].accepted for s in range(400))
    assert 160 < hits < 240


def test_fluid_gate():
    inst = roomy_instance()
    pol = FluidPolicy().fit(PolicyContext.from_instance(inst))
    assert pol.acceptance_probability(0, 1, [1, 2]) == pytest.approx(1.0)
    assert pol.acceptance_probability(0, 1, []) == 0.0
    pol.x_ = pol.x_.copy()
    pol.x_[0, 0, :] = 0.0
    assert pol.acceptance_probability(0, 1, [1, 2]) == 0.0
    # only coach 2 fits and only coach 2 has mass: accepted into coach 2
    pol.x_[0, 0, 1] = 0.3
    pol.begin(0)
    kappa = ResidualCapacity([[1, 40], [40, 40]], [40, 40])
    d = pol.decide(inst.requests()[0], 1, kappa)
    assert d.accepted and d.coach == 2


def test_fluid_rejects_when_the_fluid_plan_has_no_room():
    # one 2-seat coach, the pair dominates: the fluid solution never serves singles early
    inst = toy_with_order(1, 0)
    decisions = feed(FluidPolicy(), inst)
    ctx = PolicyContext.from_instance(inst)
    mass = ctx.fluid().type_step_mass()
    assert decisions[0].accepted == (mass[1, 0] > 1e-12)


# ---------------------------------------------------------------- plan-based
def test_fixed_follows_the_plan():
    inst = generate_instance(shinkansen_mini(), 11)
    pol = FixedPolicy()
    decisions = feed(pol, inst)
    seen = {}
    for r, d in zip(inst.requests(), decisions):
        j = seen[r.type_id] = seen.get(r.type_id, 0) + 1
        assert d.coach == pol.plan_.coach_for(r.type_id, j)
    assert pol.plan_.w.sum() > 0


def test_fcfs_policy_blocks_and_fairness():
    inst = generate_instance(shinkansen_mini(), 2)
    pol = FCFSPolicy(block_length=100)
    trace = run_policy(inst, pol, 2)
    assert trace.error is None
    n = len(inst.arrivals)
    assert pol.block_solves_ == math.ceil(n / 100)
    assert audit_fcfs(trace, inst.train) == []
    assert pol.fallbacks_ == 0


def test_fcfs_policy_accepts_every_fitting_request_on_the_toy():
    for order in [(1, 2, 0), (0, 1, 2), (2, 0, 1)]:
        inst = toy_with_order(*order)
        trace = run_policy(inst, FCFSPolicy(), 0)
        assert audit_fcfs(trace, inst.train) == []
        assert trace.records[0].verdict == "accept"


# ---------------------------------------------------------------- SFCFS
@pytest.mark.parametrize(
    "order,verdicts",
    [((1, 2, 0), ["accept", "accept", "reject"]), ((0, 1, 2), ["accept", "reject", "reject"])],
)
def test_sfcfs_on_the_toy(order, verdicts):
    assert [d.verdict for d in feed(SFCFSPolicy(), toy_with_order(*order))] == verdicts


def test_sfcfs_repacks_where_first_fit_cannot():
    types = [RequestType(1, 2, 1, 1, 0.5), RequestType(1, 2, 2, 2, 0.5)]
    inst = Instance(Network(("A", "B")), Train((3, 3)), types, [0, 0, 1, 1],
                    {"total_mean": 4.0, "horizon": 4})
    ff = run_policy(inst, FirstFitPolicy(), 0)
    sf = run_policy(inst, SFCFSPolicy(), 0)
    assert [r.verdict for r in ff.records][-1] == "reject"
    assert all(r.verdict == "accept" for r in sf.records)
    assert sf.error is None and sorted(sf.assignments.values()) == [1, 1, 2, 2]
    assert audit_sfcfs(sf, inst.train) == []


def test_sfcfs_caches_blocked_shapes():
    types = [RequestType(1, 2, 2, 1, 1.0)]
    inst = Instance(Network(("A", "B")), Train((2,)), types, [0] * 5, {"total_mean": 5.0, "horizon": 5})
    pol = SFCFSPolicy()
    d = feed(pol, inst)
    assert [x.verdict for x in d] == ["accept"] + ["reject"] * 4
    assert pol.oracle_calls_ == 2


# ---------------------------------------------------------------- estimator API
def test_params_round_trip():
    pol = NRQPolicy(q=0.3, stride=5)
    assert pol.get_params() == {"q": 0.3, "n_estimate": None, "stride": 5, "adaptive": False}
    pol.set_params(adaptive=True)
    assert pol.label == "AdaptiveROM"
    assert FCFSPolicy().get_params()["time_limit"] == 10.0


def test_make_policy_covers_the_roster():
    for name in POLICY_NAMES:
        assert make_policy(name).label in (name, "Lambda")
    with pytest.raises(ValueError):
        make_policy("Nope")
    assert isinstance(make_policy("RandomFit"), RandomFitPolicy)


def test_fluid_frequency_on_a_frozen_state():
    inst = roomy_instance()
    pol = FluidPolicy().fit(PolicyContext.from_instance(inst))
    kappa = ResidualCapacity([[0, 40], [40, 40]], [40, 40])
    r = inst.requests()[1]
    p = pol.acceptance_probability(r.type_id, 2, kappa.feasible_coaches(r.rtype))
    pol.begin(3)
    freq = np.mean([pol.decide(r, 2, kappa).accepted for _ in range(10_000)])
    assert abs(freq - p) <= 0.02


def test_adaptive_nrq_clips_large_type_mass():
    # two singles fit easily: type mass 2, nothing assigned yet, so the first is always accepted
    inst = Instance(Network(("A", "B")), Train((4,)), [RequestType(1, 2, 1, 5, 1.0)], [0, 0],
                    {"total_mean": 2.0, "horizon": 2})
    for seed in range(20):
        assert all(d.accepted for d in feed(NRQPolicy(q=0.01, n_estimate=1, adaptive=True), inst, seed))


def test_lambda_rejects_without_fluid_mass_or_room():
    inst = roomy_instance()
    pol = LambdaPolicy().fit(PolicyContext.from_instance(inst))
    pol.mass_ = np.zeros_like(pol.mass_)
    pol.begin(0)
    r = inst.requests()[0]
    assert not pol.decide(r, 1, inst.empty_capacity()).accepted
    pol = LambdaPolicy().fit(PolicyContext.from_instance(inst)).begin(0)
    full = ResidualCapacity([[0, 40], [40, 0]], [40, 40])
    assert pol.decide(r, 1, full).reason == "no-fit"


def test_lambda_theta_one_matches_default():
    inst = generate_instance(shinkansen_mini(), 4)
    a = run_policy(inst, LambdaPolicy(), 4)
    b = run_policy(inst, LambdaPolicy(theta=1.0), 4)
    assert a.csv_rows() == b.csv_rows()
    with pytest.raises(ValueError):
        LambdaPolicy(theta=0.0).fit(PolicyContext.from_instance(inst))
