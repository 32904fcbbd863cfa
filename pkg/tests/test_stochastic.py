import math

import numpy as np
import pytest
from scipy import stats

from coachres.data import shinkansen_mini, toy_instance
from coachres.domain import RequestType, ResidualCapacity, Train
from coachres.linprog import solve_mip
from coachres.stochastic import (
    ArrivalModel,
    EmptyPsi,
    OutOfHorizon,
    build_apriori_compact,
    build_apriori_model,
    default_horizon,
    psi_set,
    solve_apriori,
    solve_fluid,
)


def small_arrival(total=2.0, horizon=6, rates=(0.5, 0.25, 0.25)):
    return ArrivalModel(rates, horizon, total)


def test_horizon_rule():
    assert default_horizon(350) == 425
    assert default_horizon(2780) == 2991


def test_survival_matches_conditioned_poisson():
    a = small_arrival()
    assert a.survival(1) == pytest.approx(1.0)
    assert a.survival(3) == pytest.approx(0.3739294, abs=1e-7)
    for i in range(1, 7):
        direct = stats.poisson.sf(i - 1, 2.0) / stats.poisson.sf(0, 2.0)
        assert a.survival(i) == pytest.approx(direct, rel=1e-12)


def test_survival_is_non_increasing_and_bounded():
    curve = ArrivalModel.from_instance(shinkansen_mini()).survival_curve().values
    assert curve[0] == 1.0
    assert (np.diff(curve) <= 1e-15).all()
    assert ((curve >= 0) & (curve <= 1)).all()


def test_out_of_horizon():
    a = small_arrival()
    with pytest.raises(OutOfHorizon):
        a.survival(0)
    with pytest.raises(OutOfHorizon):
        a.survival(7)
    with pytest.raises(OutOfHorizon):
        a.continue_probability(6)


def test_continue_probabilities_telescope():
    a = small_arrival()
    s = a.continue_probabilities()
    assert s[-1] == 0.0
    prod = np.concatenate([[1.0], np.cumprod(s[:-1])])
    np.testing.assert_allclose(prod, a.survival_curve().values, rtol=1e-12)
    assert a.continue_probability(2) == pytest.approx(s[1])


def test_type_survival():
    a = ArrivalModel((0.5, 0.5), 20, 6.0)
    assert a.type_survival(0, 1) == pytest.approx(1 - math.exp(-3), abs=1e-12)
    assert a.type_survival(0, 1) == pytest.approx(0.9502, abs=1e-4)
    js = np.arange(1, 10)
    assert (np.diff(a.type_survival_array(0, js)) < 0).all()
    with pytest.raises(ValueError):
        a.type_survival(0, 0)


def test_expected_remaining():
    a = small_arrival()
    assert a.expected_remaining(1) == pytest.approx(a.survival_curve().values.sum())
    assert a.expected_remaining(6) == pytest.approx(1.0)


def test_deterministic_model():
    a = ArrivalModel((1.0,), 4, 4.0, "deterministic")
    assert a.survival(4) == 1.0
    assert a.type_survival(0, 4) == pytest.approx(1.0)
    assert a.type_survival(0, 5) == pytest.approx(0.0)


@pytest.mark.parametrize(
    "kwargs",
    [dict(rates=(0.5, 0.6)), dict(rates=()), dict(horizon=0), dict(total=0.0)],
)
def test_invalid_arrival_model(kwargs):
    args = dict(rates=(0.5, 0.5), horizon=5, total=2.0)
    args.update(kwargs)
    with pytest.raises(ValueError):
        ArrivalModel(args["rates"], args["horizon"], args["total"])


def test_from_instance_normalizes_rates():
    inst = toy_instance()
    a = ArrivalModel.from_instance(inst)
    assert sum(a.rates) == pytest.approx(1.0)
    assert a.horizon == 3 and a.total_mean == 3.0


# ---------------------------------------------------------------- fluid
def _tiny_types():
    return [RequestType(1, 3, 2, 10), RequestType(1, 2, 1, 4), RequestType(2, 3, 1, 4)]


def test_fluid_routes_agree():
    a = small_arrival()
    train = Train((2, 3))
    agg = solve_fluid(a, train, _tiny_types())
    lit = solve_fluid(a, train, _tiny_types(), aggregate=False)
    assert agg.value == pytest.approx(lit.value, abs=1e-7)
    assert agg.x.shape == lit.x.shape == (3, 6, 2)
    # the proportional split respects every per-coach constraint
    cap = np.array([2, 3])
    n = np.array([2, 1, 1])
    for leg_types in ([0, 1], [0, 2]):
        load = (agg.x[leg_types] * n[leg_types, None, None]).sum(axis=(0, 1))
        assert (load <= cap + 1e-9).all()
    assert (agg.type_step_mass() <= np.array(a.rates)[:, None] + 1e-9).all()


def test_fluid_with_plenty_of_room_takes_everything():
    a = small_arrival()
    sol = solve_fluid(a, Train((50,)), _tiny_types())
    surv = a.survival_curve().values
    expect = sum(r * t.price for r, t in zip(a.rates, _tiny_types())) * surv.sum()
    assert sol.value == pytest.approx(expect)


def test_fluid_type_count_checked():
    with pytest.raises(ValueError):
        solve_fluid(small_arrival(), Train((2,)), _tiny_types()[:2])


# ---------------------------------------------------------------- psi and a-priori
def test_psi_membership_and_threshold():
    a = small_arrival(total=4.0, horizon=12)
    loose = psi_set(a, 0.001)
    tight = psi_set(a, 0.2)
    assert tight.members <= loose.members
    for (t, j), p in loose.probabilities.items():
        assert p >= 0.001
        if j > 1:
            assert (t, j - 1) in loose
    assert loose.count(0) >= loose.count(1)
    with pytest.raises(ValueError):
        psi_set(a, 0.0)


def test_empty_psi():
    a = small_arrival()
    with pytest.raises(EmptyPsi):
        solve_apriori(a, Train((2,)), _tiny_types(), psi_threshold=1.0)
    with pytest.raises(EmptyPsi):
        build_apriori_model(a, Train((2,)), _tiny_types(), 1.0)


@pytest.mark.parametrize("seed", range(12))
def test_compact_apriori_equals_binary_model(seed):
    rng = np.random.default_rng(seed)
    n_legs = int(rng.integers(1, 4))
    caps = tuple(int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 3))))
    types = []
    for _ in range(int(rng.integers(1, 4))):
        o = int(rng.integers(1, n_legs + 1))
        d = int(rng.integers(o + 1, n_legs + 2))
        types.append(RequestType(o, d, int(rng.integers(1, min(caps) + 1)), int(rng.integers(1, 20))))
    rates = rng.dirichlet(np.ones(len(types)))
    a = ArrivalModel(tuple(rates), 10, float(rng.uniform(1, 5)))
    train = Train(caps)
    m, psi = build_apriori_model(a, train, types, 0.01)
    binary = solve_mip(m).objective
    plan = solve_apriori(a, train, types, psi_threshold=0.01)
    assert plan.objective == pytest.approx(binary, abs=1e-6)
    # the plan respects every coach
    free = ResidualCapacity.empty(train, n_legs)
    for t, rt in enumerate(types):
        for c in train.coaches:
            for _ in range(plan.w[t, c - 1]):
                free.consume(rt, c)


def test_apriori_plan_lookup():
    a = small_arrival(total=4.0, horizon=12)
    plan = solve_apriori(a, Train((2, 2)), _tiny_types())
    for t in range(3):
        planned = plan.planned(t)
        coaches = [plan.coach_for(t, j) for j in range(1, planned + 1)]
        assert None not in coaches and coaches == sorted(coaches)
        assert plan.coach_for(t, planned + 1) is None
    assert plan.coach_for(0, 0) is None
    assert len(plan.serviced()) == plan.w.sum()


def test_forced_copy_is_planned():
    a = small_arrival(total=4.0, horizon=12)
    train = Train((2,))
    plan = solve_apriori(a, train, _tiny_types())
    # the pair fills the coach; forcing a single displaces it
    assert plan.planned(0) == 1 and plan.planned(1) == 0
    forced = solve_apriori(a, train, _tiny_types(), forced=1)
    assert forced.planned(1) >= 1 and forced.coach_for(1, 1) == 1
    assert forced.planned(0) == 0
    assert forced.objective < plan.objective + 4
    full = ResidualCapacity([[0, 2]], [2])
    with pytest.raises(RuntimeError):
        solve_apriori(a, train, _tiny_types(), residual=full, forced=1)


def test_remaining_mean_shrinks_the_plan():
    a = small_arrival(total=4.0, horizon=12)
    train = Train((10,))
    early = solve_apriori(a, train, _tiny_types())
    late = solve_apriori(a, train, _tiny_types(), remaining_mean=0.5)
    assert late.w.sum() <= early.w.sum()
    assert late.objective < early.objective


def test_compact_model_shapes():
    probs = [np.array([0.9, 0.5]), np.array([]), np.array([0.7])]
    m, w, u = build_apriori_compact(probs, Train((2,)), _tiny_types())
    assert set(u) == {(0, 1), (0, 2), (2, 1)}
    assert set(w) == {(0, 1), (2, 1)}
