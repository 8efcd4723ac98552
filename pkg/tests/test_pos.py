import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2gcoord.pos import (AllocationPlan, EvLimits, Stake, age_discount, allocate,
                          energy_weights, propose_allocation, safety_correct, select_proposer,
                          settle_rewards, stake_weights, validate_plan)


def limits(lo, hi, energy=None, eff=0.95):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    e = np.full(lo.shape, 10.0) if energy is None else np.asarray(energy, float)
    return EvLimits(lower_kw=lo, upper_kw=hi, energy_kwh=e, e_next_lower=e + eff * lo,
                    e_next_upper=e + eff * hi, efficiency=np.full(lo.shape, eff))


@st.composite
def limit_sets(draw):
    n = draw(st.integers(1, 8))
    lo = np.array(draw(st.lists(st.floats(-6, 0), min_size=n, max_size=n)))
    width = np.array(draw(st.lists(st.floats(0, 12), min_size=n, max_size=n)))
    return limits(lo, lo + width)


# ---------------------------------------------------------------- proposer


def test_single_staker_always_selected():
    s = [Stake(7, 3.0)]
    assert all(select_proposer(s, seed=i) == 7 for i in range(20))


@pytest.mark.parametrize("locked, expect", [((1.0, 1.0), (0.5, 0.5)), ((3.0, 1.0), (0.75, 0.25))])
def test_proposer_frequencies(locked, expect):
    stakes = [Stake(i, v) for i, v in enumerate(locked)]
    rng = np.random.default_rng(0)
    draws = np.array([select_proposer(stakes, rng=rng) for _ in range(10000)])
    freq = np.bincount(draws, minlength=2) / len(draws)
    assert np.allclose(freq, expect, atol=0.02)


def test_age_discount_and_zero_stakes():
    assert age_discount(1000.0) == pytest.approx(0.5)
    w = stake_weights([Stake(0, 2.0, 1000.0), Stake(1, 1.0, 0.0)])
    assert np.allclose(w, [0.5, 0.5])
    assert np.allclose(stake_weights([Stake(0, 0.0), Stake(1, 0.0)]), [0.5, 0.5])
    with pytest.raises(ValueError):
        select_proposer([])
    with pytest.raises(ValueError):
        Stake(0, -1.0)


def test_proposer_deterministic_per_seed():
    stakes = [Stake(i, float(i + 1)) for i in range(5)]
    assert [select_proposer(stakes, seed=s) for s in range(30)] == \
        [select_proposer(stakes, seed=s) for s in range(30)]


# ------------------------------------------------------------------ weights


def test_energy_weight_examples():
    lim = limits([-6.0, -6.0], [6.0, 2.0])
    plan = propose_allocation(0, 4.0, lim)
    assert np.allclose(plan.power_kw, [3.0, 1.0])
    assert np.allclose(energy_weights(4.0, limits([-1.0], [0.0])), [0.0])
    assert np.allclose(propose_allocation(0, 0.0, lim).power_kw, 0.0)
    assert np.allclose(propose_allocation(0, -3.0, limits([-1.0, -2.0], [1.0, 1.0])).power_kw,
                       [-1.0, -2.0])


def test_single_ev_gets_full_request():
    plan = propose_allocation(0, 2.5, limits([-6.0], [6.0]))
    assert plan.power_kw[0] == pytest.approx(2.5) and plan.residual_kw == pytest.approx(0.0)


def test_three_ev_proportional_split():
    lim = limits([-6.0, -6.0, -6.0], [1.0, 2.5, 4.5])
    plan = propose_allocation(0, 5.0, lim)
    # independent hand split: 5 * [1, 2.5, 4.5] / 8
    assert np.allclose(plan.power_kw, [0.625, 1.5625, 2.8125], atol=1e-9)


def test_no_headroom_reports_full_residual():
    plan = safety_correct(propose_allocation(0, 3.0, limits([0.0, -1.0], [0.0, 0.0])),
                          limits([0.0, -1.0], [0.0, 0.0]))
    assert plan.residual_kw == pytest.approx(3.0)
    assert np.allclose(plan.power_kw, 0.0)


# --------------------------------------------------------------- correction


def test_correction_clips_and_redistributes():
    lim = limits([-6.0, -6.0], [6.0, 6.0])
    plan = AllocationPlan(np.array([8.0, 1.0]), 0.0, 9.0)
    out = safety_correct(plan, lim)
    assert np.allclose(out.power_kw, [6.0, 3.0]) and out.residual_kw == pytest.approx(0.0)


def test_feasible_plan_unchanged():
    lim = limits([-6.0, -6.0], [6.0, 6.0])
    plan = AllocationPlan(np.array([2.0, 1.0]), 0.0, 3.0)
    assert np.array_equal(safety_correct(plan, lim).power_kw, [2.0, 1.0])


def test_two_ev_correction_matches_grid_search():
    lim = limits([-1.0, -4.0], [2.0, 5.0])
    request = 5.5
    plan = safety_correct(AllocationPlan(np.array([4.0, 1.5]), 0.0, request), lim)
    # exhaustive grid: feasible points with the exact sum form a segment; the
    # correction must land on it
    grid = np.round(np.arange(-4.0, 5.0001, 0.25), 10)
    feasible = [(a, b) for a, b in itertools.product(grid, grid)
                if -1 <= a <= 2 and -4 <= b <= 5 and abs(a + b - request) < 1e-9]
    assert feasible
    assert abs(plan.power_kw.sum() - request) < 1e-9
    assert -1 <= plan.power_kw[0] <= 2 and -4 <= plan.power_kw[1] <= 5
    assert np.allclose(plan.power_kw, [2.0, 3.5])


def test_validate_rejects_soc_violation():
    lim = limits([-6.0], [6.0])
    bad = AllocationPlan(np.array([7.0]), -1.0, 6.0)
    assert not validate_plan(bad, lim)
    assert not validate_plan(AllocationPlan(np.array([np.nan]), 0.0, 0.0), lim)
    assert validate_plan(safety_correct(bad, lim), lim)


@settings(max_examples=300, deadline=None)
@given(limit_sets(), st.floats(-60, 60), st.integers(0, 2 ** 31))
def test_allocation_invariants(lim, request, seed):
    rng = np.random.default_rng(seed)
    stakes = [Stake(i, float(v)) for i, v in enumerate(rng.random(len(lim.lower_kw)))]
    plan = allocate(request, lim, stakes, rng)
    p = plan.power_kw
    assert abs(p.sum() + plan.residual_kw - request) <= 1e-9 * max(1.0, abs(request))
    assert np.all(p >= lim.lower_kw) and np.all(p <= lim.upper_kw)
    e = lim.energy_kwh + lim.efficiency * p
    assert np.all(e >= lim.e_next_lower - 1e-12) and np.all(e <= lim.e_next_upper + 1e-12)
    assert plan.validated
    # idempotence of the correction
    again = safety_correct(plan, lim)
    assert np.allclose(again.power_kw, p, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(limit_sets(), st.floats(-60, 60))
def test_sign_consistent_when_possible(lim, request):
    plan = safety_correct(propose_allocation(0, request, lim), lim)
    p = plan.power_kw
    lo, hi = lim.lower_kw, lim.upper_kw
    # each EV's interval restricted to the request's sign (or its forced point)
    if request > 0:
        slo, shi = np.minimum(np.maximum(lo, 0.0), hi), hi
    elif request < 0:
        slo, shi = lo, np.maximum(np.minimum(hi, 0.0), lo)
    else:
        slo = shi = np.clip(0.0, lo, hi)
    if not slo.sum() - 1e-9 <= request <= shi.sum() + 1e-9:
        return  # only moving some EV against the request can meet it
    assert np.all(p >= slo - 1e-12) and np.all(p <= shi + 1e-12)


def test_explicit_proposal_goes_through_correction():
    lim = limits([-6.0, -6.0], [6.0, 6.0])
    plan = allocate(9.0, lim, [Stake(0, 1.0), Stake(1, 1.0)], np.random.default_rng(0),
                    proposal=[8.0, 1.0])
    assert np.allclose(plan.proposed_kw, [8.0, 1.0])
    assert np.allclose(plan.power_kw, [6.0, 3.0]) and plan.validated


def test_allocate_without_stakes():
    plan = allocate(0.0, limits([], []), [], np.random.default_rng(0))
    assert plan.proposer_id == -1 and plan.power_kw.size == 0


# ----------------------------------------------------------------- settling


def test_settlement_examples():
    lim = limits([-6.0], [6.0])
    zero = settle_rewards(safety_correct(AllocationPlan(np.zeros(1), 0.0, 0.0), lim), [4],
                          0.1, 0.0, 10.0)
    assert zero[0].energy_kwh == 0 and zero[0].charge_cost == 0 and zero[0].slashed_kwh == 0
    plan = AllocationPlan(np.array([6.0, 0.0]), 0.0, 6.0)
    out = settle_rewards(plan, [1, 2], 0.1, [0.2, 0.0], [0.0, 10.0], deviated=[False, True])
    assert out[0].charge_cost == pytest.approx(0.6) and out[0].degradation_cost == 0.2
    assert out[1].slashed_kwh == pytest.approx(0.5)
