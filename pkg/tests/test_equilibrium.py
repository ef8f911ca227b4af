from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scripmon.core import RandomStream, unit_counts_to_tokens, validate_params
from scripmon.engine import EngineState
from scripmon.equilibrium import (
    MarkovChain,
    best_response,
    check_reversibility,
    enumerate_chain,
    enumerate_round_chain,
    find_equilibrium_threshold,
    max_entropy_distribution,
    solve_best_response,
    stationary_distribution,
    steady_state_for,
    uniform_holdings_distribution,
    volunteer_density_bound,
    welfare_inadvertent,
    welfare_strategic,
)
from scripmon.errors import (
    InfeasibleMean,
    NoFixedPoint,
    NotIrreducible,
    NoVolunteers,
    Periodic,
    StateSpaceTooLarge,
)
from scripmon.mechanism import ThresholdPolicy

HALF = {"b": Fraction(1, 2)}
BIG = dict(n=1000, b=0.2, k=5, tokens_per_agent=2, alpha=0.05)


def test_two_agent_chain_by_hand():
    chain = enumerate_chain(2, 1, 1, HALF)
    assert sorted(chain.states) == [(0, 1), (1, 0)]
    # one posting move with weight 1/2, normalised by 1 + b = 3/2
    assert chain.prob((1, 0), (0, 1)) == Fraction(1, 3)
    assert chain.prob((1, 0), (1, 0)) == Fraction(2, 3)
    assert check_reversibility(chain).exact
    rep = stationary_distribution(chain)
    assert rep.uniform and rep.doubly_stochastic


def test_single_agent_chain_is_absorbing():
    chain = enumerate_chain(1, 2, 1, HALF)
    assert chain.states == [(2,)]
    assert chain.transitions == {0: {0: Fraction(1)}}


@pytest.mark.parametrize("ns,total,k,b", [(2, 1, 1, Fraction(1, 2)), (3, 3, 2, Fraction(1, 2)),
                                          (4, 4, 2, Fraction(1, 3)), (4, 2, 1, Fraction(1, 2))])
def test_rows_are_exact_and_symmetric(ns, total, k, b):
    chain = enumerate_chain(ns, total, k, {"b": b})
    assert all(r == 1 for r in chain.row_sums())
    assert check_reversibility(chain).max_asymmetry == 0
    assert stationary_distribution(chain).uniform


def test_strategic_chain_is_symmetric_too():
    chain = enumerate_chain(3, 3, 2, {"beta_star": Fraction(1, 2), "kappa": 2.0})
    assert check_reversibility(chain).exact
    assert stationary_distribution(chain).uniform


def hand_chain(rows, start=(0,)):
    states = [(i,) for i in range(len(rows))]
    trans = {i: {j: Fraction(v) for j, v in enumerate(r) if v} for i, r in enumerate(rows)}
    return MarkovChain(states, trans, states[0], validate_params(dict(n=1, b=0.5, k=1, total_tokens=0)))


def test_asymmetric_chain_is_flagged():
    chain = hand_chain([["1/2", "1/2", 0], [0, "1/2", "1/2"], ["1/2", 0, "1/2"]])
    rep = check_reversibility(chain)
    assert rep.max_asymmetry == Fraction(1, 2) and not rep.exact
    # this cyclic chain happens to be doubly stochastic, so still uniform
    assert stationary_distribution(chain).uniform
    lopsided = hand_chain([["1/2", "1/2"], ["1/4", "3/4"]])
    rep = stationary_distribution(lopsided)
    assert not rep.doubly_stochastic
    assert np.allclose(rep.pi, [1 / 3, 2 / 3])


def test_reducible_and_periodic_chains_are_rejected():
    with pytest.raises(NotIrreducible):
        stationary_distribution(hand_chain([[1, 0], [0, 1]]))
    with pytest.raises(Periodic):
        stationary_distribution(hand_chain([[0, 1], [1, 0]]))


def test_state_space_guard():
    with pytest.raises(StateSpaceTooLarge):
        enumerate_chain(12, 24, 5, {"b": 0.2})


def test_uniform_states_weight_two_token_agents_by_count():
    chain = enumerate_chain(4, 2, 1, HALF)
    doubles = [s for s in chain.states if max(s) == 2]
    singles = [s for s in chain.states if max(s) == 1]
    assert (len(doubles), len(singles)) == (4, 6)
    rep = stationary_distribution(chain)
    mass = {s: w for s, w in zip(chain.states, rep.pi)}
    ratio = sum(mass[s] for s in singles) / sum(mass[s] for s in doubles)
    assert ratio == pytest.approx((4 - 1) / 2, abs=1e-10)
    h = rep.holdings.fractions
    assert h[1] == pytest.approx(0.3) and h[2] == pytest.approx(0.1)


def test_cap_reachable_chain_is_not_symmetric():
    chain = enumerate_chain(5, 10, 5, {"b": 0.2})
    assert not check_reversibility(chain).exact


def test_round_kernel_matches_simulation():
    p = validate_params(dict(n=3, b=Fraction(1, 2), k=2, total_tokens=3))
    chain = enumerate_round_chain(3, 3, 2, p)
    exact = stationary_distribution(chain).holdings.fractions
    pol = ThresholdPolicy(2)
    es = EngineState(p, np.array(chain.start_state), pol.thresholds_units(3, 1), pol.bad_probs(3, 0.5))
    es.run(2 * 10**6, RandomStream(21), accumulate=True)
    sim = unit_counts_to_tokens(es.level_time, p.unit)
    sim = sim / sim.sum()
    assert np.abs(sim[: exact.size] - exact).max() < 2e-3


def test_maxent_on_ten_levels():
    d = max_entropy_distribution(10, 2.0)
    f = d.fractions
    assert f.size == 11
    assert np.all(np.diff(f) < 0)
    assert abs(d.mean() - 2.0) < 1e-10


def test_maxent_degenerate_means():
    assert list(max_entropy_distribution(4, 0).fractions) == [1, 0, 0, 0, 0]
    assert list(max_entropy_distribution(4, 4).fractions) == [0, 0, 0, 0, 1]
    assert np.allclose(max_entropy_distribution(4, 2).fractions, 0.2)
    assert list(max_entropy_distribution(0, 0).fractions) == [1.0]
    with pytest.raises(InfeasibleMean):
        max_entropy_distribution(4, 4.5)
    with pytest.raises(InfeasibleMean):
        max_entropy_distribution(4, -0.1)


@settings(max_examples=60)
@given(st.integers(1, 40), st.floats(0.0, 1.0))
def test_maxent_hits_any_feasible_mean(cap, frac):
    mean = cap * frac
    d = max_entropy_distribution(cap, mean)
    assert abs(d.mean() - mean) < 1e-10
    f = d.fractions
    assert abs(f.sum() - 1) < 1e-12
    # geometric shape: monotone in the direction of the mean
    steps = np.diff(f)
    assert np.all(steps <= 1e-15) or np.all(steps >= -1e-15)


def test_maxent_approaches_chain_as_agents_are_added():
    ref = steady_state_for(validate_params({**BIG, "n": 10}))
    gaps = []
    for ns in (2, 3, 4, 5):
        chain = enumerate_chain(ns, 2 * ns, 5, {"b": 0.2})
        d = uniform_holdings_distribution(chain)
        gaps.append(float(np.linalg.norm(d.padded(11) - ref.padded(11))))
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def params_at(delta):
    return validate_params({**BIG, "delta": delta})


def test_impatient_agents_never_volunteer():
    assert best_response(5, params_at(0.01)) == 0


def test_best_response_is_nondecreasing():
    p = params_at(0.99)
    br = [best_response(k, p) for k in range(1, 9)]
    assert all(a <= b for a, b in zip(br, br[1:]))
    assert br[0] >= 1


def test_nobody_below_threshold_zero():
    with pytest.raises(NoVolunteers):
        solve_best_response(0, params_at(0.99))


def test_threshold_choice_is_best_in_family():
    res = solve_best_response(5, params_at(0.5))
    assert res.scores[res.threshold] == res.scores.max()
    assert res.gap >= -1e-9


def test_far_above_the_crowd_is_worse():
    res = solve_best_response(5, params_at(0.5))
    assert res.scores[8] < res.scores[5]


@pytest.mark.xfail(strict=True, reason="forced reward payments make holding the reward amount costly")
def test_value_is_nondecreasing_in_holdings():
    v = solve_best_response(5, params_at(0.99)).values
    assert np.all(np.diff(v[:11]) >= -1e-9)


def test_equilibrium_threshold():
    assert find_equilibrium_threshold(params_at(0.01))[0] == 0
    k, steady = find_equilibrium_threshold(params_at(0.99))
    assert k >= 1 and steady is not None
    assert best_response(k, params_at(0.99).with_(k=k), steady) == k


def test_fixed_point_search_budget():
    with pytest.raises(NoFixedPoint):
        find_equilibrium_threshold(params_at(0.99), k_max=0)


def test_welfare_threshold_example():
    rep = welfare_inadvertent(0.2, 0.5, 3.0)
    assert rep.C_threshold == pytest.approx(3.5)
    assert not rep.monitoring_preferred
    assert welfare_inadvertent(0.2, 0.5, 3.6).monitoring_preferred
    at = welfare_inadvertent(0.2, 0.5, 3.5)
    assert at.monitoring_welfare == pytest.approx(at.no_monitoring_welfare)


def test_strategic_welfare_crossing():
    rep = welfare_strategic(2.0, 0.1, 0.0)
    assert rep.C_threshold == pytest.approx(1.05)
    crossing = welfare_strategic(2.0, 0.1, rep.C_threshold)
    assert crossing.monitoring_welfare == pytest.approx(crossing.no_monitoring_welfare)


def test_density_bound_value():
    assert volunteer_density_bound(5, 1000) == Fraction(4996, 1000)


@pytest.mark.parametrize("n,k", [(2, 1), (3, 2), (4, 2), (3, 3)])
def test_density_bound_is_tight(n, k):
    bound = volunteer_density_bound(k, n)

    def always_volunteer(total):
        for h in product(range(total + 1), repeat=n):
            if sum(h) != total:
                continue
            for poster in range(n):
                if h[poster] >= 1 and all(h[j] >= k for j in range(n) if j != poster):
                    return False
        return True

    for total in range(n * k + 1):
        assert always_volunteer(total) == (Fraction(total, n) < bound)
