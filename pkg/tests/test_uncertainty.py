import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptdro.errors import (BudgetOrder, DomainError, EmptyHistory, ProbabilityOrder, TerminalProbability,
                          ValidationFailure)
from ptdro.transport import Link, ODPair, TransportNetwork, enumerate_paths
from ptdro.uncertainty import (build_ambiguity, default_budgets, demand_box, designated_charging, deviations,
                               estimate_probabilities, propagate_flow_box, read_history, synthetic_history)
from oracles import l1_ball_fraction
from test_transport import brute_force_split, two_path_net


def test_demand_box_examples():
    box = demand_box([ODPair(1, 6, [15.0]), ODPair(3, 11, [12.0])], 0.1)
    assert box.bounds("1-6")[0][0] == pytest.approx(13.5) and box.bounds("1-6")[1][0] == pytest.approx(16.5)
    assert box.bounds("3-11")[0][0] == pytest.approx(10.8) and box.bounds("3-11")[1][0] == pytest.approx(13.2)
    flat = demand_box([ODPair(1, 6, [15.0])], 0.0)
    assert flat.lower[0, 0] == flat.upper[0, 0] == 15.0
    with pytest.raises(ValidationFailure):
        demand_box([ODPair(1, 6, [15.0])], 1.0)


def test_single_path_box_equals_demand_box():
    net = TransportNetwork([1, 2], [Link(1, 1, 2, 6.0, 20.0, 1)])
    od = ODPair(1, 2, [10.0])
    ps = enumerate_paths(net, od)
    box = demand_box([od], 0.1)
    out = propagate_flow_box(net, [ps], box, 100.0, 0.015, 10.0, H=3)
    lo, hi = out.path["1-2"]
    assert lo[0, 0] == pytest.approx(9.0) and hi[0, 0] == pytest.approx(11.0)


def test_symmetric_paths_share_the_box():
    net, od, ps = two_path_net(demand=6.0)
    out = propagate_flow_box(net, [ps], demand_box([od], 0.1), 100.0, 0.015, 10.0, H=4)
    lo, hi = out.path[od.key]
    assert lo[:, 0] == pytest.approx([2.7, 2.7], abs=1e-6)
    assert hi[:, 0] == pytest.approx([3.3, 3.3], abs=1e-6)


def test_charging_energy_scale():
    # 10 p.u. = 1000 vehicles at 0.015 MWh each
    net = TransportNetwork([1, 2], [Link(1, 1, 2, 6.0, 20.0, 1)])
    od = ODPair(1, 2, [10.0])
    out = propagate_flow_box(net, [enumerate_paths(net, od)], demand_box([od], 0.0), 100.0, 0.015, 10.0, H=3)
    assert out.energy.upper[0, 0] == pytest.approx(15.0)
    assert out.nominal_energy[0, 0] == pytest.approx(15.0)


def test_designated_station_is_the_cheapest_then_the_first():
    links = [Link(1, 1, 2, 5.0, 10.0, 7), Link(2, 2, 3, 5.0, 10.0, 8)]
    net = TransportNetwork([1, 2, 3], links)
    ps = enumerate_paths(net, ODPair(1, 3, [4.0]))
    flows = {ps.od.key: np.array([[4.0, 4.0, 4.0]])}
    prices = {7: np.array([100.0, 90.0, 100.0]), 8: np.array([90.0, 100.0, 100.0])}
    got = designated_charging(net, [ps], flows, prices, 3)
    assert got[7].tolist() == [0.0, 4.0, 4.0]
    assert got[8].tolist() == [4.0, 0.0, 0.0]


@pytest.mark.parametrize("t0,cap,q", [((5.0, 8.0), (10.0, 10.0), 6.0), ((6.0, 6.0), (18.0, 8.5), 12.0),
                                      ((6.0, 9.0), (12.0, 9.0), 9.0)])
def test_box_brackets_equilibrium_load_for_random_demands(t0, cap, q):
    net, od, ps = two_path_net(t0, cap, q)
    prices = {1: 100.0, 2: 100.0}
    out = propagate_flow_box(net, [ps], demand_box([od], 0.1), prices, 0.015, 10.0, H=4)
    rng = np.random.default_rng(int(q))
    step = 0.01
    for d in rng.uniform(0.9 * q, 1.1 * q, 20):
        split = brute_force_split(net, od, d, prices, 0.015, 10.0, 4, step=step)
        for k, b in enumerate(out.charging.keys):
            assert out.charging.lower[k, 0] - step <= split[k] <= out.charging.upper[k, 0] + step


def test_deviation_examples():
    assert deviations(5.0, 3.0, 7.0) == pytest.approx(2.0)
    assert deviations(3.0, 3.0, 6.0) == pytest.approx(3.0)
    assert deviations(10.0, 8.5, 11.5) == pytest.approx(1.5)
    assert deviations(12.0, 3.0, 6.0) == pytest.approx(9.0)


# -- ambiguity set -----------------------------------------------------------------------------------------------

def test_single_full_shell_is_the_support():
    amb = build_ambiguity(np.ones((2, 3)), np.ones((2, 3)), budgets=[4.0], probabilities=[1.0])
    assert amb.M0 == 1 and amb.dim == 4
    assert amb.contains(0, 0, [1, -1, 1, -1])
    assert not amb.contains(0, 0, [1.2, 0, 0, 0])


def test_ambiguity_validation():
    e = np.ones((2, 1))
    with pytest.raises(BudgetOrder):
        build_ambiguity(e, e, budgets=[2.0, 2.0], probabilities=[0.5, 1.0])
    with pytest.raises(BudgetOrder):
        build_ambiguity(e, e, budgets=[2.0, 5.0], probabilities=[0.5, 1.0])
    with pytest.raises(ProbabilityOrder):
        build_ambiguity(e, e, budgets=[1.0, 2.0], probabilities=[0.8, 0.6])
    with pytest.raises(TerminalProbability):
        build_ambiguity(e, e, budgets=[1.0, 2.0], probabilities=[0.5, 0.9])


def empirical_cdf(samples, budgets):
    """Plain counting, one shell at a time."""
    out = []
    for g in budgets:
        hits = 0
        for s in samples:
            if sum(abs(v) for v in s) <= g:
                hits += 1
        out.append(hits / len(samples))
    out[-1] = 1.0
    return out


def test_default_shells_and_history_probabilities():
    T, dim, M0 = 3, 4, 5
    budgets = default_budgets(dim, M0, T)
    assert budgets[0].tolist() == pytest.approx([0.8, 1.6, 2.4, 3.2, 4.0])
    hist = synthetic_history(np.random.default_rng(3), T, dim, days=365)
    for day in hist:
        assert np.all(np.abs(day) <= 1.0)
    P = estimate_probabilities(hist, budgets)
    for t in range(T):
        assert P[t] == pytest.approx(empirical_cdf(hist[t].tolist(), budgets[t]))
    amb = build_ambiguity(np.ones((2, T)), np.ones((2, T)), budgets, P)
    assert amb.probabilities[:, -1].tolist() == [1.0] * T


def test_probability_edge_cases():
    budgets = default_budgets(4, 3, 1)
    assert estimate_probabilities([np.zeros((10, 4))], budgets)[0].tolist() == [1.0, 1.0, 1.0]
    assert estimate_probabilities([np.ones((1, 4))], budgets)[0].tolist() == [0.0, 0.0, 1.0]
    with pytest.raises(EmptyHistory):
        estimate_probabilities([np.zeros((0, 4))], budgets)
    with pytest.raises(EmptyHistory):
        estimate_probabilities([np.zeros((3, 4))], default_budgets(4, 3, 2))
    with pytest.raises(DomainError):
        estimate_probabilities([np.full((1, 4), 1.5)], budgets)


def test_uniform_history_matches_l1_volume():
    dim, M0, n = 4, 4, 100_000
    budgets = default_budgets(dim, M0, 1)
    samples = np.random.default_rng(11).uniform(-1, 1, size=(n, dim))
    P = estimate_probabilities([samples], budgets)[0]
    for m in range(M0 - 1):
        exact = l1_ball_fraction(dim, budgets[0, m])
        assert abs(P[m] - exact) <= 4 * np.sqrt(exact * (1 - exact) / n) + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6))
def test_shells_are_nested(point):
    amb = build_ambiguity(np.ones((3, 1)), np.ones((3, 1)), M0=4)
    inside = [amb.contains(0, m, point) for m in range(amb.M0)]
    for m in range(amb.M0 - 1):
        assert not inside[m] or inside[m + 1]
    assert inside[-1]


def test_read_history_normalizes(tmp_path):
    p = tmp_path / "hist.csv"
    p.write_text("day,slot,charge_1,charge_2,pv_1,pv_2\n"
                 "1,1,12.0,5.0,3.0,0.0\n"
                 "1,2,8.0,5.0,1.0,0.0\n"
                 "2,1,10.0,9.0,2.0,0.0\n")
    pred_c = np.array([[10.0, 10.0], [5.0, 5.0]])
    pred_pv = np.array([[2.0, 2.0], [0.0, 0.0]])
    e_de = np.array([[2.0, 4.0], [2.0, 2.0]])
    pv_de = np.array([[0.5, 0.5], [0.0, 0.0]])
    out = read_history(p, [1, 2], pred_c, pred_pv, e_de, pv_de)
    assert out[0].tolist() == [[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0]]
    assert out[1].tolist() == [[-0.5, 0.0, -1.0, 0.0]]
