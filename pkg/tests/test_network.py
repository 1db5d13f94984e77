from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from flowhedge.chain_filter import run_filter
from flowhedge.engine import simulate_truth_ensemble
from flowhedge.hedge import Setup, estimate_v1, simulate_under_pa
from flowhedge.kalman import solve_covariance
from flowhedge.market import (
    CountingChannel,
    EventTable,
    MarkLaw,
    Model,
    ObservedPath,
    StateRates,
    inflow,
    observable_projection,
    outflow,
)
from flowhedge.network import (
    NetworkSpec,
    aggregate_flows,
    flow_matrix,
    network_cashflow,
    simulate_network,
    write_flow_matrix,
)

from conftest import hidden_premium, scalar_market, two_state_chain


def R(a, b):
    return StateRates([a, b])


def three_funds(self_switch=False, losses=False) -> NetworkSpec:
    sw = {(0, 1): R(0.8, 2.0), (1, 0): R(1.0, 0.3), (1, 2): R(0.5, 0.5), (2, 0): R(0.4, 1.2)}
    if self_switch:
        sw[(0, 0)] = R(0.7, 0.7)
    loss = {1: (R(0.3, 0.6), MarkLaw.uniform((0.5, 1.0)))} if losses else {}
    return NetworkSpec(3, (3, 2, 1), inflows={0: R(2.0, 1.0), 2: R(0.5, 1.5)}, outflows={1: R(0.5, 1.0)},
                       switches=sw, losses=loss)


def _sim(spec, npaths=200, seed=4, horizon=2.0):
    return simulate_network(spec, scalar_market(), hidden_premium(), two_state_chain(), horizon, 0.05, seed,
                            npaths=npaths)


def test_single_fund_reduction_is_event_for_event():
    spec = NetworkSpec(1, (2,), inflows={0: R(1.0, 3.0)}, outflows={0: R(0.5, 2.0)})
    net = _sim(spec, 50)
    chans = [CountingChannel("A", R(1.0, 3.0), effect=inflow(0)),
             CountingChannel("D", R(0.5, 2.0), gate=0, effect=outflow(0))]
    one = simulate_truth_ensemble(Model(scalar_market(), hidden_premium(), two_state_chain(), chans, (2,)),
                                  2.0, 0.05, 4, 50)
    assert np.array_equal(net.events.time, one.events.time)
    assert np.array_equal(net.events.channel, one.events.channel)
    assert np.array_equal(net.Q, one.Q) and np.array_equal(net.S, one.S)


def test_queue_bookkeeping_and_conservation():
    spec = three_funds(losses=True)
    ens = _sim(spec, 300)
    names = [c.name for c in spec.channels()]
    A, D = aggregate_flows(spec, names, ens.counts)
    assert np.array_equal(ens.Q, np.asarray(spec.q0) + A - D)
    assert ens.Q.min() >= 0
    # switches are counted once as an inflow and once as an outflow
    get = {n: ens.counts[..., k] for k, n in enumerate(names)}
    ext_in = get["A0"] + get["A2"]
    ext_out = get["D1"] + get["N1"]
    assert np.array_equal(A.sum(-1) - ext_in, D.sum(-1) - ext_out)
    # total units change only through external flows
    assert np.array_equal(ens.Q.sum(-1), sum(spec.q0) + ext_in - ext_out)
    M = flow_matrix(spec, names, ens.counts[:, -1])
    assert M.sum() > 0 and M[0, 2] == 0
    assert M.sum() == int((A[:, -1].sum() - ext_in[:, -1].sum()))


rate = st.floats(0.1, 3.0)


@settings(max_examples=20, deadline=None)
@given(rates=st.lists(rate, min_size=10, max_size=10), q0=st.tuples(*[st.integers(0, 3)] * 3),
       seed=st.integers(0, 2**31))
def test_conservation_for_random_networks(rates, q0, seed):
    r = iter(zip(rates[::2], rates[1::2]))
    spec = NetworkSpec(3, q0, inflows={0: R(*next(r))}, outflows={1: R(*next(r)), 2: R(*next(r))},
                       switches={(0, 1): R(*next(r)), (2, 0): R(*next(r))})
    ens = simulate_network(spec, scalar_market(), hidden_premium(), two_state_chain(), 1.0, 0.1, seed, npaths=20)
    names = [c.name for c in spec.channels()]
    A, D = aggregate_flows(spec, names, ens.counts)
    assert np.array_equal(ens.Q, np.asarray(q0) + A - D)
    assert ens.Q.min() >= 0


def test_no_switches_gives_plain_flows():
    spec = NetworkSpec(2, (3, 3), inflows={0: R(1.0, 2.0)}, outflows={0: R(1.0, 1.0), 1: R(0.5, 0.5)})
    ens = _sim(spec, 100)
    names = [c.name for c in spec.channels()]
    A, D = aggregate_flows(spec, names, ens.counts)
    assert np.array_equal(A[..., 0], ens.counts[..., names.index("A0")])
    assert np.all(A[..., 1] == 0)
    assert np.array_equal(D[..., 1], ens.counts[..., names.index("D1")])


def test_gates_hold_on_every_path():
    spec = three_funds(self_switch=True, losses=True)
    ens = _sim(spec, 400, seed=5, horizon=3.0)
    chans = spec.channels()
    for p in range(ens.npaths):
        e = ens.events.for_path(p)
        Q = np.array(spec.q0)
        for ch in e.channel:
            c = chans[ch]
            if c.gate is not None:
                assert Q[c.gate] > 0
            Q = _apply(c, Q)
        assert np.array_equal(Q, ens.Q[p, -1])


def _apply(ch, Q):
    eff = ch.effect
    Q = Q.copy()
    if eff.kind == "inflow":
        Q[eff.fund] += 1
    elif eff.kind == "outflow":
        Q[eff.fund] -= 1
    elif eff.kind == "transfer":
        Q[eff.fund] -= 1
        Q[eff.to] += 1
    return Q


def test_self_switch_is_observed_but_moves_nothing():
    spec = three_funds(self_switch=True)
    ens = _sim(spec, 200)
    names = [c.name for c in spec.channels()]
    k = names.index("F0_0")
    assert ens.counts[:, -1, k].sum() > 0
    A, D = aggregate_flows(spec, names, ens.counts)
    assert np.array_equal(ens.Q, np.asarray(spec.q0) + A - D)
    # the extension fee reaches the cash stream
    fee = NetworkSpec(3, spec.q0, spec.inflows, spec.outflows, spec.switches, f={(0, 0): 0.25})
    p = int(np.argmax(ens.counts[:, -1, k]))
    path = ens.path(p)
    inc, ev = network_cashflow(fee, path)
    assert [x[1] for x in ev] == ["F0_0"] * int(ens.counts[p, -1, k])
    assert inc.sum() == pytest.approx(-0.25 * ens.counts[p, -1, k])


def _one_event_path(name_idx, names, q0):
    times = np.linspace(0.0, 1.0, 11)
    ev = EventTable(np.array([0.45]), np.array([name_idx]), np.array([np.nan]))
    Q = np.tile(np.asarray(q0), (11, 1))
    Q[5:, 0] -= 1
    Q[5:, 1] += 1
    return ObservedPath(times, np.ones((11, 1)), np.zeros((11, 0)), ev, Q, tuple(q0), tuple(names))


def test_cashflow_examples():
    spec = NetworkSpec(2, (2, 0), switches={(0, 1): R(1.0, 1.0)}, f={(0, 1): 0.5})
    names = [c.name for c in spec.channels()]
    path = _one_event_path(names.index("F0_1"), names, spec.q0)
    inc, ev = network_cashflow(spec, path)
    assert ev == [(0.45, "F0_1", -0.5)]
    assert inc[4] == -0.5 and np.count_nonzero(inc) == 1
    free = NetworkSpec(2, (2, 0), switches={(0, 1): R(1.0, 1.0)})
    inc0, ev0 = network_cashflow(free, path)
    assert np.all(inc0 == 0) and ev0 == []
    # income convention: a positive sign turns the fee into a credit
    credit = NetworkSpec(2, (2, 0), switches={(0, 1): R(1.0, 1.0)}, f={(0, 1): 0.5}, switch_fee_sign=1.0)
    assert network_cashflow(credit, path)[0][4] == 0.5


def test_running_fees_accrue_on_queues():
    spec = NetworkSpec(2, (2, 0), switches={(0, 1): R(1.0, 1.0)}, kappa={0: 0.1, 1: 0.3})
    names = [c.name for c in spec.channels()]
    path = _one_event_path(0, names, spec.q0)
    inc, _ = network_cashflow(spec, path)
    assert np.allclose(inc[:5], 0.1 * 2 * 0.1)
    assert np.allclose(inc[5:], 0.1 * (0.1 * 1 + 0.3 * 1))


def test_inactive_second_fund_reproduces_single_fund_value():
    single = NetworkSpec(1, (4,), inflows={0: R(1.0, 3.0)}, outflows={0: R(0.5, 2.0)}, kappa={0: 0.05},
                         e={0: 0.02})
    pair = NetworkSpec(2, (4, 0), inflows={0: R(1.0, 3.0)}, outflows={0: R(0.5, 2.0)}, kappa={0: 0.05},
                       e={0: 0.02})
    v = []
    for spec in (single, pair):
        m = spec.model(scalar_market(), hidden_premium(), two_state_chain())
        su = Setup.build(m, 0.5, 0.05)
        v.append(estimate_v1(simulate_under_pa(su, spec.claim(lambda s: s.S[:, 0]), 4000, 12)))
    assert abs(v[0].V1 - v[1].V1) < 3 * np.hypot(v[0].V1_se, v[1].V1_se)


def test_uninformative_network_keeps_chain_prior():
    flat = {(0, 1): R(1.0, 1.0), (1, 0): R(0.5, 0.5), (1, 1): R(0.2, 0.2)}
    spec = NetworkSpec(2, (5, 5), inflows={0: R(2.0, 2.0)}, outflows={1: R(1.0, 1.0)}, switches=flat)
    chain = two_state_chain()
    ens = simulate_network(spec, scalar_market(), hidden_premium(), chain, 2.0, 0.05, 2, npaths=3)
    G = np.asarray(chain.generator(0.0))
    for i in range(3):
        obs = observable_projection(ens.path(i))
        run = run_filter(obs, chain, spec.channels())
        for k in (10, 39):
            assert np.allclose(run.xhat[k], expm(G * obs.times[k]) @ chain.x0_dist, atol=1e-6)


def test_filtered_mode_and_validation():
    spec = three_funds()
    cov = solve_covariance(hidden_premium(), 1.0, 0.005, d=1)
    ens = simulate_network(spec, scalar_market(), hidden_premium(), two_state_chain(), 1.0, 0.05, 3, mode="filtered",
                           npaths=50, cov=cov)
    assert ens.Q.min() >= 0 and ens.xhat.shape[-1] == 2
    with pytest.raises(ValueError):
        simulate_network(spec, scalar_market(), hidden_premium(), two_state_chain(), 1.0, 0.05, 3, mode="oops")
    with pytest.raises(ValueError):
        NetworkSpec(2, (1, 1), inflows={5: R(1.0, 1.0)})
    with pytest.raises(ValueError):
        NetworkSpec(2, (1, 1), f={(0, 1): 0.1})
    with pytest.raises(ValueError):
        NetworkSpec(2, (1,))


def test_flow_matrix_csv(tmp_path):
    M = np.array([[0, 3], [1, 2]])
    out = tmp_path / "flows.csv"
    write_flow_matrix(out, M)
    with open(out, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["from", "to_0", "to_1"], ["0", "0", "3"], ["1", "1", "2"]]
