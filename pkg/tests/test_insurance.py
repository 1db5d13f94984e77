from __future__ import annotations

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.stats import kstest

from flowhedge.chain_filter import UnnormalizedFilter, apply_event, run_filter
from flowhedge.claims import ClaimSpec, flat_cash
from flowhedge.engine import simulate_truth_ensemble
from flowhedge.errors import NegativeQueue
from flowhedge.hedge import Setup, estimate_v1, simulate_under_pa
from flowhedge.insurance import (
    LossSpec,
    SeverityGrade,
    build_graded_state_space,
    check_disjoint,
    cumulative_loss,
    grade_of,
    lbar,
    sample_mark,
    two_exit_queue,
)
from flowhedge.market import CountingChannel, EventTable, Model, StateRates, inflow, observable_projection, outflow

from conftest import hidden_premium, scalar_market, trivial_chain, two_state_chain


def _flat(t, x):
    return np.ones_like(np.asarray(x, float))


def _grade(support=(1.0, 2.0), density=_flat, rates=(1.0,), index=1):
    return SeverityGrade(index, support, density, StateRates(list(rates)))


def _events(times, marks, channel=0):
    return EventTable(np.asarray(times, float), np.full(len(times), channel), np.asarray(marks, float))


def test_uniform_marks_mean():
    x = sample_mark(_grade(), 0.0, np.random.default_rng(0), 100_000)
    assert abs(x.mean() - 1.5) < 3 * x.std(ddof=1) / np.sqrt(x.size)


def test_narrow_support_contains_draws():
    g = _grade((1.0, 1.0 + 1e-6))
    x = sample_mark(g, 0.0, np.random.default_rng(1), 10_000)
    assert x.min() >= 1.0 and x.max() <= 1.0 + 1e-6


def test_marks_follow_tabulated_law():
    rate, lo, hi = 1.3, 0.5, 3.0
    g = _grade((lo, hi), lambda t, x: np.exp(-rate * np.asarray(x, float)))
    x = sample_mark(g, 0.0, np.random.default_rng(2), 100_000)
    norm = np.exp(-rate * lo) - np.exp(-rate * hi)
    stat = kstest(x, lambda v: (np.exp(-rate * lo) - np.exp(-rate * np.clip(v, lo, hi))) / norm).statistic
    assert stat < 0.01


@pytest.mark.parametrize(
    "payout,expected",
    [
        (lambda t, x: x, 1.5),
        (lambda t, x: np.zeros_like(x), 0.0),
        (lambda t, x: x * x, 7.0 / 3.0),
    ],
)
def test_lbar_smooth_integrands(payout, expected):
    assert lbar(_grade(), LossSpec(payout)) == pytest.approx(expected, rel=1e-8, abs=1e-15)


def test_lbar_with_kink():
    # int_1.5^2 (x - 1.5) dx = 0.125; the kink costs Gauss-Legendre its spectral accuracy
    got = lbar(_grade(), LossSpec(lambda t, x: np.maximum(x - 1.5, 0.0)))
    assert got == pytest.approx(0.125, abs=5e-4)


def test_cumulative_loss_examples():
    ident = LossSpec(lambda t, x: x)
    assert cumulative_loss(_events([], []), ident).terminal == 0.0
    f = cumulative_loss(_events([0.2, 0.7], [1.2, 1.8]), ident)
    assert f.terminal == pytest.approx(3.0)
    assert f(0.1) == 0.0 and f(0.2) == pytest.approx(1.2) and f(0.69) == pytest.approx(1.2)
    capped = cumulative_loss(_events([0.2, 0.7], [1.2, 1.8]), LossSpec(lambda t, x: np.minimum(x, 1.5)))
    assert capped.terminal == pytest.approx(2.7)
    # unmarked events carry no loss
    mixed = EventTable(np.array([0.1, 0.2]), np.array([0, 1]), np.array([np.nan, 1.2]))
    assert cumulative_loss(mixed, ident).terminal == pytest.approx(1.2)


def test_two_exit_queue_examples():
    q = two_exit_queue(2, [0.1], [0.5], [0.3])
    assert q.terminal == 1.0
    assert q(0.2) == 3.0 and q(0.4) == 2.0
    assert two_exit_queue(4, [], [], []).terminal == 4.0
    with pytest.raises(NegativeQueue):
        two_exit_queue(0, [0.5], [0.2], [])


def _pool_model(q0=1):
    grades = [_grade((0.1, 0.5), rates=(2.0, 0.5)), _grade((1.0, 3.0), rates=(1.0, 3.0), index=2)]
    chans = [
        CountingChannel("A", StateRates([0.5, 1.0]), effect=inflow(0)),
        CountingChannel("D", StateRates([1.0, 2.0]), gate=0, effect=outflow(0)),
    ] + [g.channel(0) for g in grades]
    return Model(scalar_market(), hidden_premium(), two_state_chain(), chans, (q0,)), grades


def test_gated_exits_never_fire_on_empty_pool():
    m, grades = _pool_model(q0=1)
    ens = simulate_truth_ensemble(m, 1.0, 0.05, 9, 10_000)
    assert ens.Q.min() >= 0
    ev = ens.events
    exits = ev.channel >= 1
    assert exits.sum() > 1000
    for p in np.unique(ev.path[exits]):
        e = ev.for_path(int(p))
        A = e.time[e.channel == 0]
        C = e.time[e.channel >= 2]
        D = e.time[e.channel == 1]
        # raises if any exit found the pool empty
        q = two_exit_queue(1, A, C, D)
        assert q.terminal == ens.Q[p, -1, 0]


def test_every_mark_identifies_its_grade():
    m, grades = _pool_model(q0=30)
    check_disjoint(grades)
    ens = simulate_truth_ensemble(m, 2.0, 0.05, 4, 500)
    sel = ens.events.channel >= 2
    assert sel.sum() > 100
    for ch, x in zip(ens.events.channel[sel], ens.events.mark[sel]):
        assert grade_of(grades, x) == ch - 1
    with pytest.raises(ValueError):
        check_disjoint([_grade((1.0, 2.0)), _grade((1.5, 3.0), index=2)])
    with pytest.raises(ValueError):
        grade_of(grades, 0.7)


def test_zero_payout_changes_nothing():
    m, grades = _pool_model(q0=5)
    su = Setup.build(m, 0.5, 0.05)
    zero = LossSpec(lambda t, x: np.zeros_like(np.asarray(x, float)))
    base = ClaimSpec(lambda s: s.S[:, 0], None, {"A": flat_cash(0.02)})
    insured = ClaimSpec(base.payoff, None, {"A": flat_cash(0.02), "N1": zero.cash(), "N2": zero.cash()})
    a = simulate_under_pa(su, base, 400, 3)
    b = simulate_under_pa(su, insured, 400, 3)
    assert np.array_equal(a.sample, b.sample)
    assert estimate_v1(a).V1 == estimate_v1(b).V1


def test_expected_loss_is_compensator():
    lam, T = 2.0, 1.5
    loss = LossSpec(lambda t, x: 0.5 * x)
    g = SeverityGrade(1, (1.0, 2.0), _flat, StateRates([lam]))
    ch = CountingChannel("N1", g.intensity, mark=g.mark)  # ungated
    m = Model(scalar_market(), hidden_premium(), trivial_chain(), [ch], ())
    ens = simulate_truth_ensemble(m, T, 0.1, 8, 20_000)
    tot = np.zeros(ens.npaths)
    np.add.at(tot, ens.events.path, 0.5 * ens.events.mark)
    # per-path step function agrees with the direct sum
    assert cumulative_loss(ens.events.for_path(0), loss).terminal == pytest.approx(tot[0])
    expected = lbar(g, loss) * lam * T
    assert abs(tot.mean() - expected) < 3 * tot.std(ddof=1) / np.sqrt(tot.size)


def test_graded_state_count_and_layout():
    R = [[-1.0, 0.5, 0.0], [1.0, -1.0, 0.5], [0.0, 0.5, -0.5]]
    gs = build_graded_state_space(3, 2, R, [(0.1, 0.5), (1.0, 3.0)], [1.0, 0.2])
    assert gs.chain.N == 9
    assert gs.pair(gs.index(2, 1)) == (2, 1)
    G = np.asarray(gs.chain.generator(0.0))
    assert np.allclose(G.sum(axis=0), 0.0)
    # every grade regime relaxes toward calm
    for i in range(3):
        for j in (1, 2):
            assert G[gs.index(i, 0), gs.index(i, j)] > 0
    # grade k loads mainly on regime k
    lam = gs.grades[0].intensity.rates
    assert lam[gs.index(0, 1)] > lam[gs.index(0, 0)] == lam[gs.index(0, 2)]
    with pytest.raises(ValueError):
        build_graded_state_space(0, 1, [[0.0]], [], [])


def test_grade_event_touches_only_its_diagonal():
    gs = build_graded_state_space(1, 2, [[0.0]], [(0.1, 0.5), (1.0, 3.0)], [1.0, 0.2], on_grade_loading=4.0)
    lam = np.vstack([g.intensity.rates for g in gs.grades])
    q = np.array([0.2, 0.3, 0.5])
    f = UnnormalizedFilter(0.0, q, gs.chain.generator, lam, np.array([True, True]))
    after = apply_event(f, 0)
    assert np.allclose(after.q * np.exp(after.log_scale - f.log_scale), q * lam[0])
    after2 = apply_event(f, 1)
    assert np.allclose(after2.q * np.exp(after2.log_scale - f.log_scale), q * lam[1])


def test_flat_grades_leave_regime_marginal_at_prior():
    Rb = [[-1.0, 2.0], [1.0, -2.0]]
    gs = build_graded_state_space(2, 1, Rb, [(0.1, 0.5)], [1.0], on_grade_loading=1.0,
                                  inflow_rates=[1.0, 4.0], outflow_rates=[0.5, 0.5], flow_sensitivity=1.0)
    m = Model(scalar_market(), hidden_premium(), gs.chain, gs.channels, (10,))
    ens = simulate_truth_ensemble(m, 2.0, 0.05, 6, 3)
    G = np.asarray(gs.chain.generator(0.0))
    for i in range(3):
        obs = observable_projection(ens.path(i))
        run = run_filter(obs, gs.chain, gs.channels)
        assert len(obs.events) > 0
        for k in (10, 25, 40):
            prior = expm(G * obs.times[k]) @ gs.chain.x0_dist
            marg = run.xhat[k].reshape(2, 2).sum(axis=0)
            assert np.allclose(marg, prior.reshape(2, 2).sum(axis=0), atol=1e-6)
