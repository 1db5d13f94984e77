from __future__ import annotations

import numpy as np
import pytest

from flowhedge import artifacts
from flowhedge.coefficients import Constant
from flowhedge.engine import simulate_truth_ensemble
from flowhedge.errors import IntensityBoundViolated, NonInvertibleCoefficient
from flowhedge.market import (
    ChainModel,
    CountingChannel,
    MarketSpec,
    MarkLaw,
    Model,
    ObservedPath,
    RiskPremiumModel,
    StateRates,
    TruthPath,
    inflow,
    observable_projection,
    outflow,
    reconstruct_wtilde,
    separate_ties,
    simulate_truth,
)

from conftest import hidden_premium, scalar_market, trivial_chain, two_factor_model, two_state_chain


def _occupation_integral(path: TruthPath, rates) -> float:
    """``int_0^T lambda(X_s) ds`` from the exact chain jump times."""
    T = path.times[-1]
    t_prev, x = 0.0, path.x[0]
    total = 0.0
    for tj, xj in zip(path.x_jump_times, path.x_jump_states):
        total += rates[x] * (tj - t_prev)
        t_prev, x = tj, xj
    return total + rates[x] * (T - t_prev)


def test_degenerate_dynamics_are_constant():
    mk = MarketSpec(1, 1, Constant([[0.0]]), Constant([[0.0]]), Constant([[0.0]]), [1.5], [2.0])
    rp = RiskPremiumModel(Constant([0.0, 0.0]), Constant(np.zeros((2, 2))), Constant(np.zeros((2, 2))), [0.1, 0.2],
                          np.zeros((2, 2)))
    chans = [CountingChannel("A", StateRates([0.0]), effect=inflow(0))]
    path = simulate_truth(mk, rp, trivial_chain(), chans, (3,), 1.0, 0.1, 4, strict=False)
    assert np.all(path.S == 1.5) and np.all(path.Y == 2.0)
    assert len(path.events) == 0 and np.all(path.Q == 3)


def test_singular_sigma_rejected():
    mk = MarketSpec(2, 0, Constant([[1.0, 1.0], [1.0, 1.0]]), Constant(np.zeros((0, 2))), Constant(np.zeros((0, 0))),
                    [1.0, 1.0], [])
    rp = RiskPremiumModel(Constant([0.0, 0.0]), Constant(np.zeros((2, 2))), Constant(np.zeros((2, 2))), [0.0, 0.0],
                          np.zeros((2, 2)))
    with pytest.raises(NonInvertibleCoefficient):
        simulate_truth(mk, rp, trivial_chain(), (), (), 1.0, 0.1, 0)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        ChainModel(2, Constant([[-1.0, 0.5], [1.0, -1.0]]), [0.5, 0.5])  # column 1 does not sum to zero
    with pytest.raises(ValueError):
        RiskPremiumModel(Constant([0.0]), Constant([[0.0]]), Constant([[0.0]]), [0.0], [[-1.0]])
    with pytest.raises(ValueError):
        # an outflow must be gated on its source fund
        Model(scalar_market(), hidden_premium(), trivial_chain(), [CountingChannel("D", StateRates([1.0]),
                                                                                   effect=outflow(0))], (1,))


def test_unit_rate_poisson_mean():
    m = Model(scalar_market(), hidden_premium(), trivial_chain(), [CountingChannel("A", StateRates([1.0]))], ())
    ens = simulate_truth_ensemble(m, 1.0, 0.25, 12, 100_000, record=True)
    A = ens.counts[:, -1, 0]
    assert abs(A.mean() - 1.0) < 3 * A.std(ddof=1) / np.sqrt(A.size)


def test_absorbing_chain_never_moves():
    chain = ChainModel(3, Constant(np.zeros((3, 3))), [0.2, 0.3, 0.5])
    m = Model(scalar_market(), hidden_premium(), chain, [CountingChannel("A", StateRates([1.0, 2.0, 3.0]))], ())
    ens = simulate_truth_ensemble(m, 1.0, 0.1, 2, 200)
    assert np.all(ens.x == ens.x[:, :1])
    # the initial law is respected
    frac = np.bincount(ens.x[:, 0], minlength=3) / 200
    assert np.abs(frac - [0.2, 0.3, 0.5]).max() < 0.12


def test_thinning_matches_compensator():
    rates = np.array([0.7, 4.0])
    m = Model(scalar_market(), hidden_premium(), two_state_chain(1.0, 2.0),
              [CountingChannel("A", StateRates(rates))], ())
    ens = simulate_truth_ensemble(m, 2.0, 0.1, 8, 4000)
    gap = np.array([ens.counts[i, -1, 0] - _occupation_integral(ens.path(i), rates) for i in range(ens.npaths)])
    assert abs(gap.mean()) < 3 * gap.std(ddof=1) / np.sqrt(gap.size)


def test_queue_conservation_and_nonnegativity():
    m = two_factor_model(marked=True)
    ens = simulate_truth_ensemble(m, 3.0, 0.05, 5, 500)
    A, D, C = (ens.counts[:, :, k] for k in range(3))
    assert np.array_equal(ens.Q[:, :, 0], m.q0[0] + A - D - C)
    assert ens.Q.min() >= 0
    # the gate binds on some paths, so non-negativity is not vacuous
    assert (ens.Q == 0).any()


def test_gated_channel_never_fires_on_empty_fund():
    chans = [CountingChannel("D", StateRates([5.0]), gate=0, effect=outflow(0))]
    m = Model(scalar_market(), hidden_premium(), trivial_chain(), chans, (0,))
    ens = simulate_truth_ensemble(m, 2.0, 0.1, 1, 300)
    assert len(ens.events) == 0


def test_event_times_strictly_increasing_per_path():
    ens = simulate_truth_ensemble(two_factor_model(marked=True), 2.0, 0.1, 6, 100)
    for i in range(ens.npaths):
        t = ens.events.for_path(i).time
        assert np.all(np.diff(t) > 0)
    assert np.array_equal(separate_ties(np.array([0.1, 0.1, 0.1, 0.2])) > 0, [True] * 4)
    tied = separate_ties(np.array([0.1, 0.1, 0.1]))
    assert np.all(np.diff(tied) > 0) and tied[-1] - 0.1 < 1e-15


def test_marks_drawn_from_support():
    ens = simulate_truth_ensemble(two_factor_model(marked=True), 3.0, 0.1, 6, 2000)
    marks = ens.events.mark[ens.events.channel == 2]
    assert marks.size > 200
    assert marks.min() >= 1.0 and marks.max() <= 2.0
    assert abs(marks.mean() - 1.5) < 3 * marks.std() / np.sqrt(marks.size)
    assert np.all(np.isnan(ens.events.mark[ens.events.channel != 2]))


def test_mark_law_quadrature():
    law = MarkLaw.truncated_exponential((0.5, 3.0), 1.2)
    x, w = law.quadrature(0.0)
    assert w.sum() == pytest.approx(1.0)
    # mean of a truncated exponential on [a, b]
    a, b, r = 0.5, 3.0, 1.2
    exact = (a * np.exp(-r * a) - b * np.exp(-r * b)) / (np.exp(-r * a) - np.exp(-r * b)) + 1 / r
    assert law.expect(lambda v: v, 0.0) == pytest.approx(exact, rel=1e-10)
    u = np.random.default_rng(0).random(50_000)
    assert law.sample(0.0, u).mean() == pytest.approx(exact, abs=0.02)


def test_intensity_bound_violation_detected():
    # intensity rising in time within a step exceeds the bound taken at the step start
    def rising(t, snap):
        return np.full((snap.P, 1), 1.0 + 50.0 * float(np.max(t)))

    m = Model(scalar_market(), hidden_premium(), trivial_chain(), [CountingChannel("A", rising)], ())
    with pytest.raises(IntensityBoundViolated):
        simulate_truth_ensemble(m, 1.0, 0.5, 0, 50)


def test_projection_schema_and_idempotence():
    path = simulate_truth(scalar_market(), hidden_premium(), two_state_chain(),
                          [CountingChannel("A", StateRates([1.0, 3.0]), effect=inflow(0))], (2,), 1.0, 0.1, 3)
    obs = observable_projection(path)
    assert type(obs) is ObservedPath
    assert not hasattr(obs, "z") and not hasattr(obs, "x")
    again = observable_projection(obs)
    for f in ("times", "S", "Y", "Q"):
        assert np.array_equal(getattr(again, f), getattr(obs, f))
    assert np.array_equal(again.events.time, obs.events.time)


def test_reconstructed_observation_matches_truth():
    m = two_factor_model()
    path = simulate_truth(m.market, m.premium, m.chain, m.channels, m.q0, 1.0, 0.01, 11)
    wt = reconstruct_wtilde(path, m.market)
    h = path.step
    truth = np.concatenate([np.cumsum(path.dW, axis=0), np.cumsum(path.dB, axis=0)], axis=1)
    truth = np.vstack([np.zeros(2), truth + np.cumsum(path.z[:-1] * h, axis=0)])
    # Euler drift frozen at the step start: equality up to rounding
    assert np.abs(wt - truth).max() < 1e-10


def test_same_seed_same_paths_any_threads():
    m = two_factor_model(marked=True)
    a = simulate_truth_ensemble(m, 1.0, 0.05, 17, 3000)
    b = simulate_truth_ensemble(m, 1.0, 0.05, 17, 3000, threads=3)
    for f in ("S", "Y", "Q", "counts", "z", "x"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert np.array_equal(a.events.time, b.events.time)
    assert np.array_equal(a.events.path, b.events.path)
    # path 2500 alone equals row 2500 of the ensemble
    one = simulate_truth(m.market, m.premium, m.chain, m.channels, m.q0, 1.0, 0.05, 17, path_index=2500)
    assert np.array_equal(one.S, a.S[2500]) and np.array_equal(one.events.time, a.events.for_path(2500).time)
    c = simulate_truth_ensemble(m, 1.0, 0.05, 18, 10)
    assert not np.array_equal(c.S, a.S[:10])


def test_path_csv_round_trip(tmp_path):
    m = two_factor_model(marked=True)
    path = simulate_truth(m.market, m.premium, m.chain, m.channels, m.q0, 2.0, 0.05, 4)
    f = tmp_path / "p.csv"
    artifacts.write_path_csv(path, f)
    back = artifacts.read_path_csv(f, m.q0, [c.name for c in m.channels])
    for name in ("times", "S", "Y", "Q"):
        assert np.array_equal(getattr(back, name), getattr(path, name))
    assert np.array_equal(back.events.time, path.events.time)
    assert np.array_equal(back.events.channel, path.events.channel)
    assert np.array_equal(np.isnan(back.events.mark), np.isnan(path.events.mark))
    ok = ~np.isnan(path.events.mark)
    assert np.array_equal(back.events.mark[ok], path.events.mark[ok])


def test_cache_round_trip(tmp_path):
    ens = simulate_truth_ensemble(two_factor_model(), 1.0, 0.1, 3, 20)
    arrays = artifacts.ensemble_arrays(ens)
    f = tmp_path / "c.bin"
    artifacts.write_cache(f, arrays)
    back = artifacts.read_cache(f)
    assert sorted(back) == sorted(arrays)
    for k, v in arrays.items():
        assert np.array_equal(back[k], v, equal_nan=True) and back[k].dtype == v.dtype
    g = tmp_path / "d.bin"
    artifacts.write_cache(g, arrays)
    assert f.read_bytes() == g.read_bytes()
    with pytest.raises(ValueError):
        artifacts.read_cache(_junk(tmp_path))


def _junk(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"not a cache")
    return p
