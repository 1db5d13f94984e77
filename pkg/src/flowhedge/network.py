"""A network of funds with investor switching.

Units enter fund ``i`` (``A(i)``), leave it (``D(i)``), suffer an insured
loss (``N(i)``) or switch from ``i`` to ``j`` (``F(i, j)``). A self-switch
``F(i, i)`` is an extension: it is observed and may carry a fee, but leaves
the queues unchanged. Every declared channel is an ordinary counting
channel, so the filters, valuation and backtest machinery apply unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .claims import ClaimSpec
from .engine import simulate_observer_ensemble, simulate_truth_ensemble
from .market import NO_EFFECT, CountingChannel, MarkLaw, Model, Snapshot, inflow, outflow, transfer


@dataclass
class NetworkSpec:
    """Declared channels and fees of an ``n_p``-fund network.

    Intensities are callables ``(t, snap) -> (P, N)`` as for any channel.
    ``switches`` maps ordered pairs ``(i, j)`` to intensities; missing pairs
    are simply absent. Switch fees ``f[(i, j)]`` are charged with sign
    ``switch_fee_sign`` (``-1``: a cost to the fund).
    """

    n_p: int
    q0: tuple
    inflows: Mapping[int, Callable] = field(default_factory=dict)
    outflows: Mapping[int, Callable] = field(default_factory=dict)
    switches: Mapping[tuple, Callable] = field(default_factory=dict)
    losses: Mapping[int, tuple] = field(default_factory=dict)
    kappa: Mapping[int, float] = field(default_factory=dict)
    e: Mapping[int, float] = field(default_factory=dict)
    g: Mapping[int, float] = field(default_factory=dict)
    f: Mapping[tuple, float] = field(default_factory=dict)
    switch_fee_sign: float = -1.0

    def __post_init__(self):
        if len(self.q0) != self.n_p:
            raise ValueError("q0 needs one entry per fund")
        funds = set(range(self.n_p))
        keys = list(self.inflows) + list(self.outflows) + list(self.losses)
        keys += list(self.kappa) + list(self.e) + list(self.g)
        keys += [i for ij in list(self.switches) + list(self.f) for i in ij]
        bad = [k for k in keys if k not in funds]
        if bad:
            raise ValueError(f"undeclared fund id {bad[0]!r}")
        for ij in self.f:
            if ij not in self.switches:
                raise ValueError(f"fee for undeclared switch {ij!r}")

    # channel names
    @staticmethod
    def a_name(i):
        return f"A{i}"

    @staticmethod
    def d_name(i):
        return f"D{i}"

    @staticmethod
    def n_name(i):
        return f"N{i}"

    @staticmethod
    def f_name(i, j):
        return f"F{i}_{j}"

    def channels(self) -> list:
        out = []
        for i in range(self.n_p):
            if i in self.inflows:
                out.append(CountingChannel(self.a_name(i), self.inflows[i], effect=inflow(i)))
            if i in self.outflows:
                out.append(CountingChannel(self.d_name(i), self.outflows[i], gate=i, effect=outflow(i)))
            if i in self.losses:
                lam, mark = self.losses[i][:2]
                out.append(CountingChannel(self.n_name(i), lam, gate=i, effect=outflow(i), mark=mark))
        for (i, j) in sorted(self.switches):
            eff = NO_EFFECT if i == j else transfer(i, j)
            out.append(CountingChannel(self.f_name(i, j), self.switches[(i, j)], gate=i, effect=eff))
        return out

    def model(self, market, premium, chain) -> Model:
        return Model(market, premium, chain, self.channels(), tuple(self.q0))

    def claim(self, payoff: Callable) -> ClaimSpec:
        """The claim ``payoff`` together with the network's fee and loss cash flows."""
        kap = np.array([self.kappa.get(i, 0.0) for i in range(self.n_p)])
        running = None
        if np.any(kap):
            running = lambda t, snap: snap.Q.astype(float) @ kap  # noqa: E731
        cash = {}
        for i, v in self.e.items():
            cash[self.a_name(i)] = _flat(v)
        for i, v in self.g.items():
            cash[self.d_name(i)] = _flat(-v)
        for ij, v in self.f.items():
            cash[self.f_name(*ij)] = _flat(self.switch_fee_sign * v)
        for i, spec in self.losses.items():
            if len(spec) > 2 and spec[2] is not None:
                loss = spec[2]
                cash[self.n_name(i)] = lambda t, snap, x, loss=loss: -np.asarray(loss(t, x), float) * np.ones(snap.P)
        return ClaimSpec(payoff, running, cash)


def _flat(v):
    return lambda t, snap, x: np.full(snap.P, float(v))


def simulate_network(spec: NetworkSpec, market, premium, chain, horizon: float, step: float, seed: int,
                     mode: str = "truth", npaths: int = 1, cov=None, threads: int = 1):
    """Simulate the network; ``filtered`` draws events at the filtered intensities."""
    model = spec.model(market, premium, chain)
    if mode == "truth":
        return simulate_truth_ensemble(model, horizon, step, seed, npaths, threads=threads, cov=cov)
    if mode == "filtered":
        if cov is None:
            from .kalman import solve_covariance

            cov = solve_covariance(premium, horizon, step / 10, d=market.d)
        return simulate_observer_ensemble(model, cov, horizon, step, seed, npaths, threads=threads)
    raise ValueError("mode must be 'truth' or 'filtered'")


def _channel_counts(spec: NetworkSpec, names, counts):
    idx = {n: k for k, n in enumerate(names)}

    def get(name):
        k = idx.get(name)
        return counts[..., k] if k is not None else np.zeros(counts.shape[:-1], counts.dtype)

    return get


def aggregate_flows(spec: NetworkSpec, channel_names, counts: np.ndarray):
    """Total inflows ``A*`` and outflows ``D*`` per fund from cumulative channel counts.

    ``counts[..., k]`` is the running count of channel ``k``; returns arrays of
    shape ``counts.shape[:-1] + (n_p,)``. ``A*(i) = A(i) + sum_j F(j, i)`` and
    ``D*(i) = D(i) + N(i) + sum_j F(i, j)``.
    """
    get = _channel_counts(spec, list(channel_names), counts)
    shape = counts.shape[:-1] + (spec.n_p,)
    A = np.zeros(shape, np.int64)
    D = np.zeros(shape, np.int64)
    for i in range(spec.n_p):
        A[..., i] = get(spec.a_name(i))
        D[..., i] = get(spec.d_name(i)) + get(spec.n_name(i))
    for (i, j) in spec.switches:
        c = get(spec.f_name(i, j))
        A[..., j] += c
        D[..., i] += c
    return A, D


def flow_matrix(spec: NetworkSpec, channel_names, counts: np.ndarray) -> np.ndarray:
    """``M[i, j]`` = number of switches ``i -> j`` summed over the leading axes."""
    get = _channel_counts(spec, list(channel_names), counts)
    M = np.zeros((spec.n_p, spec.n_p), np.int64)
    for (i, j) in spec.switches:
        M[i, j] = int(np.sum(get(spec.f_name(i, j))))
    return M


def write_flow_matrix(path, M: np.ndarray) -> None:
    n = M.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["from"] + [f"to_{j}" for j in range(n)])
        for i in range(n):
            w.writerow([i] + [int(x) for x in M[i]])


def network_cashflow(spec: NetworkSpec, path):
    """Wealth increments of one observed path, per grid step.

    Returns ``(increments, event_cash)`` where ``increments[k]`` is the cash
    received over ``(t_k, t_{k+1}]`` (running fees at the left point plus
    event cash) and ``event_cash`` lists ``(time, channel_name, amount)``.
    """
    claim = spec.claim(lambda snap: np.zeros(snap.P))
    times = path.times
    h = np.diff(times)
    kap = np.array([spec.kappa.get(i, 0.0) for i in range(spec.n_p)])
    inc = (path.Q[:-1].astype(float) @ kap) * h
    events = []
    names = path.channel_names
    for t, ch, x in zip(path.events.time, path.events.channel, path.events.mark):
        fn = claim.event_cash.get(names[ch])
        if fn is None:
            continue
        k = min(int(np.searchsorted(times, t, side="left")) - 1, len(h) - 1)
        k = max(k, 0)
        snap = Snapshot(path.S[k : k + 1], path.Y[k : k + 1], np.zeros((1, len(names)), np.int64),
                        path.Q[k : k + 1])
        amt = float(np.asarray(fn(t, snap, np.array([x])), float).ravel()[0])
        if amt == 0.0:
            continue
        inc[k] += amt
        events.append((float(t), names[ch], amt))
    return inc, events


def mark_law(support, density=None) -> MarkLaw:
    return MarkLaw.uniform(support) if density is None else MarkLaw(support, density)
