"""Insured losses: severity grades, loss integrals, two-exit queues and graded chains.

A severity grade is a marked counting channel whose marks live on a compact
support disjoint from every other grade's, so the size of a loss reveals
which grade fired. Insured units leave the fund when a loss is paid, giving
a queue with two exits: ``Q = Q0 + A - C - D``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .coefficients import Constant
from .errors import NegativeQueue
from .market import ChainModel, CountingChannel, EventTable, MarkLaw, StateRates, inflow, outflow


@dataclass(frozen=True)
class SeverityGrade:
    """Grade ``index`` with loss sizes on ``support`` drawn from ``density``."""

    index: int
    support: tuple
    density: Callable
    intensity: Callable
    homogeneous: bool = True

    def __post_init__(self):
        lo, hi = self.support
        if not 0 < lo < hi:
            raise ValueError("grade support must satisfy 0 < lo < hi")

    @property
    def name(self) -> str:
        return f"N{self.index}"

    @property
    def mark(self) -> MarkLaw:
        return MarkLaw(self.support, self.density, self.homogeneous)

    def channel(self, fund: int = 0) -> CountingChannel:
        """Loss channel gated on ``fund``; a paid claim removes one unit."""
        return CountingChannel(self.name, self.intensity, gate=fund, effect=outflow(fund), mark=self.mark)


def check_disjoint(grades: Sequence[SeverityGrade]) -> None:
    spans = sorted(g.support for g in grades)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ValueError(f"grade supports overlap: {a0, a1} and {b0, b1}")


def grade_of(grades: Sequence[SeverityGrade], x: float) -> int:
    """Index of the grade whose support contains the mark ``x``."""
    hits = [g.index for g in grades if g.support[0] <= x <= g.support[1]]
    if len(hits) != 1:
        raise ValueError(f"mark {x!r} is in {len(hits)} grade supports")
    return hits[0]


@dataclass(frozen=True)
class LossSpec:
    """Payout ``l(t, x) >= 0`` to the insured for a loss of size ``x``."""

    payout: Callable

    def __call__(self, t, x):
        return np.asarray(self.payout(t, x), float)

    def check(self, grades: Sequence[SeverityGrade], t: float = 0.0) -> None:
        for g in grades:
            nodes, _ = g.mark.quadrature(t)
            if np.any(self(t, nodes) < 0):
                raise ValueError(f"payout is negative on the support of grade {g.index}")

    def cash(self) -> Callable:
        """Event cash function (a debit) for use in a claim's ``event_cash``."""
        return lambda t, snap, x: -self(t, x) * np.ones(snap.P)


def sample_mark(grade: SeverityGrade, t, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Inverse-CDF draws from the grade's severity density."""
    u = rng.random(size)
    return grade.mark.sample(t, u)


def lbar(grade: SeverityGrade, loss: LossSpec, t: float = 0.0) -> float:
    """Expected payout per loss, ``int_K l(t, x) nu(x) dx`` (32-point Gauss-Legendre)."""
    return grade.mark.expect(lambda x: loss(t, x), t)


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function with jumps at ``times`` and ``values`` after each jump."""

    times: np.ndarray
    values: np.ndarray
    initial: float = 0.0

    def __call__(self, t):
        idx = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([[self.initial], self.values])
        return vals[idx]

    @property
    def terminal(self) -> float:
        return float(self.values[-1]) if self.values.size else self.initial


def cumulative_loss(events: EventTable, loss: LossSpec, channels: Optional[Sequence[int]] = None) -> StepFunction:
    """Total payout up to ``t`` from the marked events of one path."""
    sel = ~np.isnan(events.mark)
    if channels is not None:
        sel &= np.isin(events.channel, list(channels))
    t = events.time[sel]
    order = np.argsort(t, kind="stable")
    t, x = t[order], events.mark[sel][order]
    pay = np.array([float(loss(ti, xi)) for ti, xi in zip(t, x)])
    return StepFunction(t, np.cumsum(pay))


def two_exit_queue(q0: int, A, C, D) -> StepFunction:
    """Queue path ``Q0 + A - C - D`` from the event times of each stream.

    Raises
    ------
    NegativeQueue
        If an exit happens while the queue is empty.
    """
    times = np.concatenate([np.asarray(A, float), np.asarray(C, float), np.asarray(D, float)])
    steps = np.concatenate([np.ones(len(A)), -np.ones(len(C)), -np.ones(len(D))]).astype(int)
    order = np.argsort(times, kind="stable")
    times, steps = times[order], steps[order]
    Q = int(q0) + np.cumsum(steps)
    if np.any(Q < 0):
        i = int(np.argmax(Q < 0))
        raise NegativeQueue(f"queue would go negative at t={times[i]:.6g}")
    return StepFunction(times, Q.astype(float), float(q0))


@dataclass
class GradedStateSpace:
    """A chain on pairs ``(i, j)``: ``i`` a market factor, ``j`` a severity regime (0 = calm)."""

    n_f: int
    n_g: int
    chain: ChainModel
    grades: list
    flow_channels: list
    fund: int = 0

    def index(self, i: int, j: int) -> int:
        return i * (self.n_g + 1) + j

    def pair(self, s: int):
        return divmod(s, self.n_g + 1)

    @property
    def channels(self) -> list:
        return list(self.flow_channels) + [g.channel(self.fund) for g in self.grades]


def build_graded_state_space(
    n_f: int,
    n_g: int,
    base_generator,
    supports: Sequence[tuple],
    loss_rates: Sequence[float],
    on_grade_loading: float = 5.0,
    off_grade_loading: float = 1.0,
    excite_rate: float = 0.5,
    relax_rate: float = 2.0,
    inflow_rates=None,
    outflow_rates=None,
    flow_sensitivity: float = 2.0,
    densities: Optional[Sequence[Callable]] = None,
    fund: int = 0,
    x0_dist=None,
) -> GradedStateSpace:
    """Build the chain on ``n_f * (n_g + 1)`` states plus its channels.

    * Market factor ``i`` moves by ``base_generator`` (column convention,
      ``R[a, b]`` = rate ``b -> a``) whatever the regime.
    * From the calm regime ``j = 0`` each grade regime is entered at
      ``excite_rate``; every grade regime relaxes to ``j = 0`` at ``relax_rate``.
    * The loss intensity of grade ``k`` is ``loss_rates[k-1]`` times
      ``on_grade_loading`` in regime ``k`` and ``off_grade_loading`` otherwise.
    * Subscription and redemption intensities depend on the factor through
      ``inflow_rates[i]`` / ``outflow_rates[i]`` and on the regime through
      ``flow_sensitivity ** (-j)`` / ``flow_sensitivity ** j``.
    """
    if n_f < 1 or n_g < 1:
        raise ValueError("n_f and n_g must be >= 1")
    if len(supports) != n_g or len(loss_rates) != n_g:
        raise ValueError("need one support and one loss rate per grade")
    Rb = np.asarray(base_generator, float).reshape(n_f, n_f)
    G = n_g + 1
    N = n_f * G
    R = np.zeros((N, N))
    for j in range(G):
        for a in range(n_f):
            for b in range(n_f):
                if a != b:
                    R[a * G + j, b * G + j] += Rb[a, b]
    for i in range(n_f):
        for j in range(1, G):
            R[i * G + j, i * G] += excite_rate
            R[i * G, i * G + j] += relax_rate
    R -= np.diag(R.sum(axis=0))
    jj = np.tile(np.arange(G), n_f)
    ii = np.repeat(np.arange(n_f), G)
    grades = []
    dens = densities or [None] * n_g
    for k in range(1, G):
        rates = loss_rates[k - 1] * np.where(jj == k, on_grade_loading, off_grade_loading)
        d = dens[k - 1] or (lambda t, x: np.ones_like(np.asarray(x, float)))
        grades.append(SeverityGrade(k, tuple(supports[k - 1]), d, StateRates(rates)))
    check_disjoint(grades)
    flows = []
    if inflow_rates is not None:
        r = np.asarray(inflow_rates, float)[ii] * flow_sensitivity ** (-jj.astype(float))
        flows.append(CountingChannel("A", StateRates(r), effect=inflow(fund)))
    if outflow_rates is not None:
        r = np.asarray(outflow_rates, float)[ii] * flow_sensitivity ** jj.astype(float)
        flows.append(CountingChannel("D", StateRates(r), gate=fund, effect=outflow(fund)))
    x0 = np.full(N, 1.0 / N) if x0_dist is None else np.asarray(x0_dist, float)
    chain = ChainModel(N, Constant(R), x0)
    return GradedStateSpace(n_f, n_g, chain, grades, flows, fund)
