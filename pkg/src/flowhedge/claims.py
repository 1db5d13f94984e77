"""Liabilities and cash-flow streams seen by the fund manager.

Cash is signed from the fund's point of view: positive amounts are income
(subscription fees, running charges), negative amounts are payments
(redemption costs, insured losses, switching costs). All functions receive
observable data only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .chain_filter import channel_gates, channel_rates
from .market import Model, Snapshot


@dataclass(frozen=True)
class ClaimSpec:
    """Terminal liability ``H`` plus intermediate cash flows.

    Parameters
    ----------
    payoff
        ``payoff(snap) -> (P,)`` evaluated on the observable state at the horizon.
    running
        Optional continuous cash rate ``running(t, snap) -> (P,)``, e.g. ``kappa * Q``.
    event_cash
        Channel name -> ``cash(t, snap, x) -> (P,)`` paid at each event of that
        channel; ``x`` holds the marks (NaN on unmarked channels).
    """

    payoff: Callable[[Snapshot], np.ndarray]
    running: Optional[Callable[[float, Snapshot], np.ndarray]] = None
    event_cash: Mapping[str, Callable] = field(default_factory=dict)

    @property
    def has_cashflows(self) -> bool:
        return self.running is not None or bool(self.event_cash)

    def without_cashflows(self) -> "ClaimSpec":
        return ClaimSpec(self.payoff)


def constant_claim(c: float) -> ClaimSpec:
    return ClaimSpec(lambda snap: np.full(snap.P, float(c)))


def price_claim(j: int = 0) -> ClaimSpec:
    """``H = S^j_T``."""
    return ClaimSpec(lambda snap: snap.S[:, j].copy())


def running_fee(kappa: float, fund: int = 0) -> Callable:
    """Continuous service charge ``kappa * Q(fund)``."""
    return lambda t, snap: float(kappa) * snap.Q[:, fund]


def flat_cash(amount: float) -> Callable:
    return lambda t, snap, x: np.full(snap.P, float(amount))


def loss_cash(loss: Callable) -> Callable:
    """Payment ``-l(t, x)`` on a marked channel."""
    return lambda t, snap, x: -np.asarray(loss(t, x), float) * np.ones(snap.P)


def combine(claims: Sequence[ClaimSpec], weights: Sequence[float]) -> ClaimSpec:
    """Linear combination of claims and their cash flows."""
    claims, weights = list(claims), [float(w) for w in weights]

    def payoff(snap):
        return sum(w * c.payoff(snap) for c, w in zip(claims, weights))

    runs = [(c.running, w) for c, w in zip(claims, weights) if c.running is not None]
    running = (lambda t, snap: sum(w * f(t, snap) for f, w in runs)) if runs else None
    names = sorted({n for c in claims for n in c.event_cash})
    cash = {}
    for name in names:
        parts = [(c.event_cash[name], w) for c, w in zip(claims, weights) if name in c.event_cash]
        cash[name] = (lambda ps: lambda t, snap, x: sum(w * f(t, snap, x) for f, w in ps))(parts)
    return ClaimSpec(payoff, running, cash)


def check_claim(model: Model, claim: ClaimSpec) -> None:
    names = {c.name for c in model.channels}
    for name in claim.event_cash:
        if name not in names:
            raise KeyError(f"cash flow references unknown channel {name!r}")


@dataclass
class CashMoments:
    """Per-path filtered intensities and first two mark-averaged cash moments, shape ``(P, K)``."""

    lam_hat: np.ndarray
    mean: np.ndarray
    second: np.ndarray
    running: np.ndarray

    def rate(self) -> np.ndarray:
        """Expected cash rate ``running + sum_k lam_hat_k E[c_k]``."""
        return self.running + (self.lam_hat * self.mean).sum(axis=1)


def cash_moments(model: Model, claim: ClaimSpec, t: float, snap: Snapshot, xhat: np.ndarray) -> CashMoments:
    P, K = snap.P, model.K
    lam = channel_rates(model.channels, t, snap, model.chain.N) if K else np.zeros((P, 0, model.chain.N))
    gates = channel_gates(model.channels, snap.Q)
    lam_hat = np.zeros((P, K))
    for j in range(xhat.shape[1]):
        lam_hat += lam[:, :, j] * xhat[:, j : j + 1]
    lam_hat *= gates
    mean = np.zeros((P, K))
    second = np.zeros((P, K))
    for k, ch in enumerate(model.channels):
        fn = claim.event_cash.get(ch.name)
        if fn is None:
            continue
        if ch.mark is None:
            c = np.asarray(fn(t, snap, np.full(P, np.nan)), float) * np.ones(P)
            mean[:, k], second[:, k] = c, c * c
        else:
            for xn, wn in zip(*ch.mark.quadrature(t)):
                c = np.asarray(fn(t, snap, np.full(P, xn)), float) * np.ones(P)
                mean[:, k] += wn * c
                second[:, k] += wn * c * c
    running = np.zeros(P) if claim.running is None else np.asarray(claim.running(t, snap), float) * np.ones(P)
    return CashMoments(lam_hat, mean, second, running)


def realized_cash(model: Model, claim: ClaimSpec, t, ch: np.ndarray, snap: Snapshot, marks: np.ndarray) -> np.ndarray:
    """Cash paid at events (channels ``ch``) for the firing paths in ``snap``."""
    out = np.zeros(snap.P)
    for k in np.unique(ch):
        fn = claim.event_cash.get(model.channels[k].name)
        if fn is None:
            continue
        sel = ch == k
        sub = Snapshot(snap.S[sel], snap.Y[sel], snap.counts[sel], snap.Q[sel])
        tt = t[sel] if np.ndim(t) else t
        out[sel] = np.asarray(fn(tt, sub, marks[sel]), float) * np.ones(sel.sum())
    return out
