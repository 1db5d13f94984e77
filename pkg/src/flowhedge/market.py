"""Model specifications and the full-information path simulator.

The market has ``d`` tradables ``S`` and ``m`` non-tradable indexes ``Y``
driven by Brownian motions shifted by a hidden Gaussian risk premium
``z = (theta; alpha)``. Investment flows and insured events are counting
processes whose intensities are modulated by a hidden finite-state chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import NonInvertibleCoefficient

COND_LIMIT = 1e12


# ---------------------------------------------------------------- diffusions


@dataclass(frozen=True)
class MarketSpec:
    d: int
    m: int
    sigma: Callable
    sigma_bar: Callable
    rho: Callable
    s0: np.ndarray
    y0: np.ndarray

    def __post_init__(self):
        if self.d < 1 or self.m < 0:
            raise ValueError("need d >= 1 and m >= 0")
        object.__setattr__(self, "s0", np.asarray(self.s0, float).reshape(self.d))
        object.__setattr__(self, "y0", np.asarray(self.y0, float).reshape(self.m))

    @property
    def n(self) -> int:
        return self.d + self.m

    def coefficients(self, t, S, Y, check: bool = True):
        """Return ``(sigma, sigma_bar, rho)`` stacked over paths."""
        P = S.shape[0]
        sig = np.asarray(self.sigma(t, S, Y), float).reshape(P, self.d, self.d)
        if self.m:
            sb = np.asarray(self.sigma_bar(t, S, Y), float).reshape(P, self.m, self.d)
            rh = np.asarray(self.rho(t, S, Y), float).reshape(P, self.m, self.m)
        else:
            sb = np.zeros((P, 0, self.d))
            rh = np.zeros((P, 0, 0))
        if check:
            check_invertible(sig, "sigma", t)
            if self.m:
                check_invertible(rh, "rho", t)
        return sig, sb, rh

    def wtilde_increment(self, t, S, Y, dS, dY, check: bool = True) -> np.ndarray:
        """Recover ``dw~ = (sigma^-1 dS; rho^-1 (dY - sigma_bar sigma^-1 dS))``."""
        sig, sb, rh = self.coefficients(t, S, Y, check=check)
        dW = np.linalg.solve(sig, dS[..., None])[..., 0]
        if not self.m:
            return dW
        resid = dY - np.einsum("pij,pj->pi", sb, dW)
        dB = np.linalg.solve(rh, resid[..., None])[..., 0]
        return np.concatenate([dW, dB], axis=1)


def check_invertible(mats: np.ndarray, name: str, t) -> None:
    """Reject matrices whose Hadamard ratio signals a condition number above the limit."""
    k = mats.shape[-1]
    if k == 0:
        return
    if k == 1:
        scale = np.abs(mats[:, 0, 0])
        bad = ~(scale > 0) | ~np.isfinite(scale)
    else:
        det = np.abs(np.linalg.det(mats))
        rows = np.prod(np.linalg.norm(mats, axis=2), axis=1)
        bad = ~(det > rows / COND_LIMIT) | ~np.isfinite(det)
    if np.any(bad):
        raise NonInvertibleCoefficient(f"{name} is singular at t={np.max(t):.6g}")


@dataclass(frozen=True)
class RiskPremiumModel:
    mu: Callable
    bigF: Callable
    delta: Callable
    z0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        z0 = np.atleast_1d(np.asarray(self.z0, float))
        n = z0.shape[0]
        S0 = np.asarray(self.Sigma0, float).reshape(n, n)
        if not np.allclose(S0, S0.T, atol=1e-12):
            raise ValueError("Sigma0 must be symmetric")
        if np.linalg.eigvalsh(S0).min() < -1e-12:
            raise ValueError("Sigma0 must be positive semidefinite")
        object.__setattr__(self, "z0", z0)
        object.__setattr__(self, "Sigma0", S0)

    @property
    def n(self) -> int:
        return self.z0.shape[0]

    def coefficients(self, t):
        n = self.n
        mu = np.asarray(self.mu(t), float).reshape(n)
        F = np.asarray(self.bigF(t), float).reshape(n, n)
        dl = np.asarray(self.delta(t), float)
        return mu, F, dl.reshape(n, -1) if dl.size else np.zeros((n, 0))


# ------------------------------------------------------------- hidden chain


@dataclass(frozen=True)
class ChainModel:
    """Hidden chain; ``generator(t)[i, j]`` is the rate of ``j -> i``."""

    N: int
    generator: Callable
    x0_dist: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0_dist, float).reshape(self.N)
        if np.any(x0 < 0) or abs(x0.sum() - 1.0) > 1e-10:
            raise ValueError("x0_dist must be a probability vector")
        object.__setattr__(self, "x0_dist", x0)
        check_generator(self.R(0.0))

    def R(self, t) -> np.ndarray:
        return np.asarray(self.generator(t), float).reshape(self.N, self.N)


def check_generator(R: np.ndarray) -> None:
    off = R - np.diag(np.diag(R))
    if np.any(off < 0):
        raise ValueError("generator off-diagonal entries must be >= 0")
    if np.any(np.abs(R.sum(axis=0)) > 1e-9):
        raise ValueError("generator columns must sum to 0")


# --------------------------------------------------------- counting channels


@dataclass
class Snapshot:
    """Observable state of ``P`` paths used to evaluate intensities and cashflows."""

    S: np.ndarray
    Y: np.ndarray
    counts: np.ndarray
    Q: np.ndarray

    @property
    def P(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class StateRates:
    """Per-state constant intensity ``lambda(t, e_i) = rates[i]``."""

    rates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rates", np.atleast_1d(np.asarray(self.rates, float)))

    def __call__(self, t, snap: Snapshot) -> np.ndarray:
        return np.broadcast_to(self.rates, (snap.P, self.rates.shape[0]))


@dataclass(frozen=True)
class LogLinearRates:
    """``rates[i] * exp(b_s.S + b_y.Y + b_q.Q + b_c.counts)``; the observed prefix enters here."""

    rates: np.ndarray
    b_s: Optional[np.ndarray] = None
    b_y: Optional[np.ndarray] = None
    b_q: Optional[np.ndarray] = None
    b_c: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "rates", np.atleast_1d(np.asarray(self.rates, float)))

    def __call__(self, t, snap: Snapshot) -> np.ndarray:
        expo = np.zeros(snap.P)
        for b, x in ((self.b_s, snap.S), (self.b_y, snap.Y), (self.b_q, snap.Q), (self.b_c, snap.counts)):
            if b is not None:
                expo = expo + x @ np.asarray(b, float)
        return self.rates[None, :] * np.exp(expo)[:, None]


@dataclass(frozen=True)
class QueueEffect:
    kind: str = "none"
    fund: Optional[int] = None
    to: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("none", "inflow", "outflow", "transfer"):
            raise ValueError(f"unknown queue effect {self.kind!r}")
        if self.kind != "none" and self.fund is None:
            raise ValueError("queue effect needs a fund")
        if self.kind == "transfer" and self.to is None:
            raise ValueError("transfer needs a destination fund")


NO_EFFECT = QueueEffect()


def inflow(fund: int) -> QueueEffect:
    return QueueEffect("inflow", fund)


def outflow(fund: int) -> QueueEffect:
    return QueueEffect("outflow", fund)


def transfer(src: int, dst: int) -> QueueEffect:
    return QueueEffect("transfer", src, dst)


class MarkLaw:
    """Mark (loss-size) density on a compact support ``[lo, hi]`` with ``lo > 0``.

    ``density(t, x)`` need not be normalized; it is normalized numerically.
    Draws use inverse-CDF sampling on a 256-point tabulated CDF.
    """

    TABLE = 256
    QUAD = 32

    def __init__(self, support, density: Callable, homogeneous: bool = True, loss: Optional[Callable] = None):
        lo, hi = float(support[0]), float(support[1])
        if not (0 < lo < hi):
            raise ValueError("mark support must satisfy 0 < lo < hi")
        self.support = (lo, hi)
        self.density = density
        self.homogeneous = homogeneous
        self.loss = loss
        self._table = self._tabulate(0.0) if homogeneous else None
        xg, wg = leggauss(self.QUAD)
        self._nodes = lo + (hi - lo) * (xg + 1) / 2
        self._weights = wg * (hi - lo) / 2

    @classmethod
    def uniform(cls, support, loss=None) -> "MarkLaw":
        return cls(support, lambda t, x: np.ones_like(np.asarray(x, float)), loss=loss)

    @classmethod
    def truncated_exponential(cls, support, rate: float, loss=None) -> "MarkLaw":
        return cls(support, lambda t, x: np.exp(-rate * np.asarray(x, float)), loss=loss)

    def _tabulate(self, t):
        lo, hi = self.support
        x = np.linspace(lo, hi, self.TABLE)
        f = np.asarray(self.density(t, x), float)
        if np.any(f <= 0):
            raise ValueError("mark density must be strictly positive on its support")
        cdf = np.concatenate([[0.0], np.cumsum((f[1:] + f[:-1]) / 2 * np.diff(x))])
        return x, cdf / cdf[-1]

    def cdf(self, t, x):
        grid, cdf = self._table if self.homogeneous else self._tabulate(t)
        return np.interp(x, grid, cdf)

    def sample(self, t, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, float)
        if self.homogeneous:
            grid, cdf = self._table
            return np.interp(u, cdf, grid)
        t = np.broadcast_to(np.asarray(t, float), u.shape)
        out = np.empty_like(u)
        for i, (ti, ui) in enumerate(zip(t.ravel(), u.ravel())):
            grid, cdf = self._tabulate(ti)
            out.flat[i] = np.interp(ui, cdf, grid)
        return out

    def normalized_density(self, t, x):
        norm = np.sum(self._weights * np.asarray(self.density(t, self._nodes), float))
        return np.asarray(self.density(t, x), float) / norm

    def quadrature(self, t):
        """Nodes and weights with ``sum(w * f(nodes)) ~ int_K f(x) nu_t(x) dx``."""
        dens = np.asarray(self.density(t, self._nodes), float)
        return self._nodes, self._weights * dens / np.sum(self._weights * dens)

    def expect(self, fn: Callable, t) -> float:
        """``int_K fn(x) nu_t(x) dx`` by 32-point Gauss-Legendre quadrature."""
        dens = np.asarray(self.density(t, self._nodes), float)
        dens = dens / np.sum(self._weights * dens)
        vals = np.asarray(fn(self._nodes), float)
        return float(np.sum(self._weights * dens * vals))


@dataclass(frozen=True)
class CountingChannel:
    name: str
    intensity: Callable
    gate: Optional[int] = None
    effect: QueueEffect = NO_EFFECT
    mark: Optional[MarkLaw] = None


# -------------------------------------------------------------- whole model


@dataclass(frozen=True)
class Model:
    market: MarketSpec
    premium: RiskPremiumModel
    chain: ChainModel
    channels: tuple = ()
    q0: tuple = ()
    fund_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "q0", tuple(int(q) for q in self.q0))
        if not self.fund_names:
            object.__setattr__(self, "fund_names", tuple(f"fund{i}" for i in range(len(self.q0))))
        if self.premium.n != self.market.n:
            raise ValueError("risk premium dimension must equal d + m")
        if any(q < 0 for q in self.q0):
            raise ValueError("initial queues must be nonnegative")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")
        F = len(self.q0)
        for c in self.channels:
            for f in (c.gate, c.effect.fund, c.effect.to):
                if f is not None and not (0 <= f < F):
                    raise ValueError(f"channel {c.name!r} references undeclared fund {f}")
            if c.effect.kind in ("outflow", "transfer") and c.gate != c.effect.fund:
                raise ValueError(f"channel {c.name!r} removes units and must be gated on its source fund")

    @property
    def K(self) -> int:
        return len(self.channels)

    @property
    def F(self) -> int:
        return len(self.q0)

    def channel_index(self, name: str) -> int:
        for k, c in enumerate(self.channels):
            if c.name == name:
                return k
        raise KeyError(name)

    def with_channels(self, channels, q0=None, fund_names=None) -> "Model":
        return replace(
            self,
            channels=tuple(channels),
            q0=self.q0 if q0 is None else tuple(q0),
            fund_names=self.fund_names if fund_names is None else tuple(fund_names),
        )


# ---------------------------------------------------------------- path data


@dataclass
class EventTable:
    """Channel events of one or many paths, sorted by (path, time)."""

    time: np.ndarray
    channel: np.ndarray
    mark: np.ndarray
    path: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, with_path: bool = False) -> "EventTable":
        e = np.empty(0)
        return cls(e, np.empty(0, int), e.copy(), np.empty(0, int) if with_path else None)

    def __len__(self) -> int:
        return self.time.shape[0]

    def select(self, mask) -> "EventTable":
        return EventTable(
            self.time[mask], self.channel[mask], self.mark[mask], None if self.path is None else self.path[mask]
        )

    def for_path(self, p: int) -> "EventTable":
        sel = self.select(self.path == p)
        sel.path = None
        return sel


@dataclass
class ObservedPath:
    """Everything the fund manager sees on one path."""

    times: np.ndarray
    S: np.ndarray
    Y: np.ndarray
    events: EventTable
    Q: np.ndarray
    q0: tuple
    channel_names: tuple

    def counts_at_grid(self) -> np.ndarray:
        K = len(self.channel_names)
        out = np.zeros((self.times.shape[0], K), dtype=np.int64)
        for k in range(K):
            tk = self.events.time[self.events.channel == k]
            out[:, k] = np.searchsorted(tk, self.times, side="right")
        return out


@dataclass
class TruthPath(ObservedPath):
    """Observed data plus the hidden drivers of one simulated path."""

    dW: np.ndarray = None
    dB: np.ndarray = None
    dV: np.ndarray = None
    z: np.ndarray = None
    x: np.ndarray = None
    x_jump_times: np.ndarray = None
    x_jump_states: np.ndarray = None

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])


def observable_projection(path: ObservedPath) -> ObservedPath:
    """Drop hidden drivers (z, X, W, B, V); idempotent."""
    return ObservedPath(
        times=path.times,
        S=path.S,
        Y=path.Y,
        events=path.events,
        Q=path.Q,
        q0=tuple(path.q0),
        channel_names=tuple(path.channel_names),
    )


def reconstruct_wtilde(path: ObservedPath, market: MarketSpec) -> np.ndarray:
    """Cumulated ``w~`` recovered from prices, shape ``(len(times), n)``."""
    t = path.times
    inc = np.zeros((t.shape[0], market.n))
    for k in range(t.shape[0] - 1):
        inc[k + 1] = market.wtilde_increment(
            t[k], path.S[k : k + 1], path.Y[k : k + 1], path.S[k + 1 : k + 2] - path.S[k : k + 1],
            path.Y[k + 1 : k + 2] - path.Y[k : k + 1],
        )[0]
    return np.cumsum(inc, axis=0)


def separate_ties(times: np.ndarray) -> np.ndarray:
    """Nudge exactly tied event times apart by one ulp; the result is strictly increasing."""
    out = np.array(times, float)
    for i in range(1, out.shape[0]):
        if out[i] <= out[i - 1]:
            out[i] = np.nextafter(out[i - 1], np.inf)
    assert np.all(np.diff(out) > 0)
    return out


def simulate_truth(
    market: MarketSpec,
    rp: RiskPremiumModel,
    chain: ChainModel,
    channels: Sequence[CountingChannel],
    q0: Sequence[int],
    horizon: float,
    step: float,
    seed: int,
    path_index: int = 0,
    strict: bool = True,
) -> TruthPath:
    """Simulate one full-information path (path ``path_index`` of stream ``seed``)."""
    from .engine import simulate_truth_ensemble

    model = Model(market, rp, chain, tuple(channels), tuple(q0))
    ens = simulate_truth_ensemble(model, horizon, step, seed, npaths=1, offset=path_index, record=True, strict=strict)
    return ens.path(0)
