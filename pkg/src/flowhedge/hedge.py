"""Mean-variance hedging of a claim with intermediate cash flows.

The value function is quadratic in wealth, ``V(t, w) = w^2 V2 - 2 w V1 + V0``.
``V2`` comes from the Riccati system. ``V1`` is a discounted expectation
under the auxiliary measure ``PA``:

    V1(t) = E^A[ e^{-int eta} H - int e^{-int eta} (expected cash rate) V2 ds ],
    eta = |theta^|^2 + Z_L^T theta^,

and the optimal position is

    pi* = sigma^{-T} ( [Z1 + V1 theta^] - W [Z2 + V2 theta^] ) / V2.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

import numpy as np

from . import riccati
from ._linalg import bmtv, bsolve, mv, rowdot
from .claims import ClaimSpec, cash_moments, check_claim, realized_cash
from .engine import EngineState, Hooks, InitialState, RunSpec, run
from .errors import SurfaceNotFitted
from .kalman import CovarianceSolution, solve_covariance
from .lsm import LsmSurface, StateBatch
from .market import Model, Snapshot
from .rng import INIT_STEP, PathStreams

COV_REFINE = 10


@dataclass(frozen=True)
class Setup:
    """Model plus the precomputed covariance and Riccati solutions on one grid."""

    model: Model
    cov: CovarianceSolution
    ric: riccati.RiccatiSolution
    horizon: float
    step: float

    @classmethod
    def build(cls, model: Model, horizon: float, step: float) -> "Setup":
        """Covariance on a grid ten times finer than ``step``; Riccati at twice that."""
        cov = solve_covariance(model.premium, horizon, step / COV_REFINE, d=model.market.d)
        ric = riccati.solve(model.premium, cov, horizon)
        return cls(model, cov, ric, float(horizon), float(step))

    @property
    def d(self) -> int:
        return self.model.market.d

    def v2(self, t, zhat):
        return riccati.v2(self.ric, t, zhat)


def initial_state(setup: Setup) -> InitialState:
    mk = setup.model.market
    return InitialState(S=mk.s0, Y=mk.y0, zhat=setup.model.premium.z0, q=setup.model.chain.x0_dist)


def jittered_state(setup: Setup, npaths: int, seed: int, scale: float = 0.1,
                   base: Optional[InitialState] = None) -> InitialState:
    """Spread the starting state so that slice-0 regressions can resolve gradients.

    Prices move by ``scale`` in relative terms, premium means by ``scale``
    times the larger of the prior standard deviation and 0.1, and filter
    weights by a lognormal factor. Queues and event counts get integer
    shifts (clipped at zero) with standard deviation ``10 * scale`` times
    ``max(1, sqrt(level))``, so that slice-0 regressions also see them vary
    and event revaluations at early times are identified.
    """
    model = setup.model
    mk, rp = model.market, model.premium
    base = base or initial_state(setup)
    ps = PathStreams(seed, 0, npaths, roles=("jitter",))
    ps.seek(INIT_STEP)
    N, F, K = model.chain.N, model.F, model.K
    g = ps.normal("jitter", mk.d + mk.m + rp.n + N + F + K)
    d, m, n = mk.d, mk.m, rp.n
    Q0 = np.broadcast_to(np.asarray(base.Q if base.Q is not None else model.q0, float), (npaths, F))
    C0 = np.broadcast_to(np.asarray(base.counts if base.counts is not None else np.zeros(K), float), (npaths, K))
    gi = g[:, d + m + n + N :]

    def shift(level, z):
        return np.maximum(0, np.rint(level + z * 10 * scale * np.sqrt(np.maximum(level, 1.0)))).astype(np.int64)

    Q = shift(Q0, gi[:, :F])
    counts = shift(C0, gi[:, F:])
    S = np.broadcast_to(np.asarray(base.S, float), (npaths, d)) * (1 + scale * g[:, :d])
    yscale = np.maximum(np.abs(np.asarray(base.Y, float)), 1.0)
    Y = np.broadcast_to(np.asarray(base.Y, float), (npaths, m)) + scale * yscale * g[:, d : d + m]
    zs = np.maximum(np.sqrt(np.diag(rp.Sigma0)), 0.1)
    Z = np.broadcast_to(np.asarray(base.zhat, float), (npaths, n)) + scale * zs * g[:, d + m : d + m + n]
    q0 = np.broadcast_to(np.asarray(base.q, float), (npaths, model.chain.N))
    q = q0 * np.exp(3 * scale * g[:, d + m + n : d + m + n + N])
    return InitialState(S=S, Y=Y, zhat=Z, q=q / q.sum(axis=1, keepdims=True), counts=counts, Q=Q)


# ---------------------------------------------------------------- PA runs


class _PAHooks(Hooks):
    def __init__(self, setup: Setup, claim: ClaimSpec, count: int, nsteps: int, keep: bool, control=None):
        self.setup, self.claim, self.keep = setup, claim, keep
        self.acc = np.zeros(count)
        self.control = control
        self.cv = np.zeros(count)
        self.load = self.jump = self.inc = None
        self.rate = np.empty((count, nsteps + 1)) if keep else None
        self.v2 = np.empty((count, nsteps + 1)) if keep else None
        self.cvinc = np.zeros((count, nsteps)) if keep and control is not None else None
        self.payoff = None
        self.nsteps = nsteps

    def _cash(self, k, t, st, weight):
        # trapezoid rule in time: end points carry half weight
        if not self.claim.has_cashflows:
            rate = np.zeros(st.P)
        else:
            rate = cash_moments(self.setup.model, self.claim, t, st.snapshot(), st.xhat).rate()
        v2 = self.setup.v2(t, st.zhat)
        self.acc -= weight * np.exp(-st.log_disc) * rate * v2 * self.setup.step
        if self.keep:
            self.rate[:, k] = rate
            self.v2[:, k] = v2

    def start(self, k, t, st: EngineState):
        self._cash(k, t, st, 0.5 if k == 0 else 1.0)
        if self.control is not None:
            batch = StateBatch.from_state(st)
            disc = np.exp(-st.log_disc)
            grads = self.control.gradient(self.setup, batch)
            self.load = innovation_loading(self.setup, batch, *grads) * disc[:, None]
            self.inc = np.zeros(st.P)
            if self.setup.model.K:
                self.jump = estimate_event_sensitivities(self.control, self.setup, batch) * disc[:, None]
                self._compensate(t, st)

    def _compensate(self, t, st):
        lam = cash_moments(self.setup.model, self.claim, t, st.snapshot(), st.xhat).lam_hat
        self.inc -= 0.5 * self.setup.step * (lam * self.jump).sum(axis=1)

    def event(self, k, idx, ch, tau, marks, snap, st):
        if self.jump is not None:
            self.inc[idx] += self.jump[idx, ch]

    def end(self, k, t_next, st, dS, dY):
        if self.load is not None:
            self.inc += rowdot(self.load, st.innov)
            if self.jump is not None:
                self._compensate(t_next, st)
            self.cv += self.inc
            if self.cvinc is not None:
                self.cvinc[:, k] = self.inc
        if k == self.nsteps - 1:
            self._cash(k + 1, t_next, st, 0.5)
            self.payoff = np.asarray(self.claim.payoff(st.snapshot()), float) * np.ones(st.P)
            self.acc += np.exp(-st.log_disc) * self.payoff


@dataclass
class PAEnsemble:
    """Paths simulated under ``PA`` with the per-path ``V1`` samples.

    ``sample[p] = e^{-L_T} H - int e^{-L} rate V2 ds`` (trapezoid rule on the
    grid) where ``L`` is the accumulated ``int eta``. With ``record`` the grid states, cash rates and
    ``V2`` values are kept for regression. ``control`` holds a mean-zero
    stochastic integral against the innovations (zero when no control was
    supplied); ``sample - control`` is an unbiased lower-variance sample.
    """

    t0: float
    step: float
    sample: np.ndarray
    payoff: np.ndarray
    log_disc: np.ndarray
    ens: Optional[object] = None
    rate: Optional[np.ndarray] = None
    v2: Optional[np.ndarray] = None
    control: Optional[np.ndarray] = None
    control_steps: Optional[np.ndarray] = None

    @property
    def npaths(self) -> int:
        return self.sample.shape[0]

    @property
    def adjusted(self) -> np.ndarray:
        return self.sample if self.control is None else self.sample - self.control

    @property
    def discount(self) -> np.ndarray:
        return np.exp(-self.log_disc)

    def backward_targets(self) -> list:
        """Realized discounted future values at every slice (regression targets)."""
        if self.ens is None:
            raise ValueError("ensemble was not recorded")
        L = self.ens.log_disc
        K = self.rate.shape[1] - 1
        c = self.rate * self.v2
        y = self.payoff.copy()
        out = [None] * K
        for k in range(K - 1, -1, -1):
            disc = np.exp(-(L[:, k + 1] - L[:, k]))
            y = disc * (y - 0.5 * self.step * c[:, k + 1]) - 0.5 * self.step * c[:, k]
            if self.control_steps is not None:
                # the increments were discounted to time t0; bring them to t_k
                y = y - np.exp(L[:, k]) * self.control_steps[:, k]
            out[k] = y
        return out


def simulate_under_pa(
    setup: Setup,
    claim: ClaimSpec,
    npaths: int,
    seed: int,
    t0: float = 0.0,
    state0: Optional[InitialState] = None,
    threads: int = 1,
    record: bool = False,
    control=None,
) -> PAEnsemble:
    """Simulate the observer's system under ``PA`` from ``state0`` at ``t0``.

    ``control`` is any object with ``value(setup, batch)`` and
    ``gradient(setup, batch) -> (dS, dY, dz)`` approximating ``V1``. It
    defines a control variate: the discounted innovation integral of its
    gradient loadings plus its event jumps compensated by the filtered
    intensity (trapezoid rule, so the mean is zero up to a second-order
    time-step error).
    """
    check_claim(setup.model, claim)
    spec = RunSpec(setup.model, setup.horizon, setup.step, seed, mode="observer", measure="PA",
                   cov=setup.cov, ric=setup.ric, t0=t0, init=state0 or initial_state(setup), record=record)
    n = spec.nsteps
    final, hooks, ens = run(spec, npaths, threads=threads,
                            hooks_factory=lambda off, cnt: _PAHooks(setup, claim, cnt, n, record, control))
    cat = lambda name: np.concatenate([getattr(h, name) for h in hooks], axis=0)  # noqa: E731
    return PAEnsemble(
        t0=t0,
        step=setup.step,
        sample=cat("acc"),
        payoff=cat("payoff"),
        log_disc=final.log_disc,
        ens=ens,
        rate=cat("rate") if record else None,
        v2=cat("v2") if record else None,
        control=cat("cv") if control is not None else None,
        control_steps=cat("cvinc") if record and control is not None else None,
    )


@dataclass
class HedgeValuation:
    t: float
    V1: float
    V1_se: float
    Z1: Optional[np.ndarray] = None
    Z1_se: Optional[np.ndarray] = None
    J1: Optional[dict] = None
    J1_se: Optional[dict] = None


def mean_se(x: np.ndarray):
    x = np.asarray(x, float)
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.shape[0])) if x.shape[0] > 1 else 0.0


def estimate_v1(pa: PAEnsemble) -> HedgeValuation:
    v, se = mean_se(pa.adjusted)
    return HedgeValuation(pa.t0, v, se)


# ---------------------------------------------------------- sensitivities


def _batch_from_init(setup: Setup, t: float, init: InitialState, P: int = 1) -> StateBatch:
    model = setup.model
    mk = model.market
    q = np.broadcast_to(np.asarray(init.q if init.q is not None else model.chain.x0_dist, float), (P, model.chain.N))

    def arr(x, default, shape, dtype=float):
        return np.broadcast_to(np.asarray(default if x is None else x, dtype), (P,) + shape).copy()

    return StateBatch(
        t,
        arr(init.S, mk.s0, (mk.d,)),
        arr(init.Y, mk.y0, (mk.m,)),
        arr(init.zhat, model.premium.z0, (mk.n,)),
        q / q.sum(axis=1, keepdims=True),
        arr(init.counts, np.zeros(model.K, np.int64), (model.K,), np.int64),
        arr(init.Q, np.array(model.q0, np.int64), (model.F,), np.int64),
    )


def z1_from_gradients(setup: Setup, batch: StateBatch, gS, gY, gz) -> np.ndarray:
    """Combine state partials of ``V1`` with the volatility loadings into ``Z1``."""
    sig, sb, _ = setup.model.market.coefficients(batch.t, batch.S, batch.Y)
    Sig = setup.cov.at(batch.t)
    d = setup.d
    out = bmtv(sig, gS) + mv(Sig[:d], gz)
    if sb.shape[1]:
        out = out + bmtv(sb, gY)
    return out


def innovation_loading(setup: Setup, batch: StateBatch, gS, gY, gz) -> np.ndarray:
    """Loading ``(P, n)`` of ``f(S, Y, z^)`` on the innovation increments ``(dN, dM)``."""
    d = setup.d
    z1 = z1_from_gradients(setup, batch, gS, gY, gz)
    if gY.shape[1] == 0:
        return z1
    _, _, rh = setup.model.market.coefficients(batch.t, batch.S, batch.Y)
    sz = mv(setup.cov.at(batch.t), gz)
    return np.concatenate([z1, bmtv(rh, gY) + sz[:, d:]], axis=1)


class V1Source(Protocol):
    def value(self, setup: Setup, batch: StateBatch) -> np.ndarray: ...

    def z1(self, setup: Setup, batch: StateBatch) -> np.ndarray: ...


@dataclass
class SurfaceV1:
    """``V1`` and its loadings read off a fitted regression surface."""

    surface: LsmSurface

    def value(self, setup, batch):
        return self.surface.value(batch)

    def z1(self, setup, batch):
        return z1_from_gradients(setup, batch, *self.surface.gradient(batch))

    def gradient(self, setup, batch):
        return self.surface.gradient(batch)


@dataclass
class ConstantV1:
    """Exact ``V1 = c V2`` for a constant claim without cash flows."""

    c: float

    def value(self, setup, batch):
        return self.c * setup.v2(batch.t, batch.zhat)

    def z1(self, setup, batch):
        return self.c * riccati.z2(setup.ric, setup.cov, batch.t, batch.zhat)

    def gradient(self, setup, batch):
        P = batch.P
        gz = self.c * setup.v2(batch.t, batch.zhat)[:, None] * riccati.grad_v_l(setup.ric, batch.t, batch.zhat)
        return np.zeros((P, batch.S.shape[1])), np.zeros((P, batch.Y.shape[1])), gz


@dataclass
class SquareRatio:
    """``V1^2 / V2`` built from a ``V1`` source; its gradient serves as a control for ``V0``."""

    v1: object

    def value(self, setup, batch):
        V1 = self.v1.value(setup, batch)
        return V1 * V1 / setup.v2(batch.t, batch.zhat)

    def gradient(self, setup, batch):
        V1 = self.v1.value(setup, batch)
        V2 = setup.v2(batch.t, batch.zhat)
        r = (V1 / V2)[:, None]
        gS, gY, gz = self.v1.gradient(setup, batch)
        gV2 = V2[:, None] * riccati.grad_v_l(setup.ric, batch.t, batch.zhat)
        return 2 * r * gS, 2 * r * gY, 2 * r * gz - r * r * gV2


def estimate_z1(source, setup: Setup, batch: StateBatch) -> np.ndarray:
    """``Z1`` at the states in ``batch`` from a fitted surface (or other ``V1`` source)."""
    if source is None or (isinstance(source, LsmSurface) and not source.fitted):
        raise SurfaceNotFitted("Z1 needs a fitted V1 surface")
    if isinstance(source, LsmSurface):
        source = SurfaceV1(source)
    return source.z1(setup, batch)


def estimate_z1_bump(
    setup: Setup, claim: ClaimSpec, state0: InitialState, npaths: int, seed: int,
    t0: float = 0.0, rel: float = 1e-4, threads: int = 1,
):
    """Bump-and-revalue ``Z1`` with common random numbers; returns ``(Z1, se)``.

    Each continuous coordinate is bumped by ``rel`` times its scale (its
    magnitude, at least 1) in both directions.
    """
    b0 = _batch_from_init(setup, t0, state0)
    coords = [("S", i) for i in range(b0.S.shape[1])] + [("Y", i) for i in range(b0.Y.shape[1])]
    coords += [("zhat", i) for i in range(b0.zhat.shape[1])]
    base = {"S": b0.S[0], "Y": b0.Y[0], "zhat": b0.zhat[0]}
    per_path = []
    for name, i in coords:
        eps = rel * max(1.0, abs(base[name][i]))
        vals = []
        for sgn in (1, -1):
            x = base[name].copy()
            x[i] += sgn * eps
            st = replace(state0, **{name: x})
            vals.append(simulate_under_pa(setup, claim, npaths, seed, t0, st, threads).sample)
        per_path.append((vals[0] - vals[1]) / (2 * eps))
    g = np.stack(per_path, axis=1)
    d, m = b0.S.shape[1], b0.Y.shape[1]
    sig, sb, _ = setup.model.market.coefficients(t0, b0.S, b0.Y)
    Sig = setup.cov.at(t0)
    P = g.shape[0]
    gS, gY, gz = g[:, :d], g[:, d : d + m], g[:, d + m :]
    samples = bmtv(np.broadcast_to(sig, (P,) + sig.shape[1:]), gS) + mv(Sig[:d], gz)
    if m:
        samples = samples + bmtv(np.broadcast_to(sb, (P,) + sb.shape[1:]), gY)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(P)
    return mean, se


def post_event_batch(model: Model, batch: StateBatch, k: int) -> StateBatch:
    """State just after an event on channel ``k``: counts, queues and filter updated."""
    from .chain_filter import channel_rates

    ch = model.channels[k]
    lam = channel_rates(model.channels, batch.t, batch.snapshot(), model.chain.N)[:, k, :]
    x = batch.xhat * lam
    x = x / x.sum(axis=1, keepdims=True)
    counts = batch.counts.copy()
    counts[:, k] += 1
    Q = batch.Q.copy()
    eff = ch.effect
    if eff.kind == "inflow":
        Q[:, eff.fund] += 1
    elif eff.kind == "outflow":
        Q[:, eff.fund] -= 1
    elif eff.kind == "transfer":
        Q[:, eff.fund] -= 1
        Q[:, eff.to] += 1
    return StateBatch(batch.t, batch.S, batch.Y, batch.zhat, x, counts, Q)


def estimate_event_sensitivities(source, setup: Setup, batch: StateBatch) -> np.ndarray:
    """``J1`` per channel, shape ``(P, K)``; zero where the channel is gated off."""
    from .chain_filter import channel_gates

    if isinstance(source, LsmSurface):
        if not source.fitted:
            raise SurfaceNotFitted("J1 needs a fitted V1 surface")
        source = SurfaceV1(source)
    model = setup.model
    base = source.value(setup, batch)
    gates = channel_gates(model.channels, batch.Q)
    out = np.zeros((batch.P, model.K))
    for k in range(model.K):
        if not gates[:, k].any():
            continue
        sel = np.nonzero(gates[:, k])[0]
        post = post_event_batch(model, batch.take(sel), k)
        out[sel, k] = source.value(setup, post) - base[sel]
    return out


def estimate_event_sensitivity_mc(
    setup: Setup, claim: ClaimSpec, state0: InitialState, channel: int, npaths: int, seed: int,
    t0: float = 0.0, threads: int = 1,
):
    """Direct two-run ``J1`` for one channel with common random numbers; returns ``(J1, se)``."""
    from .chain_filter import channel_gates

    b0 = _batch_from_init(setup, t0, state0)
    if not channel_gates(setup.model.channels, b0.Q)[0, channel]:
        return 0.0, 0.0
    post = post_event_batch(setup.model, b0, channel)
    st1 = replace(state0, q=post.xhat[0], counts=post.counts[0], Q=post.Q[0])
    a = simulate_under_pa(setup, claim, npaths, seed, t0, state0, threads).sample
    b = simulate_under_pa(setup, claim, npaths, seed, t0, st1, threads).sample
    return mean_se(b - a)


# --------------------------------------------------------------- control


def optimal_control(setup: Setup, t: float, wealth: np.ndarray, batch: StateBatch,
                    V1: np.ndarray, Z1: np.ndarray) -> np.ndarray:
    """``pi*`` for every path in ``batch``, shape ``(P, d)``."""
    d = setup.d
    th = batch.zhat[:, :d]
    V2 = setup.v2(t, batch.zhat)
    Z2 = riccati.z2(setup.ric, setup.cov, t, batch.zhat)
    W = np.asarray(wealth, float)[:, None]
    inner = (Z1 + V1[:, None] * th) - W * (Z2 + V2[:, None] * th)
    inner = inner / V2[:, None]
    sig, _, _ = setup.model.market.coefficients(t, batch.S, batch.Y)
    return bsolve(np.transpose(sig, (0, 2, 1)), inner)


@dataclass
class HedgePolicy:
    """Everything needed to trade ``pi*`` and to evaluate ``V(t, W)`` along a path."""

    setup: Setup
    claim: ClaimSpec
    v1: object
    v0: Optional[object] = None
    anchor: Optional[object] = None

    def control(self, batch: StateBatch, wealth) -> np.ndarray:
        V1 = self.v1.value(self.setup, batch)
        Z1 = self.v1.z1(self.setup, batch)
        return optimal_control(self.setup, batch.t, wealth, batch, V1, Z1)

    def value(self, batch: StateBatch, wealth) -> Optional[np.ndarray]:
        """``V(t, W)``; at the anchor time the anchor's direct estimates replace the surfaces."""
        W = np.asarray(wealth, float)
        V2 = self.setup.v2(batch.t, batch.zhat)
        a = self.anchor
        if a is not None and abs(batch.t - a.t) < 1e-12:
            return W * W * V2 - 2 * W * a.V1 + a.V0
        if self.v0 is None:
            return None
        V1 = self.v1.value(self.setup, batch)
        V0 = self.v0.value(self.setup, batch)
        return W * W * V2 - 2 * W * V1 + V0


# -------------------------------------------------------------- backtest


class _BacktestHooks(Hooks):
    def __init__(self, policy: HedgePolicy, count: int, nsteps: int, w0, scale: float, zero: bool):
        self.policy = policy
        self.W = np.broadcast_to(np.asarray(w0, float), (count,)).copy()
        self.scale = scale
        self.zero = zero
        self.pi = None
        self.V = np.full((count, nsteps + 1), np.nan)
        self.pi2 = np.zeros(count)
        self.nsteps = nsteps
        self.H = None

    def start(self, k, t, st):
        batch = StateBatch.from_state(st)
        d = self.policy.setup.d
        if self.zero:
            self.pi = np.zeros((st.P, d))
        else:
            self.pi = self.scale * self.policy.control(batch, self.W)
        v = self.policy.value(batch, self.W)
        if v is not None:
            self.V[:, k] = v
        mom = cash_moments(self.policy.setup.model, self.policy.claim, t, st.snapshot(), st.xhat)
        self.W += mom.running * self.policy.setup.step
        self.pi2 += rowdot(self.pi, self.pi) * self.policy.setup.step

    def event(self, k, idx, ch, tau, marks, snap, st):
        self.W[idx] += realized_cash(self.policy.setup.model, self.policy.claim, tau, ch, snap, marks)

    def end(self, k, t_next, st, dS, dY):
        self.W += rowdot(self.pi, dS)
        if k == self.nsteps - 1:
            self.H = np.asarray(self.policy.claim.payoff(st.snapshot()), float) * np.ones(st.P)
            self.V[:, k + 1] = (self.W - self.H) ** 2


@dataclass
class HedgeReport:
    w0: float
    terminal_error: np.ndarray
    mse: float
    mse_se: float
    value0: Optional[float]
    drift_mean: Optional[float]
    drift_se: Optional[float]
    drift_per_step: Optional[np.ndarray]
    pi_second_moment: float
    times: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def drift_z(self) -> Optional[float]:
        if self.drift_mean is None or not self.drift_se:
            return None
        return self.drift_mean / self.drift_se

    def summary(self) -> dict:
        out = {
            "w0": self.w0,
            "npaths": int(self.terminal_error.shape[0]),
            "mean_terminal_error": float(np.mean(self.terminal_error)),
            "std_terminal_error": float(np.std(self.terminal_error, ddof=1)),
            "realized_mse": self.mse,
            "realized_mse_se": self.mse_se,
            "value_at_start": self.value0,
            "drift_mean_per_step": self.drift_mean,
            "drift_se": self.drift_se,
            "pi_second_moment": self.pi_second_moment,
        }
        out.update(self.extras)
        return out

    def write(self, json_path, paths_csv, drift_csv=None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(paths_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "terminal_error"])
            for i, e in enumerate(self.terminal_error):
                w.writerow([i, repr(float(e))])
        if drift_csv is not None and self.drift_per_step is not None:
            with open(drift_csv, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["t", "mean_increment"])
                for t, v in zip(self.times[:-1], self.drift_per_step):
                    w.writerow([repr(float(t)), repr(float(v))])


def backtest(
    policy: HedgePolicy,
    npaths: int,
    seed: int,
    w0: Optional[float] = None,
    threads: int = 1,
    scale: float = 1.0,
    zero_strategy: bool = False,
) -> HedgeReport:
    """Trade ``scale * pi*`` on full-information paths with online filters.

    Wealth follows ``dW = pi^T dS + kappa Q dt + event cash``. When the
    policy can value ``V(0, w0)`` (a ``V0`` source or an anchor), the mean
    per-step increment of ``V(t, W_t)`` is reported with a standard error
    built from per-path sums, since one path's increments are correlated in
    size. An anchor's own standard error is added in quadrature.
    """
    setup = policy.setup
    spec = RunSpec(setup.model, setup.horizon, setup.step, seed, mode="truth", cov=setup.cov, filters=True)
    n = spec.nsteps
    if w0 is None:
        b0 = _batch_from_init(setup, 0.0, initial_state(setup))
        v1 = policy.anchor.V1 if policy.anchor is not None else policy.v1.value(setup, b0)[0]
        w0 = float(v1 / setup.v2(0.0, b0.zhat)[0])
    _, hooks, _ = run(spec, npaths, threads=threads,
                      hooks_factory=lambda off, cnt: _BacktestHooks(policy, cnt, n, w0, scale, zero_strategy))
    W = np.concatenate([h.W for h in hooks])
    H = np.concatenate([h.H for h in hooks])
    V = np.concatenate([h.V for h in hooks])
    pi2 = np.concatenate([h.pi2 for h in hooks])
    err = H - W
    mse, mse_se = mean_se(err**2)
    value0 = drift = drift_se = per_step = None
    extras = {}
    if not np.isnan(V[:, 0]).any():
        value0 = float(V[0, 0])
        # the sum of one path's increments telescopes to V(T) - V(0)
        per_path = (V[:, -1] - V[:, 0]) / n
        drift, drift_se = mean_se(per_path)
        a = policy.anchor
        if a is not None:
            anchor_se = a.minimum_se
            if anchor_se is None:
                anchor_se = float(np.hypot(2 * w0 * a.V1_se, a.V0_se))
            extras = {"drift_se_paths": drift_se, "value_at_start_se": anchor_se}
            drift_se = float(np.hypot(drift_se, anchor_se / n))
        if not np.isnan(V).any():
            per_step = np.diff(V, axis=1).mean(axis=0)
    return HedgeReport(float(w0), err, mse, mse_se, value0, drift, drift_se, per_step, float(np.mean(pi2)),
                       spec.times, extras)
