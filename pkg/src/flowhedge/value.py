"""Regression surfaces for ``V1``, the plain expectation ``V0`` and the assembled quadratic.

``V0`` is the ``P``-expectation of

    H^2 + int g ds,
    g = -|Z1 + V1 theta^|^2 / V2 - 2 (running cash) V1
        + sum_k lam^_k [ V2 E c_k^2 - 2 (J1_k + V1) E c_k ],

with ``c_k`` the signed cash paid at an event of channel ``k``. ``V1``, ``Z1``
and ``J1`` are read from a fitted surface along each path.

The same quantity also equals ``V1^2 / V2 + E int k ds`` with the nonnegative

    k = ( |Gamma1 - r Gamma2|^2 + sum_k lam^_k E (c_k V2 - J1_k)^2 ) / V2,
    r = V1 / V2,

where ``Gamma`` are loadings on the non-traded innovation. ``Z1`` drops out,
so a surface-gradient error in the traded direction does not bias this
form; it is the default inside ``value_quadratic``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import riccati
from .claims import ClaimSpec, cash_moments, check_claim
from ._linalg import rowdot
from .engine import EngineState, Hooks, InitialState, RunSpec, run
from .hedge import (
    PAEnsemble,
    Setup,
    SquareRatio,
    SurfaceV1,
    estimate_event_sensitivities,
    initial_state,
    innovation_loading,
    jittered_state,
    mean_se,
    simulate_under_pa,
)
from .lsm import Basis, LsmSurface, StateBatch, fit_slices

PILOT_SEED_SHIFT = 7919


def fit_surface(pa: PAEnsemble, basis: Basis = Basis()) -> LsmSurface:
    """Regress the realized discounted future values of a recorded ``PA`` ensemble."""
    ens = pa.ens
    if ens is None:
        raise ValueError("the ensemble must be recorded to fit a surface")
    K = pa.rate.shape[1]
    batches = [StateBatch.from_ensemble(ens, k) for k in range(K)]
    spec = ens.spec
    return fit_slices(basis, batches, pa.backward_targets(), spec.ric, spec.model.market.d, spec.model.market.m)


def fit_v1_surface(setup: Setup, claim: ClaimSpec, npaths: int, seed: int, basis: Basis = Basis(),
                   jitter: float = 0.1, threads: int = 1, pilot_paths: Optional[int] = None) -> LsmSurface:
    """Simulate a jittered ``PA`` training ensemble from time 0 and fit ``V1``.

    With ``pilot_paths > 0`` a first surface is fitted on an independent
    pilot ensemble; its gradients define innovation control variates that
    are subtracted from the main ensemble's regression targets. This leaves
    the conditional expectations unchanged and removes most of the target
    noise, which matters because ``Z1`` is read from the fitted gradient.
    """
    pilot_paths = max(npaths // 4, 1) if pilot_paths is None else pilot_paths
    control = None
    if pilot_paths > 0:
        pseed = seed + PILOT_SEED_SHIFT
        init = jittered_state(setup, pilot_paths, pseed, jitter) if jitter > 0 else initial_state(setup)
        pilot = simulate_under_pa(setup, claim, pilot_paths, pseed, 0.0, init, threads, record=True)
        control = SurfaceV1(fit_surface(pilot, basis))
    init = jittered_state(setup, npaths, seed, jitter) if jitter > 0 else initial_state(setup)
    pa = simulate_under_pa(setup, claim, npaths, seed, 0.0, init, threads, record=True, control=control)
    return fit_surface(pa, basis)


def v0_rate(setup: Setup, claim: ClaimSpec, v1, batch: StateBatch) -> np.ndarray:
    """The integrand ``g`` above at every state of ``batch``."""
    d = setup.d
    V2 = setup.v2(batch.t, batch.zhat)
    V1 = v1.value(setup, batch)
    Z1 = v1.z1(setup, batch)
    a = Z1 + V1[:, None] * batch.zhat[:, :d]
    mom = cash_moments(setup.model, claim, batch.t, batch.snapshot(), batch.xhat)
    g = -(a * a).sum(axis=1) / V2 - 2 * mom.running * V1
    if claim.event_cash:
        J = estimate_event_sensitivities(v1, setup, batch)
        g += (mom.lam_hat * (V2[:, None] * mom.second - 2 * (J + V1[:, None]) * mom.mean)).sum(axis=1)
    return g


def residual_rate(setup: Setup, claim: ClaimSpec, v1, batch: StateBatch) -> np.ndarray:
    """The nonnegative integrand ``k`` above at every state of ``batch``."""
    d = setup.d
    V2 = setup.v2(batch.t, batch.zhat)
    V1 = v1.value(setup, batch)
    r = V1 / V2
    k = np.zeros(batch.P)
    if setup.model.market.m:
        G1 = innovation_loading(setup, batch, *v1.gradient(setup, batch))[:, d:]
        G2 = V2[:, None] * riccati.z_l(setup.ric, setup.cov, batch.t, batch.zhat)[1]
        u = G1 - r[:, None] * G2
        k += (u * u).sum(axis=1)
    if setup.model.K:
        mom = cash_moments(setup.model, claim, batch.t, batch.snapshot(), batch.xhat)
        J = estimate_event_sensitivities(v1, setup, batch)
        V2c = V2[:, None]
        k += (mom.lam_hat * (V2c * V2c * mom.second - 2 * V2c * J * mom.mean + J * J)).sum(axis=1)
    return k / V2


V0_METHODS = ("direct", "residual")


class _V0Hooks(Hooks):
    def __init__(self, setup, claim, v1, count, nsteps, keep, control=None, method="direct"):
        self.setup, self.claim, self.v1 = setup, claim, v1
        self.rate = v0_rate if method == "direct" else residual_rate
        self.terminal = method == "direct"
        self.acc = np.zeros(count)
        self.control = control
        self.cv = np.zeros(count)
        self.load = None
        self.jump = None
        self.g = np.empty((count, nsteps)) if keep else None
        self.nsteps = nsteps
        self.payoff2 = None
        self.g_prev = self.g_last = None

    def start(self, k, t, st: EngineState):
        batch = StateBatch.from_state(st)
        g = self.rate(self.setup, self.claim, self.v1, batch)
        self.acc += (0.5 if k == 0 else 1.0) * g * self.setup.step
        if self.g is not None:
            self.g[:, k] = g
        # keep the last two values to extrapolate g to the horizon
        self.g_prev, self.g_last = (self.g_last if k else g), g
        if self.control is not None:
            self.load = innovation_loading(self.setup, batch, *self.control.gradient(self.setup, batch))
            if self.setup.model.K:
                self.jump = estimate_event_sensitivities(self.control, self.setup, batch)
                lam = cash_moments(self.setup.model, self.claim, t, batch.snapshot(), batch.xhat).lam_hat
                self.cv -= 0.5 * self.setup.step * (lam * self.jump).sum(axis=1)

    def event(self, k, idx, ch, tau, marks, snap, st):
        # jump part of the control: predictable jump sizes frozen at the step start
        if self.jump is not None:
            self.cv[idx] += self.jump[idx, ch]

    def end(self, k, t_next, st, dS, dY):
        if self.load is not None:
            self.cv += rowdot(self.load, st.innov)
        if self.jump is not None:
            lam = cash_moments(self.setup.model, self.claim, t_next, st.snapshot(), st.xhat).lam_hat
            self.cv -= 0.5 * self.setup.step * (lam * self.jump).sum(axis=1)
        if k == self.nsteps - 1:
            H = np.asarray(self.claim.payoff(st.snapshot()), float) * np.ones(st.P)
            self.payoff2 = H * H if self.terminal else np.zeros(st.P)
            self.acc += self.payoff2 + 0.5 * _extrapolate(self.g_prev, self.g_last, k) * self.setup.step


def _extrapolate(g_prev, g_last, k):
    """Linear extrapolation of the integrand one step past the last slice."""
    return g_last if k == 0 else 2 * g_last - g_prev


@dataclass
class V0Run:
    """``P``-paths with per-path samples of ``H^2 + int g ds``.

    The time integral uses the trapezoid rule; ``g`` at the horizon is
    extrapolated linearly from the last two slices.
    """

    t0: float
    step: float
    sample: np.ndarray
    payoff2: np.ndarray
    g: Optional[np.ndarray] = None
    ens: Optional[object] = None
    control: Optional[np.ndarray] = None

    @property
    def adjusted(self) -> np.ndarray:
        return self.sample if self.control is None else self.sample - self.control

    def backward_targets(self) -> list:
        K = self.g.shape[1]
        gK = _extrapolate(self.g[:, K - 2] if K > 1 else None, self.g[:, K - 1], K - 1)
        g = np.concatenate([self.g, gK[:, None]], axis=1)
        y = self.payoff2.copy()
        out = [None] * K
        for k in range(K - 1, -1, -1):
            y = y + 0.5 * (g[:, k] + g[:, k + 1]) * self.step
            out[k] = y
        return out


def simulate_v0(setup: Setup, claim: ClaimSpec, v1, npaths: int, seed: int, t0: float = 0.0,
                state0: Optional[InitialState] = None, threads: int = 1, record: bool = False,
                control=None, method: str = "direct") -> V0Run:
    """``P``-paths carrying samples of ``H^2 + int g ds``.

    With ``method="residual"`` the samples are ``int k ds`` instead.

    ``control`` (anything with ``value`` and ``gradient``) adds an innovation
    integral of its gradient loadings plus its compensated event jumps to
    ``V0Run.control``; ``SquareRatio(v1)`` is a good choice. The event
    compensator uses the trapezoid rule for the filtered intensity, so its
    mean is zero up to a second-order time-step error.
    """
    check_claim(setup.model, claim)
    if method not in V0_METHODS:
        raise ValueError(f"unknown V0 method {method!r}; expected one of {V0_METHODS}")
    if isinstance(v1, LsmSurface):
        v1 = SurfaceV1(v1)
    spec = RunSpec(setup.model, setup.horizon, setup.step, seed, mode="observer", measure="P",
                   cov=setup.cov, t0=t0, init=state0 or initial_state(setup), record=record)
    n = spec.nsteps
    _, hooks, ens = run(spec, npaths, threads=threads,
                        hooks_factory=lambda off, cnt: _V0Hooks(setup, claim, v1, cnt, n, record, control, method))
    cat = lambda name: np.concatenate([getattr(h, name) for h in hooks])  # noqa: E731
    return V0Run(t0, setup.step, cat("acc"), cat("payoff2"), cat("g") if record else None, ens,
                 cat("cv") if control is not None else None)


def estimate_v0(setup: Setup, claim: ClaimSpec, v1, npaths: int, seed: int, t0: float = 0.0,
                state0: Optional[InitialState] = None, threads: int = 1, variance_reduction: bool = True,
                method: str = "direct", v1_start: Optional[tuple] = None):
    """Return ``(V0, standard error)`` at the evaluation state.

    ``method="residual"`` adds ``V1^2 / V2`` at the start to the mean of
    ``int k ds``. ``V1`` there is ``v1_start = (value, se)`` if given and a
    fresh ``PA`` estimate on the same seed otherwise; the state must then be
    a single point rather than per-path arrays.
    """
    if isinstance(v1, LsmSurface):
        v1 = SurfaceV1(v1)
    if method == "direct":
        control = SquareRatio(v1) if variance_reduction else None
        r = simulate_v0(setup, claim, v1, npaths, seed, t0, state0, threads, control=control)
        return mean_se(r.adjusted)
    state0 = state0 or initial_state(setup)
    r = simulate_v0(setup, claim, v1, npaths, seed, t0, state0, threads, method=method)
    j, j_se = mean_se(r.sample)
    if v1_start is None:
        control = v1 if variance_reduction and hasattr(v1, "gradient") else None
        pa = simulate_under_pa(setup, claim, npaths, seed, t0, state0, threads, control=control)
        v1_start = mean_se(pa.adjusted)
    zhat = setup.model.premium.z0 if state0.zhat is None else state0.zhat
    zhat = np.asarray(zhat, float)
    if zhat.ndim != 1:
        raise ValueError("the residual form needs a single starting state")
    V2 = float(setup.v2(t0, zhat))
    v, v_se = v1_start
    return v * v / V2 + j, float(np.hypot(2 * v * v_se / V2, j_se))


def fit_v0_surface(setup: Setup, claim: ClaimSpec, v1, npaths: int, seed: int, basis: Basis = Basis(),
                   jitter: float = 0.1, threads: int = 1) -> LsmSurface:
    init = jittered_state(setup, npaths, seed, jitter) if jitter > 0 else initial_state(setup)
    r = simulate_v0(setup, claim, v1, npaths, seed, 0.0, init, threads, record=True)
    K = r.g.shape[1]
    batches = [StateBatch.from_ensemble(r.ens, k) for k in range(K)]
    mk = setup.model.market
    return fit_slices(basis, batches, r.backward_targets(), setup.ric, mk.d, mk.m)


@dataclass
class SurfaceValue:
    """Value-only wrapper of a fitted surface (used for ``V0``)."""

    surface: LsmSurface

    def value(self, setup, batch):
        return self.surface.value(batch)


# ------------------------------------------------------------- assembly


@dataclass
class ValueQuadratic:
    t: float
    V2: float
    V1: float
    V0: float
    V1_se: float = 0.0
    V0_se: float = 0.0
    minimum_se: Optional[float] = None

    @property
    def w_star(self) -> float:
        return self.V1 / self.V2

    @property
    def minimum(self) -> float:
        return self.V0 - self.V1**2 / self.V2

    def __call__(self, w):
        return assemble(self.V2, self.V1, self.V0, self.t, w)[0]


def assemble(v2: float, v1: float, v0: float, t: float, w):
    """``V(t, w) = w^2 V2 - 2 w V1 + V0`` with its minimizer and minimum."""
    if not v2 > 0:
        raise ValueError("V2 must be positive")
    w = np.asarray(w, float)
    V = w * w * v2 - 2 * w * v1 + v0
    return (float(V) if V.ndim == 0 else V), v1 / v2, v0 - v1 * v1 / v2


def value_quadratic(setup: Setup, claim: ClaimSpec, npaths: int, seed: int, train_paths: Optional[int] = None,
                    basis: Basis = Basis(), threads: int = 1, surface: Optional[LsmSurface] = None,
                    variance_reduction: bool = True, method: str = "residual") -> ValueQuadratic:
    """``(V2, V1, V0)`` at time 0 from the model's initial state.

    A ``V1`` surface is trained on a separate jittered ensemble
    (``train_paths``, default ``npaths``); ``V1`` and ``V0`` are then direct
    Monte Carlo estimates that use the surface for the loadings, ``J1`` and
    the control variates. ``method`` picks the ``V0`` representation.
    """
    st0 = initial_state(setup)
    V2 = float(setup.v2(0.0, np.asarray(setup.model.premium.z0, float)))
    if surface is None:
        surface = fit_v1_surface(setup, claim, train_paths or npaths, seed + 1, basis, threads=threads)
    src = SurfaceV1(surface)
    pa = simulate_under_pa(setup, claim, npaths, seed, threads=threads,
                           control=src if variance_reduction else None)
    v1, v1_se = mean_se(pa.adjusted)
    if method == "residual":
        r = simulate_v0(setup, claim, src, npaths, seed + 2, 0.0, st0, threads, method=method)
        j, j_se = mean_se(r.sample)
        return ValueQuadratic(0.0, V2, v1, v1 * v1 / V2 + j, v1_se, float(np.hypot(2 * v1 * v1_se / V2, j_se)), j_se)
    v0, v0_se = estimate_v0(setup, claim, src, npaths, seed + 2, state0=st0, threads=threads,
                            variance_reduction=variance_reduction, method=method)
    return ValueQuadratic(0.0, V2, v1, v0, v1_se, v0_se)


# ------------------------------------------------------ policy comparison


@dataclass
class PolicyComparison:
    names: list
    V2: float
    quadratics: list
    w_grid: np.ndarray
    curves: np.ndarray
    dominance: dict
    crossings: dict
    extras: dict = field(default_factory=dict)

    def table(self) -> list:
        rows = []
        for name, q in zip(self.names, self.quadratics):
            rows.append({"policy": name, "V1": q.V1, "V1_se": q.V1_se, "V0": q.V0, "V0_se": q.V0_se,
                         "w_star": q.w_star, "min_value": q.minimum})
        return sorted(rows, key=lambda r: r["min_value"])

    def write(self, json_path, table_csv, curves_csv=None) -> None:
        rep = {"V2": self.V2, "ranking": self.table(),
               "dominance": {f"{a}<{b}": v for (a, b), v in sorted(self.dominance.items())},
               "crossings": {f"{a}|{b}": v for (a, b), v in sorted(self.crossings.items())}}
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(rep, fh, indent=2, sort_keys=True)
            fh.write("\n")
        cols = ["policy", "V1", "V1_se", "V0", "V0_se", "w_star", "min_value"]
        with open(table_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.table():
                w.writerow([r["policy"]] + [repr(float(r[c])) for c in cols[1:]])
        if curves_csv is not None:
            write_curves(curves_csv, self.names, self.w_grid, self.curves)


def write_curves(path, names: Sequence[str], w_grid, curves) -> None:
    """Columns ``w, V_<name>...``; one row per grid point."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["w"] + [f"V_{n}" for n in names])
        for i, x in enumerate(w_grid):
            w.writerow([repr(float(x))] + [repr(float(c[i])) for c in curves])


def compare_policies(
    setup: Setup,
    policies: Sequence[tuple],
    w_grid,
    npaths: int,
    seed: int,
    train_paths: Optional[int] = None,
    basis: Basis = Basis(),
    threads: int = 1,
) -> PolicyComparison:
    """Rank cash-flow policies sharing a claim by their value-function quadratics.

    ``policies`` is a list of ``(name, ClaimSpec)``. Every policy is valued
    with the same seeds so that differences are paired. Policy ``b``
    dominates ``a`` at ``w`` when ``V_b(w) < V_a(w)`` by more than three
    standard errors of the paired difference.
    """
    if not policies:
        raise ValueError("need at least one policy")
    names = [p[0] for p in policies]
    w_grid = np.asarray(w_grid, float)
    st0 = initial_state(setup)
    z0 = np.asarray(setup.model.premium.z0, float)
    V2 = float(setup.v2(0.0, z0))
    s1, s0, quads = [], [], []
    for name, claim in policies:
        surf = SurfaceV1(fit_v1_surface(setup, claim, train_paths or npaths, seed + 1, basis, threads=threads))
        x1 = simulate_under_pa(setup, claim, npaths, seed, threads=threads, control=surf).adjusted
        k = simulate_v0(setup, claim, surf, npaths, seed + 2, 0.0, st0, threads, method="residual").sample
        v1, v1se = mean_se(x1)
        # linearized per-path V0 samples: the mean is V1^2 / V2 + E int k, and
        # index-wise pairing across policies keeps the common random numbers
        x0 = 2 * v1 / V2 * x1 - v1 * v1 / V2 + k
        s1.append(x1)
        s0.append(x0)
        v0, v0se = mean_se(x0)
        quads.append(ValueQuadratic(0.0, V2, v1, v0, v1se, v0se, mean_se(k)[1]))
    curves = np.array([assemble(V2, q.V1, q.V0, 0.0, w_grid)[0] for q in quads])
    dominance, crossings = {}, {}
    for i in range(len(names)):
        for j in range(len(names)):
            if i == j:
                continue
            d1 = s1[j] - s1[i]
            d0 = s0[j] - s0[i]
            m1, e1 = mean_se(d1)
            m0, e0 = mean_se(d0)
            diff = -2 * w_grid * m1 + m0
            se = np.sqrt((2 * w_grid * e1) ** 2 + e0**2)
            dominance[(names[j], names[i])] = [bool(x) for x in (diff < -3 * se) & (se >= 0)]
            if i < j:
                cross = []
                if m1 != 0.0:
                    wc = m0 / (2 * m1)
                    if w_grid.min() <= wc <= w_grid.max():
                        cross.append(float(wc))
                crossings[(names[i], names[j])] = cross
    return PolicyComparison(names, V2, quads, w_grid, curves, dominance, crossings)
