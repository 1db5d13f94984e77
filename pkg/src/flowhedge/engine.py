"""Vectorized path engine shared by every simulation in the package.

One engine covers three uses:

* ``truth``: the hidden premium ``z`` and chain state ``x`` are drawn
  explicitly; optionally the observer's filters run online alongside.
* ``observer`` under ``P``: only observables and filters are simulated; the
  diffusions are driven by the innovations and events arrive at the
  filtered intensities.
* ``observer`` under ``PA``: as above but with the drift change that turns
  the linear part of the value function into a discounted expectation; the
  log-discount ``int eta ds`` is accumulated per path.

A grid step first advances the diffusions by one Euler step. Events in the
step are then placed at exact times by thinning against a per-channel bound,
with the diffusion state linearly interpolated at candidate times. In truth
mode chain jumps are exact with the generator frozen at the left grid point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from . import riccati as ric_mod
from ._linalg import bmtv, bmv, bsolve, mv, rowdot
from .chain_filter import channel_gates, channel_rates, evolve_q, no_event_decay, renormalize
from .errors import IntensityBoundViolated
from .kalman import CovarianceSolution, grid_steps
from .market import EventTable, Model, ObservedPath, Snapshot, TruthPath, separate_ties
from .riccati import RiccatiSolution
from .rng import INIT_STEP, PathStreams, map_paths

BOUND_TOL = 1e-12


@dataclass
class EngineState:
    """Per-path state of a batch of ``P`` paths at the current time."""

    t: float
    S: np.ndarray
    Y: np.ndarray
    counts: np.ndarray
    Q: np.ndarray
    z: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    zhat: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    log_scale: Optional[np.ndarray] = None
    log_disc: Optional[np.ndarray] = None
    innov: Optional[np.ndarray] = None

    @property
    def P(self) -> int:
        return self.S.shape[0]

    @property
    def xhat(self) -> Optional[np.ndarray]:
        if self.q is None:
            return None
        return self.q / self.q.sum(axis=1, keepdims=True)

    def snapshot(self) -> Snapshot:
        return Snapshot(self.S, self.Y, self.counts, self.Q)


@dataclass
class InitialState:
    """Starting point of a simulation; arrays are per path or broadcast from one state.

    Missing fields default to the model's time-0 values. ``q`` is the
    (unnormalized) chain filter and ``zhat`` the premium filter mean.
    """

    S: Any = None
    Y: Any = None
    zhat: Any = None
    q: Any = None
    counts: Any = None
    Q: Any = None


@dataclass
class RunSpec:
    model: Model
    horizon: float
    step: float
    seed: int
    mode: str = "truth"
    measure: str = "P"
    cov: Optional[CovarianceSolution] = None
    ric: Optional[RiccatiSolution] = None
    filters: bool = False
    t0: float = 0.0
    init: Optional[InitialState] = None
    strict: bool = True
    record: bool = False

    def __post_init__(self):
        if self.mode not in ("truth", "observer"):
            raise ValueError("mode must be 'truth' or 'observer'")
        if self.measure not in ("P", "PA"):
            raise ValueError("measure must be 'P' or 'PA'")
        if self.mode == "observer" and self.cov is None:
            raise ValueError("observer mode needs the covariance solution")
        if self.measure == "PA" and (self.ric is None or self.mode != "observer"):
            raise ValueError("the PA measure needs observer mode and a Riccati solution")
        if self.filters and self.cov is None:
            raise ValueError("online filters need the covariance solution")

    @property
    def nsteps(self) -> int:
        return grid_steps(self.horizon - self.t0, self.step)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.nsteps + 1)

    @property
    def has_filters(self) -> bool:
        return self.mode == "observer" or self.filters


class Hooks:
    """Callbacks invoked by the engine; subclasses override what they need.

    ``event`` is called before the event's queue, count and filter effects
    are applied; ``snap`` is the pre-event observable state of the firing
    paths at their event times.
    """

    def start(self, k: int, t: float, st: EngineState) -> None:
        pass

    def event(self, k, idx, ch, tau, marks, snap: Snapshot, st: EngineState) -> None:
        pass

    def end(self, k: int, t_next: float, st: EngineState, dS: np.ndarray, dY: np.ndarray) -> None:
        pass


# ------------------------------------------------------------------ helpers


def _broadcast(x, P, shape, default, dtype=float, start=0):
    """One state for all paths, or rows ``start:start+P`` of a per-path array."""
    a = np.asarray(default if x is None else x, dtype=dtype)
    if a.shape == shape:
        return np.broadcast_to(a, (P,) + shape).copy()
    if a.size == 0:
        return np.zeros((P,) + shape, dtype)
    a = a.reshape((-1,) + shape)
    if a.shape[0] < start + P:
        raise ValueError(f"initial state has {a.shape[0]} rows, need {start + P}")
    return a[start : start + P].copy()


def _rates_max(channels, t, snapA: Snapshot, snapB: Snapshot, N: int) -> np.ndarray:
    """Per-channel max over states and over both segment endpoints, shape ``(P, K)``."""
    a = channel_rates(channels, t, snapA, N).max(axis=2)
    b = channel_rates(channels, t, snapB, N).max(axis=2)
    return np.maximum(a, b)


def _interp_snapshot(st_S0, st_S1, Y0, Y1, w, counts, Q) -> Snapshot:
    ww = w[:, None]
    return Snapshot(st_S0 + ww * (st_S1 - st_S0), Y0 + ww * (Y1 - Y0), counts, Q)


# ------------------------------------------------------------------- chunks


@dataclass
class _Recorder:
    nT: int
    P: int
    spec: RunSpec
    S: np.ndarray = None
    Y: np.ndarray = None
    Q: np.ndarray = None
    counts: np.ndarray = None
    z: np.ndarray = None
    x: np.ndarray = None
    zhat: np.ndarray = None
    xhat: np.ndarray = None
    log_disc: np.ndarray = None
    dW: np.ndarray = None
    dB: np.ndarray = None
    dV: np.ndarray = None
    ev: list = field(default_factory=list)
    jumps: list = field(default_factory=list)

    def setup(self, st: EngineState, d, m, p):
        T, P = self.nT, self.P
        self.S = np.empty((P, T, d))
        self.Y = np.empty((P, T, m))
        self.Q = np.empty((P, T, st.Q.shape[1]), dtype=np.int64)
        self.counts = np.empty((P, T, st.counts.shape[1]), dtype=np.int64)
        if st.z is not None:
            self.z = np.empty((P, T, st.z.shape[1]))
            self.x = np.empty((P, T), dtype=np.int64)
            self.dW = np.empty((P, T - 1, d))
            self.dB = np.empty((P, T - 1, m))
            self.dV = np.empty((P, T - 1, p))
        if st.zhat is not None:
            self.zhat = np.empty((P, T, st.zhat.shape[1]))
            self.xhat = np.empty((P, T, st.q.shape[1]))
        if st.log_disc is not None:
            self.log_disc = np.empty((P, T))

    def grid(self, i, st: EngineState):
        self.S[:, i] = st.S
        self.Y[:, i] = st.Y
        self.Q[:, i] = st.Q
        self.counts[:, i] = st.counts
        if self.z is not None:
            self.z[:, i] = st.z
            self.x[:, i] = st.x
        if self.zhat is not None:
            self.zhat[:, i] = st.zhat
            self.xhat[:, i] = st.xhat
        if self.log_disc is not None:
            self.log_disc[:, i] = st.log_disc


def _init_state(spec: RunSpec, streams: PathStreams, P: int, start: int = 0) -> EngineState:
    model = spec.model
    mk, rp, ch = model.market, model.premium, model.chain
    d, m, n = mk.d, mk.m, mk.n
    ini = spec.init or InitialState()
    S = _broadcast(ini.S, P, (d,), mk.s0, start=start)
    Y = _broadcast(ini.Y, P, (m,), mk.y0, start=start)
    counts = _broadcast(ini.counts, P, (model.K,), np.zeros(model.K, np.int64), np.int64, start)
    Q = _broadcast(ini.Q, P, (model.F,), np.array(model.q0, np.int64), np.int64, start)
    st = EngineState(spec.t0, S, Y, counts, Q)
    streams.seek(INIT_STEP)
    eps = streams.normal("init", n)
    u = streams.uniform("init")
    if spec.mode == "truth":
        L = np.linalg.cholesky(rp.Sigma0 + 1e-300 * np.eye(n)) if np.any(rp.Sigma0) else np.zeros((n, n))
        st.z = rp.z0[None] + mv(L, eps)
        cdf = np.cumsum(ch.x0_dist)
        st.x = np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), ch.N - 1).astype(np.int64)
    if spec.has_filters:
        st.zhat = _broadcast(ini.zhat, P, (n,), rp.z0, start=start)
        st.q = _broadcast(ini.q, P, (ch.N,), ch.x0_dist, start=start)
        st.log_scale = np.zeros(P)
    if spec.measure == "PA":
        st.log_disc = np.zeros(P)
    return st


def _observer_drift(spec: RunSpec, t: float, zh: np.ndarray):
    """Filter drift, driver drifts for ``(W, B)`` and the discount rate ``eta`` at ``(t, zh)``."""
    rp, d = spec.model.premium, spec.model.market.d
    mu, F, _ = rp.coefficients(t)
    th, al = zh[:, :d], zh[:, d:]
    if spec.measure == "P":
        return mu[None] - mv(F, zh), th, al, None
    Sig = spec.cov.at(t)
    a2, a1, _ = spec.ric.coeffs(t)
    ZL = mv(Sig[:d], a1[None] + mv(a2, zh))
    zdrift = mu[None] - mv(F, zh) - mv(Sig[:, :d], ZL + th)
    return zdrift, -ZL, al, rowdot(th, th) + rowdot(ZL, th)


def run_chunk(spec: RunSpec, offset: int, count: int, hooks: Optional[Hooks] = None, init_row: int = 0):
    """Simulate paths ``[offset, offset + count)`` of ``spec``; returns ``(state, recorder)``.

    ``init_row`` is the row of a per-path initial state that the first path uses.
    """
    model = spec.model
    mk, rp, chain = model.market, model.premium, model.chain
    channels = model.channels
    d, m, n, N, K = mk.d, mk.m, mk.n, chain.N, model.K
    hooks = hooks or Hooks()
    P = count
    streams = PathStreams(spec.seed, offset, P)
    st = _init_state(spec, streams, P, init_row)
    p = rp.coefficients(spec.t0)[2].shape[1]
    times = spec.times
    h = spec.step
    sqh = np.sqrt(h)
    rec = None
    if spec.record:
        rec = _Recorder(len(times), P, spec)
        rec.setup(st, d, m, p)
        rec.grid(0, st)
    eff_kind = [c.effect.kind for c in channels]
    marked = [c.mark is not None for c in channels]
    cov, ric = spec.cov, spec.ric

    for k in range(len(times) - 1):
        t, t1 = times[k], times[k + 1]
        streams.seek(k)
        hooks.start(k, t, st)
        sig, sb, rh = mk.coefficients(t, st.S, st.Y, check=spec.strict)

        # ---- diffusion step
        if spec.mode == "truth":
            g = streams.normal("diffusion", n + p) * sqh
            dW, dB, dV = g[:, :d], g[:, d:n], g[:, n:]
            mu, F, dl = rp.coefficients(t)
            drvW = dW + st.z[:, :d] * h
            drvB = dB + st.z[:, d:] * h
            dS = bmv(sig, drvW)
            dY = bmv(sb, drvW) + bmv(rh, drvB)
            z_next = st.z + (mu[None] - mv(F, st.z)) * h + mv(dl, dV)
            if spec.filters:
                dw_tilde = np.concatenate([drvW, drvB], axis=1)
                Sig = cov.at(t)
                zh = st.zhat
                zhat_next = zh + (mu[None] - mv(F, zh)) * h + mv(Sig, dw_tilde - zh * h)
            if rec is not None:
                rec.dW[:, k], rec.dB[:, k], rec.dV[:, k] = dW, dB, dV
        else:
            g = streams.normal("diffusion", n) * sqh
            # Heun (trapezoidal) step: the premium filter is linear with additive
            # noise, so this removes the O(h) weak bias of plain Euler.
            zh = st.zhat
            zd0, xw0, xb0, eta0 = _observer_drift(spec, t, zh)
            Sig_mid = cov.at(t + h / 2)
            noise = mv(Sig_mid, g)
            z_pred = zh + zd0 * h + noise
            zd1, _, _, _ = _observer_drift(spec, t1, z_pred)
            zhat_next = zh + 0.5 * (zd0 + zd1) * h + noise
            _, xw1, xb1, eta1 = _observer_drift(spec, t1, zhat_next)
            drvW = g[:, :d] + 0.5 * (xw0 + xw1) * h
            drvB = g[:, d:] + 0.5 * (xb0 + xb1) * h
            if spec.measure == "PA":
                st.log_disc = st.log_disc + 0.5 * (eta0 + eta1) * h
            st.innov = g
            dS = bmv(sig, drvW)
            dY = bmv(sb, drvW) + bmv(rh, drvB)
        S1 = st.S + dS
        Y1 = st.Y + dY

        # ---- events and chain jumps inside (t, t1]
        tau = np.full(P, t)
        active = np.ones(P, dtype=bool)
        snapA = Snapshot(st.S, st.Y, st.counts, st.Q)
        snapB = Snapshot(S1, Y1, st.counts, st.Q)
        lam0 = channel_rates(channels, t, snapA, N) if K else np.zeros((P, 0, N))
        if spec.strict and K and np.any(lam0 <= 0):
            raise ValueError(f"intensities must be strictly positive (t={t:.6g})")
        bound = _rates_max(channels, t, snapA, snapB, N) if K else np.zeros((P, 0))
        Btot = bound.sum(axis=1)
        R = chain.R(t) if spec.mode == "truth" else None
        Rf = chain.R(t) if spec.has_filters else None
        while np.any(active):
            Ee = streams.exponential("events")
            ue = streams.uniform("events", 2)
            um = streams.uniform("marks")
            with np.errstate(divide="ignore"):
                cand_e = np.where(Btot > 0, tau + Ee / np.where(Btot > 0, Btot, 1.0), np.inf)
            if spec.mode == "truth":
                Ec = streams.exponential("chain")
                uc = streams.uniform("chain")
                out_rate = -R[st.x, st.x]
                cand_c = np.where(out_rate > 0, tau + Ec / np.where(out_rate > 0, out_rate, 1.0), np.inf)
            else:
                cand_c = np.full(P, np.inf)
            nxt = np.minimum(np.minimum(cand_e, cand_c), t1)
            nxt = np.where(active, nxt, tau)
            if spec.has_filters:
                w0 = (tau - t) / h
                snap_tau = _interp_snapshot(st.S, S1, st.Y, Y1, w0, st.counts, st.Q)
                lam_tau = channel_rates(channels, tau, snap_tau, N) if K else np.zeros((P, 0, N))
                gates = channel_gates(channels, st.Q)
                st.q = evolve_q(st.q, Rf, no_event_decay(lam_tau, gates), nxt - tau)
            done = active & (nxt >= t1)
            is_jump = active & ~done & (cand_c <= cand_e)
            is_cand = active & ~done & ~is_jump
            if np.any(is_jump):
                j = np.nonzero(is_jump)[0]
                xs = st.x[j]
                probs = R[:, xs].T.copy()
                probs[np.arange(j.size), xs] = 0.0
                cdf = np.cumsum(probs, axis=1)
                pick = (uc[j] * cdf[:, -1])[:, None] < cdf
                st.x[j] = np.argmax(pick, axis=1)
                if rec is not None:
                    rec.jumps.append((j, nxt[j], st.x[j].copy()))
            if np.any(is_cand):
                c = np.nonzero(is_cand)[0]
                w = (nxt[c] - t) / h
                snap_c = _interp_snapshot(st.S[c], S1[c], st.Y[c], Y1[c], w, st.counts[c], st.Q[c])
                lam_c = channel_rates(channels, nxt[c], snap_c, N)
                bc = bound[c]
                cdf = np.cumsum(bc, axis=1)
                chs = np.argmax((ue[c, 0] * cdf[:, -1])[:, None] < cdf, axis=1)
                rows = np.arange(c.size)
                if np.any(lam_c.max(axis=2) > bc * (1 + BOUND_TOL)):
                    raise IntensityBoundViolated(
                        f"intensity exceeded its thinning bound in step starting at t={t:.6g}"
                    )
                if spec.mode == "truth":
                    lam_eff = lam_c[rows, chs, st.x[c]]
                else:
                    xh = st.q[c] / st.q[c].sum(axis=1, keepdims=True)
                    lam_eff = rowdot(lam_c[rows, chs], xh)
                gate_ok = channel_gates(channels, st.Q[c])[rows, chs]
                acc = gate_ok & (ue[c, 1] * bc[rows, chs] < lam_eff)
                if np.any(acc):
                    a = c[acc]
                    cha = chs[acc]
                    ta = nxt[a]
                    marks = np.full(a.size, np.nan)
                    for kk in np.unique(cha):
                        if marked[kk]:
                            sel = cha == kk
                            marks[sel] = channels[kk].mark.sample(ta[sel], um[a[sel]])
                    sub = Snapshot(snap_c.S[acc], snap_c.Y[acc], st.counts[a].copy(), st.Q[a].copy())
                    hooks.event(k, a, cha, ta, marks, sub, st)
                    if spec.has_filters:
                        st.q[a] = st.q[a] * lam_c[rows[acc], cha]
                    np.add.at(st.counts, (a, cha), 1)
                    for kk in np.unique(cha):
                        sel = a[cha == kk]
                        eff = channels[kk].effect
                        if eff_kind[kk] == "inflow":
                            st.Q[sel, eff.fund] += 1
                        elif eff_kind[kk] == "outflow":
                            st.Q[sel, eff.fund] -= 1
                        elif eff_kind[kk] == "transfer":
                            st.Q[sel, eff.fund] -= 1
                            st.Q[sel, eff.to] += 1
                    if rec is not None:
                        rec.ev.append((a, ta, cha, marks))
                    # counts and queues moved: refresh the bound for the rest of the step
                    wa = (ta - t) / h
                    sa = _interp_snapshot(st.S[a], S1[a], st.Y[a], Y1[a], wa, st.counts[a], st.Q[a])
                    sb_ = Snapshot(S1[a], Y1[a], st.counts[a], st.Q[a])
                    bound[a] = _rates_max(channels, ta, sa, sb_, N)
                    Btot = bound.sum(axis=1)
            tau = nxt
            active = active & ~done

        # ---- close the step
        if spec.mode == "truth":
            st.z = z_next
        if spec.has_filters:
            st.zhat = zhat_next
            st.q, st.log_scale = renormalize(st.q, st.log_scale)
        st.S, st.Y, st.t = S1, Y1, t1
        hooks.end(k, t1, st, dS, dY)
        if rec is not None:
            rec.grid(k + 1, st)
    return st, rec


# ---------------------------------------------------------------- ensembles


def _event_table(rec_list, offsets) -> EventTable:
    parts = []
    for rec, off in zip(rec_list, offsets):
        for a, ta, cha, marks in rec.ev:
            parts.append((a + off, ta, cha, marks))
    if not parts:
        return EventTable.empty(with_path=True)
    path = np.concatenate([p[0] for p in parts])
    time = np.concatenate([p[1] for p in parts])
    chan = np.concatenate([p[2] for p in parts])
    mark = np.concatenate([p[3] for p in parts])
    order = np.lexsort((time, path))
    path, time, chan, mark = path[order], time[order], chan[order], mark[order]
    for pth in np.unique(path):
        sel = path == pth
        time[sel] = separate_ties(time[sel])
    return EventTable(time, chan.astype(np.int64), mark, path.astype(np.int64))


@dataclass
class Ensemble:
    """Recorded grid data of many paths (path-major arrays)."""

    spec: RunSpec
    times: np.ndarray
    S: np.ndarray
    Y: np.ndarray
    Q: np.ndarray
    counts: np.ndarray
    events: EventTable
    final: EngineState
    z: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    dW: Optional[np.ndarray] = None
    dB: Optional[np.ndarray] = None
    dV: Optional[np.ndarray] = None
    zhat: Optional[np.ndarray] = None
    xhat: Optional[np.ndarray] = None
    log_disc: Optional[np.ndarray] = None
    jumps: Optional[list] = None

    @property
    def npaths(self) -> int:
        return self.S.shape[0]

    def observed(self, i: int) -> ObservedPath:
        model = self.spec.model
        return ObservedPath(
            times=self.times,
            S=self.S[i],
            Y=self.Y[i],
            events=self.events.for_path(i),
            Q=self.Q[i],
            q0=tuple(model.q0),
            channel_names=tuple(c.name for c in model.channels),
        )

    def path(self, i: int) -> ObservedPath:
        """Path ``i``: a ``TruthPath`` in truth mode, else an ``ObservedPath``."""
        obs = self.observed(i)
        if self.z is None:
            return obs
        jt, js = self.jumps[i]
        return TruthPath(
            **obs.__dict__,
            dW=self.dW[i], dB=self.dB[i], dV=self.dV[i], z=self.z[i], x=self.x[i],
            x_jump_times=jt, x_jump_states=js,
        )


def _concat_state(states) -> EngineState:
    if len(states) == 1:
        return states[0]
    kw = {}
    for name in EngineState.__dataclass_fields__:
        vals = [getattr(s, name) for s in states]
        if name == "t":
            kw[name] = vals[0]
        elif vals[0] is None:
            kw[name] = None
        else:
            kw[name] = np.concatenate(vals, axis=0)
    return EngineState(**kw)


def run(
    spec: RunSpec,
    npaths: int,
    threads: int = 1,
    offset: int = 0,
    hooks_factory: Optional[Callable[[int, int], Hooks]] = None,
):
    """Simulate ``npaths`` paths; returns ``(final_state, hooks_list, ensemble_or_None)``.

    Paths are split into block-aligned chunks; path ``p`` consumes the same
    random numbers whatever ``threads`` is, so results are bit-identical
    across worker counts.
    """

    def job(off, cnt):
        hk = hooks_factory(off, cnt) if hooks_factory else None
        stt, rec = run_chunk(spec, offset + off, cnt, hk, init_row=off)
        return off, stt, rec, hk

    if offset % 1 != 0:
        raise ValueError("offset must be an integer")
    results = map_paths(npaths, threads, job)
    states = [r[1] for r in results]
    hooks = [r[3] for r in results]
    final = _concat_state(states)
    if not spec.record:
        return final, hooks, None
    recs = [r[2] for r in results]
    offs = [r[0] for r in results]

    def cat(name):
        vals = [getattr(r, name) for r in recs]
        return None if vals[0] is None else np.concatenate(vals, axis=0)

    jumps = None
    if spec.mode == "truth":
        jumps = []
        for rec, off in zip(recs, offs):
            per = [([], []) for _ in range(rec.P)]
            for j, tj, xj in rec.jumps:
                for a, b, c in zip(j, tj, xj):
                    per[a][0].append(b)
                    per[a][1].append(c)
            jumps.extend((np.array(a, float), np.array(b, np.int64)) for a, b in per)
    ens = Ensemble(
        spec=spec,
        times=spec.times,
        S=cat("S"),
        Y=cat("Y"),
        Q=cat("Q"),
        counts=cat("counts"),
        events=_event_table(recs, offs),
        final=final,
        z=cat("z"),
        x=cat("x"),
        dW=cat("dW"),
        dB=cat("dB"),
        dV=cat("dV"),
        zhat=cat("zhat"),
        xhat=cat("xhat"),
        log_disc=cat("log_disc"),
        jumps=jumps,
    )
    return final, hooks, ens


def simulate_truth_ensemble(
    model: Model,
    horizon: float,
    step: float,
    seed: int,
    npaths: int,
    offset: int = 0,
    record: bool = True,
    strict: bool = True,
    threads: int = 1,
    cov: Optional[CovarianceSolution] = None,
) -> Ensemble:
    """Full-information paths; with ``cov`` the observer's filters run online too."""
    spec = RunSpec(model, horizon, step, seed, mode="truth", cov=cov, filters=cov is not None,
                   strict=strict, record=record)
    _, _, ens = run(spec, npaths, threads=threads, offset=offset)
    return ens


def simulate_observer_ensemble(
    model: Model,
    cov: CovarianceSolution,
    horizon: float,
    step: float,
    seed: int,
    npaths: int,
    measure: str = "P",
    ric: Optional[RiccatiSolution] = None,
    init: Optional[InitialState] = None,
    t0: float = 0.0,
    threads: int = 1,
    record: bool = True,
) -> Ensemble:
    spec = RunSpec(model, horizon, step, seed, mode="observer", measure=measure, cov=cov, ric=ric,
                   init=init, t0=t0, record=record)
    _, _, ens = run(spec, npaths, threads=threads)
    return ens


__all__ = [
    "EngineState",
    "Ensemble",
    "Hooks",
    "InitialState",
    "RunSpec",
    "run",
    "run_chunk",
    "simulate_observer_ensemble",
    "simulate_truth_ensemble",
    "ric_mod",
    "bmtv",
    "bsolve",
]
