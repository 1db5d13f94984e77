"""Unnormalized filter for the hidden chain observed through counting channels.

Between events the filter solves the linear ODE

    dq/dt = R_t q - sum_k g_k (Lambda_k - I) q

and at an event on channel ``k`` it is multiplied by ``Lambda_k``. Every
registered channel (inflows, outflows, insured events, switches, severity
grades) enters the same way, so one implementation serves all model variants.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from ._linalg import mv
from .errors import GateClosed, PositivityLost
from .market import ChainModel, CountingChannel, ObservedPath, Snapshot

RENORM_LO = 1e-30
RENORM_HI = 1e30
MAX_RK4_SPAN = 0.25


def channel_rates(channels: Sequence[CountingChannel], t, snap: Snapshot, N: int) -> np.ndarray:
    """Stack per-state intensities into ``(P, K, N)``."""
    out = np.empty((snap.P, len(channels), N))
    for k, ch in enumerate(channels):
        out[:, k, :] = ch.intensity(t, snap)
    return out


def channel_gates(channels: Sequence[CountingChannel], Q: np.ndarray) -> np.ndarray:
    """Gate indicators ``(P, K)`` evaluated on the queue state just before ``t``."""
    g = np.ones((Q.shape[0], len(channels)), dtype=bool)
    for k, ch in enumerate(channels):
        if ch.gate is not None:
            g[:, k] = Q[:, ch.gate] > 0
    return g


def no_event_decay(lam: np.ndarray, gates: np.ndarray) -> np.ndarray:
    """``c_i = sum_k g_k (lambda_k(e_i) - 1)``, shape ``(P, N)``."""
    out = np.zeros((lam.shape[0], lam.shape[2]))
    for k in range(lam.shape[1]):
        out += gates[:, k : k + 1] * (lam[:, k, :] - 1.0)
    return out


def evolve_q(q: np.ndarray, R: np.ndarray, decay: np.ndarray, dt) -> np.ndarray:
    """Advance ``dq/dt = R q - decay * q`` over ``dt`` (scalar or per path) with RK4.

    For a linear system with frozen coefficients one RK4 step equals the
    fourth-order Taylor polynomial of the propagator; long spans are split so
    that ``dt * |M|`` stays small.
    """
    dt = np.broadcast_to(np.asarray(dt, float), q.shape[:1])
    scale = np.abs(np.diag(R)).max(initial=0.0) + np.abs(decay).max(axis=1)
    nsub = np.maximum(1, np.ceil(dt * scale / MAX_RK4_SPAN)).astype(int)
    h = (dt / nsub)[:, None]
    out = q
    for i in range(int(nsub.max())):
        live = (nsub > i)[:, None]

        def f(v):
            return mv(R, v) - decay * v

        v1 = f(out)
        v2 = f(v1)
        v3 = f(v2)
        v4 = f(v3)
        nxt = out + h * (v1 + h / 2 * (v2 + h / 3 * (v3 + h / 4 * v4)))
        out = np.where(live, nxt, out)
    if np.any(out <= 0):
        raise PositivityLost("unnormalized filter lost positivity; reduce the step")
    return out


def renormalize(q: np.ndarray, log_scale: np.ndarray, always: bool = False):
    """Rescale rows of ``q`` whose sum left ``[1e-30, 1e30]``; track the discarded log scale."""
    tot = q.sum(axis=1)
    fix = np.ones_like(tot, dtype=bool) if always else (tot < RENORM_LO) | (tot > RENORM_HI)
    if np.any(fix):
        q = q.copy()
        q[fix] /= tot[fix, None]
        log_scale = log_scale + np.where(fix, np.log(tot), 0.0)
    return q, log_scale


# ----------------------------------------------------------- single filter


@dataclass
class UnnormalizedFilter:
    t: float
    q: np.ndarray
    generator: Callable
    lam: np.ndarray
    gates: np.ndarray
    log_scale: float = 0.0

    @property
    def xhat(self) -> np.ndarray:
        return self.q / self.q.sum()


def evolve_between_events(f: UnnormalizedFilter, dt: float) -> UnnormalizedFilter:
    if dt <= 0:
        raise ValueError("dt must be positive")
    R = np.asarray(f.generator(f.t), float)
    decay = no_event_decay(f.lam[None], f.gates[None])
    q = evolve_q(f.q[None], R, decay, dt)
    q, ls = renormalize(q, np.array([f.log_scale]))
    return replace(f, t=f.t + dt, q=q[0], log_scale=float(ls[0]))


def apply_event(f: UnnormalizedFilter, k: int) -> UnnormalizedFilter:
    if not f.gates[k]:
        raise GateClosed(f"event on channel {k} at t={f.t:.6g} while its gate is closed")
    return replace(f, q=f.lam[k] * f.q)


def filtered_intensity(f: UnnormalizedFilter, k: int) -> float:
    if not f.gates[k]:
        return 0.0
    return float(f.lam[k] @ f.xhat)


# ----------------------------------------------------------- path replay


@dataclass
class ChainFilterRun:
    times: np.ndarray
    q: np.ndarray
    xhat: np.ndarray
    lam_hat: np.ndarray
    log_scale: np.ndarray
    channel_names: tuple


def _snapshot_at(path: ObservedPath, k: int, t: float, counts, Q) -> Snapshot:
    t0, t1 = path.times[k], path.times[k + 1]
    w = (t - t0) / (t1 - t0)
    S = path.S[k] + w * (path.S[k + 1] - path.S[k])
    Y = path.Y[k] + w * (path.Y[k + 1] - path.Y[k])
    return Snapshot(S[None], Y[None], counts[None].copy(), Q[None].copy())


def run_filter(
    observed: ObservedPath,
    chain: ChainModel,
    channels: Sequence[CountingChannel],
    x0_dist: Optional[np.ndarray] = None,
) -> ChainFilterRun:
    """Replay an observed path through the chain filter; outputs on the path grid."""
    names = tuple(c.name for c in channels)
    if names != tuple(observed.channel_names):
        raise ValueError("channel registry does not match the path's channels")
    N = chain.N
    K = len(channels)
    times = observed.times
    ev = observed.events
    q = np.array(chain.x0_dist if x0_dist is None else x0_dist, float)[None]
    log_scale = np.zeros(1)
    counts = np.zeros(K, dtype=np.int64)
    Q = np.array(observed.q0, dtype=np.int64)
    nT = times.shape[0]
    q_out = np.empty((nT, N))
    lam_out = np.empty((nT, K))
    ls_out = np.zeros(nT)

    def record(i, t, snap):
        lam = channel_rates(channels, t, snap, N)[0]
        g = channel_gates(channels, snap.Q)[0]
        xh = q[0] / q[0].sum()
        q_out[i] = q[0]
        lam_out[i] = (lam @ xh) * g
        ls_out[i] = log_scale[0]

    record(0, times[0], _snapshot_at(observed, 0, times[0], counts, Q))
    ei = 0
    E = len(ev)
    for k in range(nT - 1):
        t0, t1 = times[k], times[k + 1]
        tau = t0
        while ei < E and ev.time[ei] <= t1:
            te = ev.time[ei]
            snap = _snapshot_at(observed, k, tau, counts, Q)
            lam = channel_rates(channels, tau, snap, N)
            g = channel_gates(channels, snap.Q)
            if te > tau:
                q = evolve_q(q, chain.R(tau), no_event_decay(lam, g), te - tau)
            snap = _snapshot_at(observed, k, te, counts, Q)
            lam = channel_rates(channels, te, snap, N)[0]
            ch = int(ev.channel[ei])
            if not channel_gates(channels, snap.Q)[0, ch]:
                raise GateClosed(f"event on {names[ch]!r} at t={te:.6g} while its gate is closed")
            q = lam[ch][None] * q
            counts[ch] += 1
            eff = channels[ch].effect
            if eff.kind == "inflow":
                Q[eff.fund] += 1
            elif eff.kind == "outflow":
                Q[eff.fund] -= 1
            elif eff.kind == "transfer":
                Q[eff.fund] -= 1
                Q[eff.to] += 1
            tau = te
            ei += 1
        if t1 > tau:
            snap = _snapshot_at(observed, k, tau, counts, Q)
            lam = channel_rates(channels, tau, snap, N)
            g = channel_gates(channels, snap.Q)
            q = evolve_q(q, chain.R(tau), no_event_decay(lam, g), t1 - tau)
        q, log_scale = renormalize(q, log_scale)
        record(k + 1, t1, _snapshot_at(observed, k, t1, counts, Q))
    xhat = q_out / q_out.sum(axis=1, keepdims=True)
    return ChainFilterRun(times, q_out, xhat, lam_out, ls_out, names)
