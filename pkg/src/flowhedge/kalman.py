"""Kalman-Bucy filter for the hidden risk premium.

The conditional covariance solves the deterministic matrix Riccati ODE

    dSigma/dt = delta delta^T - F Sigma - Sigma F^T - Sigma^2,

which does not depend on observations, so it is computed once and shared by
every path. The conditional mean is propagated with
``dz^ = (mu - F z^) dt + Sigma dn`` where ``dn = dw~ - z^ dt``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StepTooCoarse
from .market import MarketSpec, ObservedPath, RiskPremiumModel

PSD_FLOOR = -1e-10


def grid_steps(horizon: float, step: float) -> int:
    if step <= 0:
        raise ValueError("step must be positive")
    n = int(round(horizon / step))
    if n < 1 or abs(n * step - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"horizon {horizon} is not a multiple of step {step}")
    return n


@dataclass(frozen=True)
class CovarianceSolution:
    times: np.ndarray
    Sigma: np.ndarray
    d: int

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    def at(self, t: float) -> np.ndarray:
        """Sigma(t) with linear interpolation between grid nodes."""
        h = self.step
        x = (t - self.times[0]) / h
        i = int(np.floor(x + 1e-9))
        if i >= len(self.times) - 1:
            return self.Sigma[-1]
        i = max(i, 0)
        w = x - i
        if w < 1e-9:
            return self.Sigma[i]
        return (1 - w) * self.Sigma[i] + w * self.Sigma[i + 1]

    def Sigma_d(self, t: float) -> np.ndarray:
        return self.at(t)[: self.d]

    def Sigma_m(self, t: float) -> np.ndarray:
        return self.at(t)[self.d :]

    def Xi(self, t: float) -> np.ndarray:
        return xi_matrix(self.at(t), self.d)


def xi_matrix(Sig: np.ndarray, d: int) -> np.ndarray:
    Sd, Sm = Sig[:d], Sig[d:]
    return Sd.T @ Sd - Sm.T @ Sm


def _psd_repair(S: np.ndarray, t: float) -> np.ndarray:
    S = (S + S.T) / 2
    if S.shape[0] == 1:
        lo = S[0, 0]
    elif np.all(np.diag(S) > 0) and np.all(np.linalg.eigvalsh(S) >= 0):
        return S
    else:
        lo = np.linalg.eigvalsh(S).min()
    if lo < PSD_FLOOR:
        raise StepTooCoarse(f"covariance lost PSD at t={t:.6g} (min eigenvalue {lo:.3g})")
    if lo < 0:
        w, v = np.linalg.eigh(S)
        S = (v * np.clip(w, 0, None)) @ v.T
    return S


def solve_covariance(
    rp: RiskPremiumModel, horizon: float, step: float, d: int | None = None, t0: float = 0.0
) -> CovarianceSolution:
    """Integrate the covariance ODE from ``Sigma0`` with fixed-step RK4.

    ``d`` is the number of tradables; it only fixes how ``Sigma`` splits into
    the tradable and non-tradable blocks and defaults to ``n`` (no ``Y``).
    """
    nsteps = grid_steps(horizon, step)

    def rhs(t, S):
        _, F, dl = rp.coefficients(t)
        return dl @ dl.T - F @ S - S @ F.T - S @ S

    times = t0 + step * np.arange(nsteps + 1)
    out = np.empty((nsteps + 1, rp.n, rp.n))
    S = rp.Sigma0.copy()
    out[0] = S
    h = step
    for k in range(nsteps):
        t = times[k]
        k1 = rhs(t, S)
        k2 = rhs(t + h / 2, S + h / 2 * k1)
        k3 = rhs(t + h / 2, S + h / 2 * k2)
        k4 = rhs(t + h, S + h * k3)
        S = _psd_repair(S + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), times[k + 1])
        out[k + 1] = S
    return CovarianceSolution(times, out, rp.n if d is None else int(d))


@dataclass(frozen=True)
class KalmanState:
    t: float
    z_hat: np.ndarray


def propagate(
    state: KalmanState, cov: CovarianceSolution, rp: RiskPremiumModel, dw_tilde: np.ndarray, dt: float
) -> KalmanState:
    """One Euler step of the conditional-mean SDE driven by the observation increment."""
    mu, F, _ = rp.coefficients(state.t)
    z = state.z_hat
    dn = dw_tilde - z * dt
    z_new = z + (mu - F @ z) * dt + cov.at(state.t) @ dn
    return KalmanState(state.t + dt, z_new)


@dataclass
class KalmanRun:
    times: np.ndarray
    z_hat: np.ndarray
    dn: np.ndarray
    Sigma_diag: np.ndarray


def run_kalman(observed: ObservedPath, market: MarketSpec, rp: RiskPremiumModel, cov: CovarianceSolution) -> KalmanRun:
    """Filter the premium along an observed path (deterministic, no RNG)."""
    t = observed.times
    nT = t.shape[0]
    z = np.empty((nT, rp.n))
    dn = np.empty((nT - 1, rp.n))
    st = KalmanState(t[0], rp.z0.copy())
    z[0] = st.z_hat
    for k in range(nT - 1):
        h = t[k + 1] - t[k]
        dw = market.wtilde_increment(
            t[k], observed.S[k : k + 1], observed.Y[k : k + 1],
            observed.S[k + 1 : k + 2] - observed.S[k : k + 1], observed.Y[k + 1 : k + 2] - observed.Y[k : k + 1],
        )[0]
        dn[k] = dw - st.z_hat * h
        st = propagate(st, cov, rp, dw, h)
        z[k + 1] = st.z_hat
    diag = np.array([np.diag(cov.at(tk)) for tk in t])
    return KalmanRun(t, z, dn, diag)


def innovations(run: KalmanRun) -> np.ndarray:
    """Cumulated innovations ``(N; M)`` on the run grid, starting at 0."""
    return np.vstack([np.zeros((1, run.dn.shape[1])), np.cumsum(run.dn, axis=0)])
