"""Backward ODE system for the claim-independent part of the value function.

With ``P_d`` the projector onto the tradable coordinates and
``Xi = Sigma_d^T Sigma_d - Sigma_m^T Sigma_m``, the coefficients of

    V_L(t, z) = 1/2 z^T a2 z + a1^T z + a0,     V2 = exp(V_L),

solve (time derivatives, terminal values zero)

    a2' = 2 P_d + a2 Xi a2 + F^T a2 + a2 F + 2 (P_d Sigma a2 + a2 Sigma P_d)
    a1' = -a2 mu + (F^T + a2 Xi + 2 P_d Sigma) a1
    a0' = -mu^T a1 - 1/2 tr(a2 Sigma^2) + 1/2 a1^T Xi a1

The martingale loadings follow as ``(Z_L; Gamma_L) = Sigma (a1 + a2 z)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._linalg import mv, rowdot
from .errors import BlowUp
from .kalman import CovarianceSolution, grid_steps, xi_matrix
from .market import RiskPremiumModel

BLOWUP_NORM = 1e8


@dataclass(frozen=True)
class RiccatiSolution:
    times: np.ndarray
    a2: np.ndarray
    a1: np.ndarray
    a0: np.ndarray
    Xi: np.ndarray
    d: int

    @property
    def n(self) -> int:
        return self.a1.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def P_d(self) -> np.ndarray:
        return np.diag(np.r_[np.ones(self.d), np.zeros(self.n - self.d)])

    def _weights(self, t: float):
        h = self.times[1] - self.times[0]
        x = (t - self.times[0]) / h
        i = int(np.floor(x + 1e-9))
        if i >= len(self.times) - 1:
            return len(self.times) - 1, 0.0
        i = max(i, 0)
        w = x - i
        return i, (0.0 if w < 1e-9 else w)

    def coeffs(self, t: float):
        """``(a2, a1, a0)`` at ``t`` by linear interpolation between nodes."""
        i, w = self._weights(t)
        if w == 0.0:
            return self.a2[i], self.a1[i], float(self.a0[i])
        return (
            (1 - w) * self.a2[i] + w * self.a2[i + 1],
            (1 - w) * self.a1[i] + w * self.a1[i + 1],
            float((1 - w) * self.a0[i] + w * self.a0[i + 1]),
        )


def _rhs(t, a2, a1, a0, rp: RiskPremiumModel, cov: CovarianceSolution, Pd):
    mu, F, _ = rp.coefficients(t)
    Sig = cov.at(t)
    Xi = xi_matrix(Sig, cov.d)
    PS = Pd @ Sig
    d2 = 2 * Pd + a2 @ Xi @ a2 + F.T @ a2 + a2 @ F + 2 * (PS @ a2 + a2 @ PS.T)
    d1 = -a2 @ mu + (F.T + a2 @ Xi + 2 * PS) @ a1
    d0 = -mu @ a1 - 0.5 * np.trace(a2 @ Sig @ Sig) + 0.5 * a1 @ Xi @ a1
    return d2, d1, d0


def solve(
    rp: RiskPremiumModel, cov: CovarianceSolution, horizon: float, step: float | None = None
) -> RiccatiSolution:
    """Integrate backward from zero terminal values with fixed-step RK4.

    The default step is twice the covariance step, so every RK4 midpoint lands
    on a covariance node and no interpolation error enters.

    Raises
    ------
    BlowUp
        If any coefficient norm exceeds ``1e8``; carries the time reached.
    """
    if cov.times[0] > 1e-12 or cov.times[-1] < horizon - 1e-9:
        raise ValueError("covariance solution must span [0, horizon]")
    h = 2 * cov.step if step is None else float(step)
    nsteps = grid_steps(horizon, h)
    n = rp.n
    Pd = np.diag(np.r_[np.ones(cov.d), np.zeros(n - cov.d)])
    times = h * np.arange(nsteps + 1)
    A2 = np.zeros((nsteps + 1, n, n))
    A1 = np.zeros((nsteps + 1, n))
    A0 = np.zeros(nsteps + 1)
    a2, a1, a0 = np.zeros((n, n)), np.zeros(n), 0.0
    for k in range(nsteps, 0, -1):
        t = times[k]
        f = lambda s, x2, x1, x0: _rhs(s, x2, x1, x0, rp, cov, Pd)  # noqa: E731
        k1 = f(t, a2, a1, a0)
        k2 = f(t - h / 2, a2 - h / 2 * k1[0], a1 - h / 2 * k1[1], a0 - h / 2 * k1[2])
        k3 = f(t - h / 2, a2 - h / 2 * k2[0], a1 - h / 2 * k2[1], a0 - h / 2 * k2[2])
        k4 = f(t - h, a2 - h * k3[0], a1 - h * k3[1], a0 - h * k3[2])
        a2 = a2 - h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        a1 = a1 - h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        a0 = a0 - h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        a2 = (a2 + a2.T) / 2
        norm = max(np.abs(a2).max(initial=0.0), np.abs(a1).max(initial=0.0), abs(a0))
        if not np.isfinite(norm) or norm > BLOWUP_NORM:
            raise BlowUp(times[k - 1], norm)
        A2[k - 1], A1[k - 1], A0[k - 1] = a2, a1, a0
    Xi = np.array([xi_matrix(cov.at(t), cov.d) for t in times])
    return RiccatiSolution(times, A2, A1, A0, Xi, cov.d)


def _as_rows(z):
    z = np.asarray(z, float)
    return z[None] if z.ndim == 1 else z, z.ndim == 1


def v_l(sol: RiccatiSolution, t: float, z_hat) -> np.ndarray:
    """``1/2 z^T a2 z + a1^T z + a0`` for one ``(n,)`` or many ``(P, n)`` states."""
    a2, a1, a0 = sol.coeffs(t)
    z, single = _as_rows(z_hat)
    out = 0.5 * rowdot(z, mv(a2, z)) + rowdot(z, np.broadcast_to(a1, z.shape)) + a0
    return out[0] if single else out


def v2(sol: RiccatiSolution, t: float, z_hat) -> np.ndarray:
    return np.exp(v_l(sol, t, z_hat))


def grad_v_l(sol: RiccatiSolution, t: float, z_hat) -> np.ndarray:
    a2, a1, _ = sol.coeffs(t)
    z, single = _as_rows(z_hat)
    g = a1[None] + mv(a2, z)
    return g[0] if single else g


def z_l(sol: RiccatiSolution, cov: CovarianceSolution, t: float, z_hat):
    """Return ``(Z_L, Gamma_L)`` with shapes ``(.., d)`` and ``(.., m)``."""
    g, single = _as_rows(grad_v_l(sol, t, z_hat))
    full = mv(cov.at(t), g)
    if single:
        full = full[0]
    return full[..., : sol.d], full[..., sol.d :]


def z2(sol: RiccatiSolution, cov: CovarianceSolution, t: float, z_hat) -> np.ndarray:
    zl, _ = z_l(sol, cov, t, z_hat)
    return zl * np.asarray(v2(sol, t, z_hat))[..., None]


def write_csv(sol: RiccatiSolution, path, z_ref=None) -> None:
    """Audit export: ``t``, entries of ``a2``, ``a1``, ``a0`` and ``V2`` at ``z_ref``."""
    n = sol.n
    header = ["t"] + [f"a2_{i}{j}" for i in range(n) for j in range(n)] + [f"a1_{i}" for i in range(n)] + ["a0"]
    if z_ref is not None:
        header.append("V2_z0")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(sol.times):
            row = [repr(float(t))] + [repr(float(x)) for x in sol.a2[k].ravel()]
            row += [repr(float(x)) for x in sol.a1[k]] + [repr(float(sol.a0[k]))]
            if z_ref is not None:
                row.append(repr(float(v2(sol, t, z_ref))))
            w.writerow(row)
