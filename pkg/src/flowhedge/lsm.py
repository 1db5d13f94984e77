"""Least-squares regression surfaces over the observer's state.

A surface is a sequence of per-time-slice regressions of simulated values on
a fixed basis of the observable Markov state ``(S, Y, counts, Q, z^, X^)``:

* all monomials of total degree <= ``degree`` in the standardized
  continuous coordinates ``(S, Y, z^)``,
* linear terms in the standardized counts, queues and ``X^`` (one
  component dropped, since ``X^`` sums to one),
* optionally ``V2(t, z^)``, whose gradient is known in closed form.

Columns with zero variance on a slice are dropped. Gradients with respect to
the continuous coordinates are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional, Sequence

import numpy as np

from . import riccati
from .errors import RankDeficientBasis, SurfaceNotFitted
from .market import Snapshot

COND_LIMIT = 1e10
RIDGE_COND_LIMIT = 1e14
STD_FLOOR = 1e-12


@dataclass
class StateBatch:
    """Observable state of ``P`` paths at one time."""

    t: float
    S: np.ndarray
    Y: np.ndarray
    zhat: np.ndarray
    xhat: np.ndarray
    counts: np.ndarray
    Q: np.ndarray

    @property
    def P(self) -> int:
        return self.S.shape[0]

    def snapshot(self) -> Snapshot:
        return Snapshot(self.S, self.Y, self.counts, self.Q)

    def take(self, idx) -> "StateBatch":
        return StateBatch(self.t, self.S[idx], self.Y[idx], self.zhat[idx], self.xhat[idx],
                          self.counts[idx], self.Q[idx])

    def continuous(self) -> np.ndarray:
        return np.concatenate([self.S, self.Y, self.zhat], axis=1)

    def discrete(self) -> np.ndarray:
        return np.concatenate([self.counts, self.Q, self.xhat[:, 1:]], axis=1).astype(float)

    @classmethod
    def from_state(cls, st) -> "StateBatch":
        """From an engine state that carries online filters."""
        return cls(st.t, st.S, st.Y, st.zhat, st.xhat, st.counts, st.Q)

    @classmethod
    def from_ensemble(cls, ens, k: int) -> "StateBatch":
        return cls(float(ens.times[k]), ens.S[:, k], ens.Y[:, k], ens.zhat[:, k], ens.xhat[:, k],
                   ens.counts[:, k], ens.Q[:, k])


@dataclass(frozen=True)
class Basis:
    degree: int = 2
    use_v2: bool = True
    use_discrete: bool = True

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("basis degree must be >= 1")


def _exponents(c: int, degree: int) -> np.ndarray:
    rows = [np.zeros(c, dtype=int)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(c), deg):
            e = np.zeros(c, dtype=int)
            for i in combo:
                e[i] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(len(rows), c)


def _monomials(u: np.ndarray, E: np.ndarray) -> np.ndarray:
    out = np.ones((u.shape[0], E.shape[0]))
    for j in range(E.shape[1]):
        for p in range(1, E[:, j].max(initial=0) + 1):
            sel = E[:, j] >= p
            out[:, sel] *= u[:, j : j + 1]
    return out


def _monomial_grads(u: np.ndarray, E: np.ndarray) -> np.ndarray:
    """``d monomial / d u_j``, shape ``(P, F, c)``."""
    P, c = u.shape
    out = np.zeros((P, E.shape[0], c))
    for j in range(c):
        Ej = E.copy()
        coef = Ej[:, j].astype(float)
        Ej[:, j] = np.maximum(Ej[:, j] - 1, 0)
        out[:, :, j] = _monomials(u, Ej) * coef[None]
    return out


@dataclass
class SliceFit:
    t: float
    c_mean: np.ndarray
    c_std: np.ndarray
    c_keep: np.ndarray
    E: np.ndarray
    e_mean: np.ndarray
    e_std: np.ndarray
    e_keep: np.ndarray
    v2_keep: bool
    coef: np.ndarray
    r2: float
    cond: float
    ridge: bool


@dataclass
class LsmSurface:
    """Fitted per-slice regressions; ``times[k]`` is the time of slice ``k``."""

    basis: Basis
    times: np.ndarray
    slices: list
    ric: Optional[riccati.RiccatiSolution] = None
    d: int = 1
    m: int = 0
    terminal: Optional[object] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def fitted(self) -> bool:
        return bool(self.slices)

    def slice_index(self, t: float) -> int:
        if not self.fitted:
            raise SurfaceNotFitted("surface has no fitted slices")
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise SurfaceNotFitted(f"no fitted slice at t={t:.6g}")
        return k

    def _design(self, fit: SliceFit, batch: StateBatch, grad: bool):
        return design(self.basis, fit, batch, self.ric, grad)

    def value(self, batch: StateBatch) -> np.ndarray:
        fit = self.slices[self.slice_index(batch.t)]
        X, _ = self._design(fit, batch, False)
        return _apply(X, fit.coef)

    def gradient(self, batch: StateBatch):
        """Partial derivatives ``(dS, dY, dz^)`` of the fitted value."""
        fit = self.slices[self.slice_index(batch.t)]
        _, G = self._design(fit, batch, True)
        g = np.zeros(G.shape[::2])
        for f in range(G.shape[1]):
            g += G[:, f, :] * fit.coef[f]
        d, m = self.d, self.m
        return g[:, :d], g[:, d : d + m], g[:, d + m :]


def _apply(X: np.ndarray, coef: np.ndarray) -> np.ndarray:
    out = np.zeros(X.shape[0])
    for f in range(X.shape[1]):
        out += X[:, f] * coef[f]
    return out


def design(basis: Basis, fit: SliceFit, batch: StateBatch, ric, grad: bool):
    """Design matrix ``(P, F)`` and, if ``grad``, its continuous gradient ``(P, F, c)``."""
    C = batch.continuous()
    c = C.shape[1]
    u = (C[:, fit.c_keep] - fit.c_mean[fit.c_keep]) / fit.c_std[fit.c_keep]
    cols = [_monomials(u, fit.E)]
    G = None
    if grad:
        gk = _monomial_grads(u, fit.E) / fit.c_std[fit.c_keep][None, None, :]
        G = np.zeros((batch.P, fit.E.shape[0], c))
        G[:, :, np.nonzero(fit.c_keep)[0]] = gk
        gparts = [G]
    if basis.use_discrete and fit.e_keep.any():
        D = batch.discrete()
        w = (D[:, fit.e_keep] - fit.e_mean[fit.e_keep]) / fit.e_std[fit.e_keep]
        cols.append(w)
        if grad:
            gparts.append(np.zeros((batch.P, w.shape[1], c)))
    if fit.v2_keep:
        v = riccati.v2(ric, batch.t, batch.zhat)
        cols.append(v[:, None])
        if grad:
            gv = np.zeros((batch.P, 1, c))
            gv[:, 0, c - batch.zhat.shape[1] :] = v[:, None] * riccati.grad_v_l(ric, batch.t, batch.zhat)
            gparts.append(gv)
    X = np.concatenate(cols, axis=1)
    if grad:
        G = np.concatenate(gparts, axis=1)
    return X, G


def _solve(X: np.ndarray, y: np.ndarray):
    sv = np.linalg.svd(X, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    if cond <= COND_LIMIT:
        coef = np.linalg.lstsq(X, y, rcond=None)[0]
        return coef, cond, False
    A = X.T @ X
    lam = 1e-10 * np.trace(A) / A.shape[0]
    Ar = A + lam * np.eye(A.shape[0])
    if not np.isfinite(Ar).all() or np.linalg.cond(Ar) > RIDGE_COND_LIMIT:
        raise RankDeficientBasis(f"basis is singular even after ridge (cond {cond:.3g})")
    return np.linalg.solve(Ar, X.T @ y), cond, True


def fit_slice(basis: Basis, batch: StateBatch, y: np.ndarray, ric=None) -> SliceFit:
    C = batch.continuous()
    c_mean, c_std = C.mean(axis=0), C.std(axis=0)
    c_keep = c_std > STD_FLOOR * np.maximum(1.0, np.abs(c_mean))
    c_std = np.where(c_keep, c_std, 1.0)
    E = _exponents(int(c_keep.sum()), basis.degree)
    D = batch.discrete()
    e_mean, e_std = D.mean(axis=0), D.std(axis=0)
    e_keep = e_std > STD_FLOOR if basis.use_discrete else np.zeros(D.shape[1], bool)
    e_std = np.where(e_keep, e_std, 1.0)
    v2_keep = False
    if basis.use_v2 and ric is not None:
        v = riccati.v2(ric, batch.t, batch.zhat)
        v2_keep = bool(v.std() > STD_FLOOR * max(1.0, abs(v.mean())))
    fit = SliceFit(batch.t, c_mean, c_std, c_keep, E, e_mean, e_std, e_keep, v2_keep, np.zeros(0), 0.0, 1.0, False)
    X, _ = design(basis, fit, batch, ric, False)
    coef, cond, ridge = _solve(X, y)
    pred = _apply(X, coef)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss if ss > 0 else 1.0
    fit.coef, fit.cond, fit.ridge, fit.r2 = coef, cond, ridge, r2
    return fit


def fit_slices(basis: Basis, batches: Sequence[StateBatch], targets: Sequence[np.ndarray], ric=None,
               d: int = 1, m: int = 0) -> LsmSurface:
    slices = [fit_slice(basis, b, y, ric) for b, y in zip(batches, targets)]
    times = np.array([b.t for b in batches])
    diag = {"r2": [s.r2 for s in slices], "cond": [s.cond for s in slices], "ridge": [s.ridge for s in slices]}
    return LsmSurface(basis, times, slices, ric, d, m, diagnostics=diag)
