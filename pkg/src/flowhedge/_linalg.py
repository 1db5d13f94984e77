"""Small batched contractions with a fixed summation order.

BLAS kernels may change their accumulation order with the batch size, which
would make a path's result depend on how many paths share its batch. These
helpers loop over the (short) contracted axis explicitly instead.
"""

from __future__ import annotations

import numpy as np


def mv(M: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Shared matrix times per-path vectors: ``(a, b) x (P, b) -> (P, a)``."""
    out = np.zeros((x.shape[0], M.shape[0]))
    for j in range(M.shape[1]):
        out += x[:, j : j + 1] * M[None, :, j]
    return out


def bmv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-path matrices times per-path vectors: ``(P, a, b) x (P, b) -> (P, a)``."""
    out = np.zeros(A.shape[:2])
    for j in range(A.shape[2]):
        out += A[:, :, j] * x[:, j : j + 1]
    return out


def bmtv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Transposed per-path matrices times vectors: ``(P, a, b)^T x (P, a) -> (P, b)``."""
    out = np.zeros((A.shape[0], A.shape[2]))
    for i in range(A.shape[1]):
        out += A[:, i, :] * x[:, i : i + 1]
    return out


def rowdot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise inner product ``(P, a) . (P, a) -> (P,)``."""
    out = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        out += x[:, j] * y[:, j]
    return out


def bsolve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A_p y_p = b_p`` for every path; small systems only."""
    k = A.shape[-1]
    if k == 0:
        return np.zeros_like(b)
    if k == 1:
        return b / A[:, 0, :]
    return np.linalg.solve(A, b[..., None])[..., 0]
