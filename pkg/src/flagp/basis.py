"""Truncated orthogonal (EOF) basis from a dense or randomized SVD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BasisModel:
    """Z_std ~= B @ W with B = U D / sqrt(M) and W = sqrt(M) V^T, truncated to ``p`` terms."""

    B: np.ndarray
    W: np.ndarray
    singular_values: np.ndarray
    p: int
    var_explained: float

    @property
    def d_y(self) -> int:
        return self.B.shape[0]

    @property
    def M(self) -> int:
        return self.W.shape[1]


def _fix_signs(U, Vt):
    # largest-magnitude entry of each basis vector made positive
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs, Vt * signs[:, None]


def _build(U, d, Vt, p, M, total_ss):
    U, Vt = _fix_signs(U[:, :p], Vt[:p])
    sqrt_m = np.sqrt(M)
    B = U * (d[:p] / sqrt_m)
    W = Vt * sqrt_m
    frac = float(np.sum(d[:p] ** 2) / total_ss)
    return BasisModel(B=B, W=W, singular_values=d, p=p, var_explained=min(frac, 1.0))


def _check_matrix(Z):
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.size == 0:
        raise ValueError("basis needs a non-empty d_y x M matrix")
    return Z


def svd_basis(Z_std, min_var_frac: float | None = 0.95, p: int | None = None) -> BasisModel:
    """Dense SVD basis. Pass ``p`` to fix the rank, otherwise the smallest rank
    explaining ``min_var_frac`` of the total sum of squares is kept."""
    Z = _check_matrix(Z_std)
    d_y, M = Z.shape
    U, d, Vt = np.linalg.svd(Z, full_matrices=False)
    total = float(np.sum(d**2))
    if total == 0.0:
        raise ValueError("cannot build a basis from a zero matrix")
    if p is None:
        if min_var_frac is None or not 0.0 < min_var_frac <= 1.0:
            raise ValueError("min_var_frac must be in (0, 1]")
        cum = np.cumsum(d**2) / total
        # guard against the last cumulative value landing a hair below 1
        p = int(np.searchsorted(cum, min_var_frac - 1e-12) + 1)
        p = min(p, d.size)
    elif not 1 <= p <= min(d_y, M):
        raise ValueError(f"p={p} outside [1, {min(d_y, M)}]")
    return _build(U, d, Vt, int(p), M, total)


def rsvd_basis(Z_std, p: int, oversample: int = 10, power_iters: int = 2, seed=None) -> BasisModel:
    """Randomized SVD basis of fixed rank ``p`` (Gaussian sketch plus power iterations)."""
    Z = _check_matrix(Z_std)
    d_y, M = Z.shape
    k = p + oversample
    if p < 1 or k > min(d_y, M):
        raise ValueError(f"p + oversample = {k} exceeds min(d_y, M) = {min(d_y, M)}")
    rng = np.random.default_rng(seed)
    Y = Z @ rng.standard_normal((M, k))
    Q, _ = np.linalg.qr(Y)
    for _ in range(power_iters):
        Q, _ = np.linalg.qr(Z.T @ Q)
        Q, _ = np.linalg.qr(Z @ Q)
    U_small, d, Vt = np.linalg.svd(Q.T @ Z, full_matrices=False)
    U = Q @ U_small
    total = float(np.sum(Z * Z))
    if total == 0.0:
        raise ValueError("cannot build a basis from a zero matrix")
    return _build(U, d, Vt, p, M, total)


def reconstruct(basis: BasisModel, W_any) -> np.ndarray:
    W_any = np.asarray(W_any, dtype=float)
    vec = W_any.ndim == 1
    if vec:
        W_any = W_any[:, None]
    if W_any.shape[0] != basis.p:
        raise ValueError(f"weights have {W_any.shape[0]} rows, basis has p={basis.p}")
    out = basis.B @ W_any
    return out[:, 0] if vec else out
