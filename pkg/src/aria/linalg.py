"""Streaming matrix primitives: column statistics, Gram products, top singular triplets.

Every pass walks row blocks in a fixed order and accumulates in float64, so a
given block size gives bitwise-reproducible results.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import scipy.linalg as sla

from aria.data import block_rows
from aria.errors import InputError, NumericError

log = logging.getLogger(__name__)

# Exact dense SVD is used when the smaller side is at most this...
EXACT_MAX_MIN_DIM = 512
# ...and the matrix has at most this many entries.
EXACT_MAX_ENTRIES = 2**24
# Gram route (eigendecomposition of the smaller-side Gram matrix) up to this size.
GRAM_MAX_DIM = 4096

SVD_METHODS = ("auto", "exact", "gram", "randomized")


class MatrixSource(Protocol):
    shape: tuple[int, int]

    def iter_row_blocks(self, step: int | None = None): ...

    def column_block(self, j0: int, j1: int) -> np.ndarray: ...

    def to_dense(self) -> np.ndarray: ...


class CompensatedSum:
    """Neumaier-compensated running sum over arrays (or scalars)."""

    def __init__(self, shape=()):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        t = self.total + x
        big = np.abs(self.total) >= np.abs(x)
        self.comp += np.where(big, (self.total - t) + x, (x - t) + self.total)
        self.total = t

    @property
    def value(self) -> np.ndarray:
        return self.total + self.comp


@dataclass(frozen=True)
class ColumnStats:
    n_rows: int
    sums: np.ndarray
    sumsq: np.ndarray
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def means(self) -> np.ndarray:
        return self.sums / self.n_rows

    @property
    def frobenius_sq(self) -> float:
        return float(sum_compensated(self.sumsq))

    @property
    def constant(self) -> np.ndarray:
        return self.mins == self.maxs


def sum_compensated(x: np.ndarray) -> float:
    acc = CompensatedSum()
    for v in np.asarray(x, dtype=np.float64).ravel():
        acc.add(v)
    return float(acc.value)


def column_statistics(S: MatrixSource, step: int | None = None) -> ColumnStats:
    """One streaming pass: per-column sum, sum of squares, min and max."""
    m, t = S.shape
    sums, sumsq = CompensatedSum(t), CompensatedSum(t)
    mins = np.full(t, np.inf)
    maxs = np.full(t, -np.inf)
    for _, b in S.iter_row_blocks(step):
        sums.add(b.sum(axis=0))
        sumsq.add(np.einsum("ij,ij->j", b, b))
        np.minimum(mins, b.min(axis=0), out=mins)
        np.maximum(maxs, b.max(axis=0), out=maxs)
    return ColumnStats(m, sums.value, sumsq.value, mins, maxs)


def centered_gram(S: MatrixSource, cols: np.ndarray, means: np.ndarray, step: int | None = None) -> np.ndarray:
    """(X - 1 mu^T)^T (X - 1 mu^T) for the selected columns, accumulated over row blocks."""
    cols = np.asarray(cols)
    full = len(cols) == S.shape[1] and np.array_equal(cols, np.arange(S.shape[1]))
    G = np.zeros((len(cols), len(cols)))
    mu = means[cols]
    for _, b in S.iter_row_blocks(step):
        xb = b if full else b[:, cols]
        xb = xb - mu
        G += xb.T @ xb
    return G


def gram(S: MatrixSource, step: int | None = None) -> np.ndarray:
    _, t = S.shape
    G = np.zeros((t, t))
    for _, b in S.iter_row_blocks(step):
        G += b.T @ b
    return G


def _matmul(S: MatrixSource, X: np.ndarray, step: int | None) -> np.ndarray:
    m = S.shape[0]
    Y = np.empty((m, X.shape[1]))
    for i0, b in S.iter_row_blocks(step):
        Y[i0 : i0 + b.shape[0]] = b @ X
    return Y


def _rmatmul(S: MatrixSource, Y: np.ndarray, step: int | None) -> np.ndarray:
    Z = np.zeros((S.shape[1], Y.shape[1]))
    for i0, b in S.iter_row_blocks(step):
        Z += b.T @ Y[i0 : i0 + b.shape[0]]
    return Z


def _orth(X: np.ndarray) -> np.ndarray:
    Q, _ = np.linalg.qr(X)
    return Q


@dataclass(frozen=True)
class SVDResult:
    """Leading singular triplets ``u[:, i], s[i], vt[i]`` in descending order."""

    u: np.ndarray | None
    s: np.ndarray
    vt: np.ndarray
    method: str
    iterations: int = 0
    converged: bool = True
    residual: float = 0.0

    def info(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "converged": self.converged,
            "residual": self.residual,
        }


def _fix_signs(u: np.ndarray | None, vt: np.ndarray) -> tuple[np.ndarray | None, np.ndarray]:
    """Flip each component so the largest-magnitude entry of u (or v) is positive."""
    ref = u.T if u is not None else vt
    idx = np.argmax(np.abs(ref), axis=1)
    signs = np.sign(ref[np.arange(ref.shape[0]), idx])
    signs[signs == 0] = 1.0
    if u is not None:
        u = u * signs
    return u, vt * signs[:, None]


def choose_method(shape: tuple[int, int], method: str = "auto") -> str:
    if method not in SVD_METHODS:
        raise InputError(f"unknown SVD method {method!r}")
    if method != "auto":
        return method
    m, t = shape
    if min(m, t) <= EXACT_MAX_MIN_DIM and m * t <= EXACT_MAX_ENTRIES:
        return "exact"
    if min(m, t) <= GRAM_MAX_DIM:
        return "gram"
    return "randomized"


def _exact(S: MatrixSource, k: int, need_u: bool) -> SVDResult:
    A = S.to_dense()
    try:
        u, s, vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        u, s, vt = sla.svd(A, full_matrices=False, lapack_driver="gesvd")
    return SVDResult(u[:, :k] if need_u else None, s[:k], vt[:k], "exact")


def _gram_route(S: MatrixSource, k: int, need_u: bool, step: int | None) -> SVDResult:
    m, t = S.shape
    if t <= m:
        G = gram(S, step)
        w, V = np.linalg.eigh(G)
        order = np.argsort(w)[::-1][:k]
        s = np.sqrt(np.clip(w[order], 0.0, None))
        V = V[:, order]
        u = None
        if need_u:
            if s[-1] <= 0:
                keep = s > 0
                u = np.zeros((m, k))
                u[:, keep] = _matmul(S, V[:, keep], step) / s[keep]
            else:
                u = _matmul(S, V, step) / s
        return SVDResult(u, s, V.T, "gram")
    # Wide matrix: eigendecompose A A^T built from column blocks.
    G = np.zeros((m, m))
    cstep = block_rows(m)
    for j0 in range(0, t, cstep):
        c = S.column_block(j0, min(t, j0 + cstep))
        G += c @ c.T
    w, U = np.linalg.eigh(G)
    order = np.argsort(w)[::-1][:k]
    s = np.sqrt(np.clip(w[order], 0.0, None))
    U = U[:, order]
    safe = np.where(s > 0, s, 1.0)
    vt = (_rmatmul(S, U, step) / safe).T
    vt[s <= 0] = 0.0
    return SVDResult(U if need_u else None, s, vt, "gram")


def randomized_svd(
    S: MatrixSource,
    k: int,
    *,
    n_iter: int = 2,
    oversample: int = 8,
    seed: int = 0,
    tol: float = 1e-10,
    max_iter: int = 500,
    step: int | None = None,
    need_u: bool = True,
) -> SVDResult:
    """Randomized subspace iteration with a convergence check.

    At least ``n_iter`` subspace iterations are run; iteration then continues
    until the top-``k`` Ritz values change by at most ``tol * s[0]`` between
    iterations. Raises NumericError if ``max_iter`` is reached first.
    """
    m, t = S.shape
    l = min(k + oversample, m, t)
    rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), 0x5356]))
    omega = rng.standard_normal((t, l))
    Q = _orth(_matmul(S, omega, step))
    prev = None
    delta = np.inf
    it = 0
    while True:
        Z = _rmatmul(S, Q, step)  # A^T Q, i.e. B^T for B = Q^T A
        s = np.linalg.svd(Z, compute_uv=False)
        if prev is not None:
            scale = s[0] if s[0] > 0 else 1.0
            delta = float(np.max(np.abs(s[:k] - prev[:k])) / scale)
        if it >= n_iter and delta <= tol:
            break
        if it >= max_iter:
            raise NumericError(
                f"randomized SVD did not converge in {max_iter} iterations (last relative change {delta:.3e})",
                residual=delta,
            )
        prev = s
        Q = _orth(_matmul(S, _orth(Z), step))
        it += 1
    Ub, s, Vt = np.linalg.svd(Z.T, full_matrices=False)
    u = Q @ Ub[:, :k] if need_u else None
    return SVDResult(u, s[:k], Vt[:k], "randomized", iterations=it, converged=True, residual=delta)


def top_singular_triplets(
    S: MatrixSource,
    k: int,
    *,
    method: str = "auto",
    seed: int = 0,
    n_iter: int = 2,
    oversample: int = 8,
    tol: float = 1e-10,
    max_iter: int = 500,
    step: int | None = None,
    need_u: bool = True,
) -> SVDResult:
    """Top-``k`` singular triplets with a deterministic sign convention.

    ``k`` is clipped to ``min(M, T)``. ``method='auto'`` picks exact dense SVD
    for small matrices, the Gram route when one side is at most 4096, and
    randomized subspace iteration otherwise.
    """
    m, t = S.shape
    k = min(k, m, t)
    if k < 1:
        raise InputError("k must be at least 1")
    chosen = choose_method((m, t), method)
    if chosen == "exact":
        res = _exact(S, k, need_u)
    elif chosen == "gram":
        res = _gram_route(S, k, need_u, step)
    else:
        res = randomized_svd(
            S, k, n_iter=n_iter, oversample=oversample, seed=seed, tol=tol, max_iter=max_iter, step=step, need_u=need_u
        )
    u, vt = _fix_signs(res.u, res.vt)
    return SVDResult(u, res.s, vt, res.method, res.iterations, res.converged, res.residual)
