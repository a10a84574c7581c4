"""Feature similarity functions and within-group mean pairwise similarity.

Vector features use ``1 / (1 + ||z_a - z_b||)`` on dataset-standardized values;
chord sequences use LCS length over the longer sequence length.
"""
from __future__ import annotations

import numpy as np
from numba import njit
from scipy.spatial.distance import pdist

from aria.data import FeatureSet, FeatureSpec
from aria.errors import InputError

# Full N x N LCS similarity tables are cached up to this many tracks.
LCS_TABLE_MAX_TRACKS = 8000


@njit(cache=True, nogil=True)
def lcs_length(a, b):
    n = a.shape[0]
    m = b.shape[0]
    if n < m:
        a, b = b, a
        n, m = m, n
    prev = np.zeros(m + 1, dtype=np.int32)
    cur = np.zeros(m + 1, dtype=np.int32)
    for i in range(n):
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            elif prev[j + 1] >= cur[j]:
                cur[j + 1] = prev[j + 1]
            else:
                cur[j + 1] = cur[j]
        prev, cur = cur, prev
    return prev[m]


@njit(cache=True, nogil=True)
def _lcs_sim(flat, offsets, i, j):
    a = flat[offsets[i] : offsets[i + 1]]
    b = flat[offsets[j] : offsets[j + 1]]
    la = a.shape[0]
    lb = b.shape[0]
    if la == 0 and lb == 0:
        return 1.0
    if la == 0 or lb == 0:
        return 0.0
    return lcs_length(a, b) / max(la, lb)


@njit(cache=True, nogil=True)
def _lcs_group_sum(flat, offsets, idx):
    total = 0.0
    k = idx.shape[0]
    for x in range(k):
        for y in range(x + 1, k):
            total += _lcs_sim(flat, offsets, idx[x], idx[y])
    return total


@njit(cache=True, nogil=True)
def _lcs_table(flat, offsets, rows):
    n = rows.shape[0]
    out = np.ones((n, n))
    for x in range(n):
        for y in range(x + 1, n):
            v = _lcs_sim(flat, offsets, rows[x], rows[y])
            out[x, y] = v
            out[y, x] = v
    return out


def lcs_similarity(a, b) -> float:
    """Normalized LCS: both empty -> 1, one empty -> 0, else LCS / max(len)."""
    a = np.asarray(a, dtype=np.int8).reshape(-1)
    b = np.asarray(b, dtype=np.int8).reshape(-1)
    if a.size == 0 and b.size == 0:
        return 1.0
    if a.size == 0 or b.size == 0:
        return 0.0
    return float(lcs_length(a, b)) / max(a.size, b.size)


def vector_similarity(a, b, std: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != std.shape or b.shape != std.shape:
        raise InputError(f"dimension mismatch: {a.shape}, {b.shape} vs std {std.shape}")
    safe = np.where(std > 0, std, 1.0)
    diff = np.where(std > 0, (a - b) / safe, 0.0)
    return 1.0 / (1.0 + float(np.sqrt(diff @ diff)))


def feature_similarity(spec: FeatureSpec, a, b) -> float:
    if spec.is_sequence:
        return lcs_similarity(a, b)
    return vector_similarity(a, b, spec.std_vector)


def pack_sequences(seqs) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    flat = np.concatenate([np.asarray(s, dtype=np.int8) for s in seqs]) if offsets[-1] else np.zeros(0, np.int8)
    return flat, offsets


class SimilarityEngine:
    """Evaluates g_d (mean pairwise similarity) for groups of tracks.

    Groups are arrays of indices into ``fs.tracks``. Standardized vectors are
    precomputed once; sequence features get a cached N x N LCS table when the
    pool is small enough, otherwise pairs are evaluated per group.
    """

    def __init__(self, fs: FeatureSet, features: list[FeatureSpec] | None = None, lcs_table_max: int = LCS_TABLE_MAX_TRACKS):
        self.fs = fs
        self.features = list(features if features is not None else fs.features)
        self._z: dict[str, np.ndarray] = {}
        self._seq: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._table: dict[str, np.ndarray] = {}
        self._table_pos: dict[str, np.ndarray] = {}
        usable = np.flatnonzero(fs.usable_mask())
        for spec in self.features:
            if spec.is_sequence:
                flat, offsets = pack_sequences(fs.sequences[spec.id])
                self._seq[spec.id] = (flat, offsets)
                if len(usable) <= lcs_table_max:
                    self._table[spec.id] = _lcs_table(flat, offsets, usable.astype(np.int64))
                    pos = np.full(fs.n_tracks, -1, dtype=np.int64)
                    pos[usable] = np.arange(len(usable))
                    self._table_pos[spec.id] = pos
            else:
                self._z[spec.id] = np.ascontiguousarray(fs.standardized(spec.id))

    @property
    def feature_ids(self) -> list[str]:
        return [f.id for f in self.features]

    def g(self, feature_id: str, idx: np.ndarray) -> float:
        idx = np.asarray(idx, dtype=np.int64)
        k = len(idx)
        if k < 2:
            raise InputError("group similarity needs at least 2 tracks")
        n_pairs = k * (k - 1) / 2
        if feature_id in self._z:
            d = pdist(self._z[feature_id][idx])
            return float(np.sum(1.0 / (1.0 + d)) / n_pairs)
        if feature_id in self._table:
            pos = self._table_pos[feature_id][idx]
            if (pos < 0).any():
                raise InputError(f"group contains tracks missing feature {feature_id!r}")
            sub = self._table[feature_id][np.ix_(pos, pos)]
            return float(np.triu(sub, 1).sum() / n_pairs)
        flat, offsets = self._seq[feature_id]
        return float(_lcs_group_sum(flat, offsets, idx) / n_pairs)

    def g_all(self, idx: np.ndarray) -> np.ndarray:
        return np.array([self.g(fid, idx) for fid in self.feature_ids])
