"""Per-query normalization of segment scores and aggregation to track level."""
from __future__ import annotations

import logging
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.stats import rankdata

from aria.data import ScoreMatrix, SegmentMap, block_rows
from aria.errors import InputError

log = logging.getLogger(__name__)


class NormalizationMode(str, Enum):
    ZSCORE = "zscore"
    RANK = "rank"
    NONE = "none"


# Default per scoring method. Bounded, near-symmetric scores get z-scored;
# heavy-tailed influence-function scores get ranked. Methods used without
# track aggregation (symbolic TracIn/GradDot, embedding baselines) default to none.
METHOD_NORMALIZATION = {
    "trak": NormalizationMode.ZSCORE,
    "grad-cos": NormalizationMode.ZSCORE,
    "gradcos": NormalizationMode.ZSCORE,
    "logra": NormalizationMode.RANK,
    "factgrass": NormalizationMode.RANK,
    "tracin": NormalizationMode.NONE,
    "graddot": NormalizationMode.NONE,
    "clap": NormalizationMode.NONE,
    "clews": NormalizationMode.NONE,
    "mert": NormalizationMode.NONE,
}

CONVENTIONS = {
    "zscore_std": "population (divide by M)",
    "zscore_zero_variance": "column set to 0 and flagged",
    "rank_direction": "higher score -> higher rank",
    "rank_ties": "average rank",
    "rank_scale": "(rank - 1) / (M - 1)",
}


def default_mode(method: str | None) -> NormalizationMode:
    if method is None:
        return NormalizationMode.NONE
    key = method.strip().lower()
    if key not in METHOD_NORMALIZATION:
        log.warning("no normalization default for method %r; using 'none'", method)
        return NormalizationMode.NONE
    return METHOD_NORMALIZATION[key]


def _zscore_block(block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    degenerate = block.max(axis=0) == block.min(axis=0)
    mean = block.mean(axis=0)
    centered = block - mean
    std = np.sqrt((centered * centered).mean(axis=0))
    std[degenerate] = 1.0
    out = centered / std
    out[:, degenerate] = 0.0
    return out, degenerate


def _rank_block(block: np.ndarray) -> np.ndarray:
    m = block.shape[0]
    return (rankdata(block, method="average", axis=0) - 1.0) / (m - 1)


def normalize_per_query(S: ScoreMatrix, mode: NormalizationMode | str, *, col_block: int | None = None) -> ScoreMatrix:
    """Normalize every column (query) independently.

    zscore: zero mean, unit population std; constant columns become all-zero and
    are listed in ``meta['degenerate_columns']``. rank: average ranks mapped to
    [0, 1]. none: values unchanged. The output keeps the input precision.
    """
    mode = NormalizationMode(mode)
    m, t = S.shape
    if mode is NormalizationMode.NONE:
        values = S.values if isinstance(S, ScoreMatrix) else S.to_dense().astype(S.values.dtype)
        return S.with_values(values, normalization=mode.value, degenerate_columns=[])
    if mode is NormalizationMode.RANK and m < 2:
        raise InputError("rank normalization needs at least 2 rows")
    out = np.empty((m, t), dtype=S.values.dtype)
    degenerate_cols: list[int] = []
    step = col_block or max(1, block_rows(m))
    for j0 in range(0, t, step):
        j1 = min(t, j0 + step)
        block = S.column_block(j0, j1)
        if mode is NormalizationMode.ZSCORE:
            res, deg = _zscore_block(block)
            degenerate_cols.extend(int(j0 + j) for j in np.flatnonzero(deg))
        else:
            res = _rank_block(block)
        out[:, j0:j1] = res
    if degenerate_cols:
        log.info("%d zero-variance columns set to 0", len(degenerate_cols))
    return S.with_values(out, normalization=mode.value, degenerate_columns=degenerate_cols)


def aggregation_operator(row_ids, segmap: SegmentMap) -> tuple[sp.csr_matrix, tuple[str, ...]]:
    """Sparse N x M averaging operator; track order follows first appearance in ``row_ids``."""
    track_pos: dict[str, int] = {}
    cols, rows = [], []
    for i, rid in enumerate(row_ids):
        try:
            track, _ = segmap.assignment[rid]
        except KeyError:
            raise InputError(f"segment {rid!r} not found in segment map") from None
        rows.append(track_pos.setdefault(track, len(track_pos)))
        cols.append(i)
    if len(row_ids) != segmap.n_segments:
        raise InputError(f"segment map has {segmap.n_segments} segments but matrix has {len(row_ids)} rows")
    tracks = tuple(track_pos)
    sizes = np.array([segmap.track_sizes[t] for t in tracks], dtype=np.float64)
    rows_a = np.asarray(rows)
    weights = 1.0 / sizes[rows_a]
    op = sp.csr_matrix((weights, (rows_a, np.asarray(cols))), shape=(len(tracks), len(row_ids)))
    op.sort_indices()
    return op, tracks


def aggregate_to_tracks(S_norm: ScoreMatrix, segmap: SegmentMap, *, col_block: int | None = None) -> ScoreMatrix:
    """Average normalized segment scores within each track (N x T output)."""
    op, tracks = aggregation_operator(S_norm.row_ids, segmap)
    m, t = S_norm.shape
    out = np.empty((len(tracks), t), dtype=S_norm.values.dtype)
    step = col_block or max(1, block_rows(m))
    for j0 in range(0, t, step):
        j1 = min(t, j0 + step)
        out[:, j0:j1] = op @ S_norm.column_block(j0, j1)
    return S_norm.with_values(out, row_ids=tracks, aggregated=True)


def track_matrix(S: ScoreMatrix, segmap: SegmentMap | None, mode: NormalizationMode | str) -> ScoreMatrix:
    """Normalize then aggregate; an absent map means rows already index tracks."""
    S_norm = normalize_per_query(S, mode)
    if segmap is None:
        return S_norm
    return aggregate_to_tracks(S_norm, segmap)
