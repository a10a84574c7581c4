"""Rank-1 residual construction and paired original/residual homogeneity analysis."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from aria.data import FeatureSet, QueryLabels, ScoreMatrix, SegmentMap, block_rows, write_asm1_stream
from aria.errors import NumericError
from aria.homogeneity import DEFAULT_K_LIST, HomogeneityReport, NullModel, build_null_models, homogeneity_sweep
from aria.linalg import EXACT_MAX_MIN_DIM, top_singular_triplets
from aria.normalize import NormalizationMode, track_matrix
from aria.similarity import SimilarityEngine

RESIDUAL_POWER_ITERATIONS = 4


@dataclass(frozen=True)
class Rank1:
    sigma: float
    u: np.ndarray
    v: np.ndarray
    method: str


def leading_component(S, *, seed: int = 0, method: str | None = None) -> Rank1:
    """sigma_1, u_1, v_1 by exact SVD when min(M, T) <= 512, else the most accurate streaming route."""
    if method is None:
        method = "exact" if min(S.shape) <= EXACT_MAX_MIN_DIM and S.shape[0] * S.shape[1] <= 2**26 else "auto"
    res = top_singular_triplets(S, 1, method=method, seed=seed, n_iter=RESIDUAL_POWER_ITERATIONS)
    if res.s[0] <= 0:
        raise NumericError("zero matrix: rank-1 residual undefined")
    return Rank1(float(res.s[0]), res.u[:, 0], res.vt[0], res.method)


class ResidualView:
    """Lazily evaluated S - sigma u v^T, streamed by row or column blocks."""

    def __init__(self, S: ScoreMatrix, comp: Rank1):
        self.S = S
        self.comp = comp
        self.shape = S.shape
        self.row_ids = S.row_ids
        self.col_ids = S.col_ids
        self.meta = {**S.meta, "rank1_removed": True}
        self.precision = S.precision

    @property
    def values(self) -> np.ndarray:
        # Only dtype is consulted by callers that allocate outputs.
        return np.empty((0, 0), dtype=self.S.values.dtype)

    # Every access path subtracts outer(sigma * u, v) so results agree bitwise.
    def iter_row_blocks(self, step: int | None = None):
        su = self.comp.sigma * self.comp.u
        for i0, b in self.S.iter_row_blocks(step):
            yield i0, b - np.outer(su[i0 : i0 + b.shape[0]], self.comp.v)

    def column_block(self, j0: int, j1: int) -> np.ndarray:
        return self.S.column_block(j0, j1) - np.outer(self.comp.sigma * self.comp.u, self.comp.v[j0:j1])

    def to_dense(self) -> np.ndarray:
        return self.S.to_dense() - np.outer(self.comp.sigma * self.comp.u, self.comp.v)

    def with_values(self, values, row_ids=None, **meta) -> ScoreMatrix:
        return ScoreMatrix(values, tuple(row_ids or self.row_ids), self.col_ids, {**self.meta, **meta}, check_finite=False)

    def materialize(self) -> ScoreMatrix:
        return ScoreMatrix(
            self.to_dense().astype(self.S.values.dtype, copy=False),
            self.row_ids,
            self.col_ids,
            {**self.meta, "sigma1_removed": self.comp.sigma, "svd_method": self.comp.method},
            check_finite=False,
        )


def rank1_residual(S: ScoreMatrix, *, seed: int = 0, method: str | None = None) -> ScoreMatrix:
    """R = S - sigma_1 u_1 v_1^T, held in memory at the input precision."""
    return ResidualView(S, leading_component(S, seed=seed, method=method)).materialize()


def write_rank1_residual(S: ScoreMatrix, path, *, seed: int = 0, method: str | None = None) -> Rank1:
    """Stream the residual to an ASM1 file block by block; returns the removed component."""
    comp = leading_component(S, seed=seed, method=method)
    view = ResidualView(S, comp)
    step = block_rows(S.shape[1])
    blocks = (b for _, b in view.iter_row_blocks(step))
    write_asm1_stream(path, S.shape, S.values.dtype, S.row_ids, S.col_ids, blocks)
    return comp


@dataclass
class PairedReport:
    original: dict[int, HomogeneityReport]
    residual: dict[int, HomogeneityReport]
    sigma1: float

    def rows(self) -> list[dict]:
        """One row per (K, channel) with original and residual summaries side by side."""
        out = []
        for K in sorted(self.original):
            o, r = self.original[K], self.residual[K]
            for c in o.channels:
                so = o.summaries[c]
                sr = r.summaries.get(c)
                out.append(
                    {
                        "K": K,
                        "channel": c,
                        "z_mean_original": so.z_mean,
                        "pos_original": so.pos,
                        "sig_original": so.sig,
                        "z_mean_residual": sr.z_mean if sr else float("nan"),
                        "pos_residual": sr.pos if sr else float("nan"),
                        "sig_residual": sr.sig if sr else float("nan"),
                    }
                )
        return out


def residual_homogeneity_sweep(
    S: ScoreMatrix,
    fs: FeatureSet,
    *,
    segmap: SegmentMap | None = None,
    mode: NormalizationMode | str = NormalizationMode.NONE,
    channels: Sequence[str] | None = None,
    K_list: Sequence[int] = DEFAULT_K_LIST,
    null_models: Mapping[int, NullModel] | None = None,
    B: int = 200,
    seed: int = 0,
    labels: QueryLabels | None = None,
    streaming: bool = False,
    workers: int = 1,
) -> PairedReport:
    """Normalize, aggregate and run the homogeneity sweep on S and on its rank-1 residual.

    Both arms share the configuration and the same null models.
    """
    engine = SimilarityEngine(fs, [f for f in fs.features if channels is None or f.channel in channels])
    nulls = dict(null_models or {})
    missing = [K for K in K_list if K not in nulls]
    if missing:
        nulls.update(build_null_models(fs, channels, missing, B, seed, engine=engine, workers=workers))
    comp = leading_component(S, seed=seed)
    R = ResidualView(S, comp) if streaming else ResidualView(S, comp).materialize()
    reports = []
    for M in (S, R):
        St = track_matrix(M, segmap, mode)
        reports.append(
            homogeneity_sweep(St, fs, channels, K_list, nulls, labels=labels, engine=engine, workers=workers, seed=seed)
        )
    return PairedReport(reports[0], reports[1], comp.sigma)
