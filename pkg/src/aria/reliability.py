"""Structural reliability diagnostics of a raw segment-level score matrix.

Three quantities, all computed before per-query normalization:

* ``kappa`` -- mean absolute Pearson correlation between query columns,
* ``r_i`` -- fraction of squared Frobenius energy in the i-th singular component,
* ``p`` -- mean fraction of per-column energy explained by the column mean.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from aria.data import ScoreMatrix
from aria.errors import InputError, NumericError
from aria.linalg import (
    ColumnStats,
    MatrixSource,
    centered_gram,
    column_statistics,
    top_singular_triplets,
)

DEFAULT_KAPPA_MAX_QUERIES = 1024
DEFAULT_SVD_K = 8


class KappaResult(NamedTuple):
    kappa: float
    used: int
    exact: bool
    degenerate: int


class EnergyResult(NamedTuple):
    sigmas: np.ndarray
    ratios: np.ndarray
    r_trailing: float
    frobenius_sq: float
    svd: dict


def select_queries(n_cols: int, max_queries: int, seed: int) -> np.ndarray:
    """All columns when ``n_cols <= max_queries``, else a sorted seed-deterministic uniform subset."""
    if max_queries < 2:
        raise InputError("max_queries must be at least 2")
    if n_cols <= max_queries:
        return np.arange(n_cols)
    rng = np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), 0x4B41]))
    return np.sort(rng.choice(n_cols, size=max_queries, replace=False))


def _kappa_from_stats(S: MatrixSource, stats: ColumnStats, max_queries: int, seed: int, step) -> KappaResult:
    m, t = S.shape
    if t < 2:
        raise InputError("kappa needs at least 2 query columns")
    cols = select_queries(t, max_queries, seed)
    keep = cols[~stats.constant[cols]]
    degenerate = int(len(cols) - len(keep))
    if len(keep) < 2:
        raise NumericError(f"kappa undefined: {len(keep)} non-degenerate columns among {len(cols)} sampled")
    G = centered_gram(S, keep, stats.means, step)
    sd = np.sqrt(np.diag(G))
    C = np.clip(G / np.outer(sd, sd), -1.0, 1.0)
    n = len(keep)
    off = np.abs(C)
    np.fill_diagonal(off, 0.0)
    kappa = float(off.sum() / (n * (n - 1)))
    return KappaResult(kappa, int(len(cols)), len(cols) == t, degenerate)


def mean_abs_inter_query_correlation(
    S: MatrixSource, max_queries: int = DEFAULT_KAPPA_MAX_QUERIES, seed: int = 0, *, step: int | None = None
) -> KappaResult:
    """kappa = mean |corr| over ordered pairs of distinct, non-constant query columns.

    Constant columns are dropped before pairing and counted in ``degenerate``.
    """
    stats = column_statistics(S, step)
    return _kappa_from_stats(S, stats, max_queries, seed, step)


def _energy(S: MatrixSource, frob_sq: float, k: int, exact: bool, seed: int, step, method: str | None) -> EnergyResult:
    if k < 5:
        raise InputError("k must be at least 5 to report r_2:5")
    if frob_sq <= 0:
        raise NumericError("zero matrix: singular energy ratios undefined")
    method = method or ("exact" if exact else "auto")
    res = top_singular_triplets(S, k, method=method, seed=seed, step=step, need_u=False)
    ratios = res.s**2 / frob_sq
    return EnergyResult(res.s, ratios, float(ratios[1:5].sum()), frob_sq, res.info())


def singular_energy_ratios(
    S: MatrixSource,
    k: int = DEFAULT_SVD_K,
    exact: bool = False,
    seed: int = 0,
    *,
    method: str | None = None,
    step: int | None = None,
) -> EnergyResult:
    """Top-k singular values and their shares of the squared Frobenius norm.

    The norm comes from direct (compensated) summation, not from the spectrum.
    When ``min(M, T) < k`` only the available components are returned.
    """
    stats = column_statistics(S, step)
    return _energy(S, stats.frobenius_sq, k, exact, seed, step, method)


def _concentration(stats: ColumnStats) -> tuple[float, int]:
    zero = stats.sumsq == 0
    safe = np.where(zero, 1.0, stats.sumsq)
    terms = np.where(zero, 0.0, stats.sums**2 / (stats.n_rows * safe))
    # A constant nonzero column is all mean; pin its term to 1 instead of a rounded ratio.
    terms = np.where(stats.constant & ~zero, 1.0, terms)
    return float(np.clip(terms.mean(), 0.0, 1.0)), int(zero.sum())


def mean_concentration_ratio(S: MatrixSource, *, step: int | None = None) -> float:
    """p = mean_j M mu_j^2 / ||S_j||^2 from a single streaming pass (all-zero columns contribute 0)."""
    return _concentration(column_statistics(S, step))[0]


@dataclass
class DiagnoseConfig:
    kappa_max_queries: int = DEFAULT_KAPPA_MAX_QUERIES
    svd_k: int = DEFAULT_SVD_K
    exact_svd: bool = False
    svd_method: str | None = None
    seed: int = 0
    block_rows: int | None = None


@dataclass
class ReliabilityReport:
    kappa: float | None
    kappa_query_subsample: int | str
    singular_values: list[float]
    energy_ratios: list[float]
    r_trailing: float
    frobenius_sq: float
    p: float
    degenerate_columns: int
    zero_columns: int
    shape: tuple[int, int]
    precision: str
    svd: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def r1(self) -> float:
        return self.energy_ratios[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r1"] = self.r1
        d["r2_5"] = self.r_trailing
        d["shape"] = list(self.shape)
        return d


def diagnose(S: ScoreMatrix, config: DiagnoseConfig | None = None) -> ReliabilityReport:
    """kappa, r_1..r_k, r_2:5 and p with shared streaming passes.

    An undefined kappa (fewer than two non-constant columns) is reported as
    ``None`` with a note rather than raised.
    """
    cfg = config or DiagnoseConfig()
    step = cfg.block_rows
    stats = column_statistics(S, step)
    notes = []
    try:
        kr = _kappa_from_stats(S, stats, cfg.kappa_max_queries, cfg.seed, step)
        kappa, used, exact, degenerate = kr.kappa, kr.used, kr.exact, kr.degenerate
    except (NumericError, InputError) as exc:
        kappa, used, exact = None, 0, True
        degenerate = int(stats.constant.sum())
        notes.append(f"kappa undefined: {exc}")
    energy = _energy(S, stats.frobenius_sq, cfg.svd_k, cfg.exact_svd, cfg.seed, step, cfg.svd_method)
    p, zero_cols = _concentration(stats)
    if zero_cols:
        notes.append(f"{zero_cols} all-zero columns contribute 0 to p")
    return ReliabilityReport(
        kappa=kappa,
        kappa_query_subsample="exact" if exact else used,
        singular_values=[float(x) for x in energy.sigmas],
        energy_ratios=[float(x) for x in energy.ratios],
        r_trailing=energy.r_trailing,
        frobenius_sq=energy.frobenius_sq,
        p=p,
        degenerate_columns=degenerate,
        zero_columns=zero_cols,
        shape=S.shape,
        precision=getattr(S, "precision", "float64"),
        svd=energy.svd,
        notes=notes,
    )
