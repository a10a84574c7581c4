"""Synthetic score matrices and feature tables with planted structure, plus brute-force oracles.

Regimes
-------
collapsed-rank1
    ``S = s * u v^T + (1 - s) * E`` (each part scaled to equal Frobenius norm).
    ``u`` is elevated on the planted group, so every query retrieves it.
    Rows of the planted group are almost fully explained by the axis: their
    query-dependent part ``E`` is damped by ``planted_noise_scale``.
offset-dominated
    ``S = offset * 1 mu^T + signal * E``: near-constant columns.
query-dependent
    Noise plus, for each query, an elevation on its own random group.
iid-noise
    Standard normal entries.

All regimes add ``noise * G`` (iid standard normal) per segment. Random draws
use Philox generators keyed by ``(seed, stream)`` so every entity's values are
independent of generation order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla

from aria.data import (
    SEQUENCE_KIND,
    VECTOR_KIND,
    FeatureSet,
    FeatureSpec,
    ScoreMatrix,
    SegmentMap,
    make_feature_set,
    write_asm1_stream,
)
from aria.errors import InputError

REGIMES = ("collapsed-rank1", "offset-dominated", "query-dependent", "iid-noise")

# Regime thresholds used to label diagnose() output. Bench constants with margin
# around the collapsed (r1 >= 0.77) vs query-dependent (r1 <= 0.28) gap.
OFFSET_P = 0.8
COLLAPSED_R1 = 0.8
QUERY_KAPPA = 0.1
QUERY_R1 = 0.2

ORACLE_MAX_ENTRIES = 10**6

# Streams for the keyed generators.
_U, _V, _PLANT, _E, _G, _MU, _QGROUP, _SEGS = range(1, 9)
_GEN_BLOCK = 4096


def _rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), (stream << 40) | index]))


def _normal_rows(seed: int, stream: int, n_rows: int, n_cols: int) -> np.ndarray:
    """Standard normal rows generated in fixed-size keyed blocks."""
    out = np.empty((n_rows, n_cols))
    for b, i0 in enumerate(range(0, n_rows, _GEN_BLOCK)):
        i1 = min(n_rows, i0 + _GEN_BLOCK)
        out[i0:i1] = _rng(seed, stream, b).standard_normal((i1 - i0, n_cols))
    return out


@dataclass
class PlantedSpec:
    regime: str
    M: int
    T: int
    seed: int
    N: int | None = None
    collapse_strength: float = 1.0
    noise: float = 0.0
    planted_size: int | None = None
    elevation: float = 4.0
    planted_noise_scale: float = 0.1
    offset: float = 5.0
    signal: float = 0.1
    group_size: int | None = None
    precision: str = "float64"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise InputError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.M < 1 or self.T < 1:
            raise InputError("M and T must be positive")
        if self.N is not None and not 1 <= self.N <= self.M:
            raise InputError(f"inconsistent spec: N={self.N} tracks for M={self.M} segments")
        if not 0.0 <= self.collapse_strength <= 1.0:
            raise InputError("collapse_strength must lie in [0, 1]")
        if self.noise < 0 or self.planted_noise_scale < 0:
            raise InputError("noise levels must be non-negative")
        n = self.n_tracks
        if self.planted_size is not None and not 1 <= self.planted_size <= n:
            raise InputError(f"planted_size must lie in [1, {n}]")
        if self.group_size is not None and not 1 <= self.group_size <= n:
            raise InputError(f"group_size must lie in [1, {n}]")

    @property
    def n_tracks(self) -> int:
        return self.N if self.N is not None else self.M

    @property
    def n_planted(self) -> int:
        return self.planted_size if self.planted_size is not None else max(2, self.n_tracks // 10)


class BenchMatrix(NamedTuple):
    matrix: ScoreMatrix
    truth: dict
    segment_map: SegmentMap


def track_ids(n: int) -> list[str]:
    width = len(str(max(n - 1, 0)))
    return [f"t{i:0{width}d}" for i in range(n)]


def _segments(spec: PlantedSpec, tracks: list[str]) -> tuple[np.ndarray, list[str], SegmentMap]:
    n = len(tracks)
    if spec.N is None or spec.N == spec.M:
        return np.arange(n), list(tracks), SegmentMap.identity(tracks)
    extra = _rng(spec.seed, _SEGS).multinomial(spec.M - n, np.full(n, 1.0 / n))
    sizes = 1 + extra
    owner = np.repeat(np.arange(n), sizes)
    seg_ids, pairs = [], []
    for i, size in enumerate(sizes):
        for k in range(size):
            sid = f"{tracks[i]}_s{k}"
            seg_ids.append(sid)
            pairs.append((sid, tracks[i]))
    return owner, seg_ids, SegmentMap.from_pairs(pairs)


def planted_indices(spec: PlantedSpec) -> np.ndarray:
    return np.sort(_rng(spec.seed, _PLANT).choice(spec.n_tracks, size=spec.n_planted, replace=False))


def _unit_scale(x_norm: float) -> float:
    return 1.0 / x_norm if x_norm > 0 else 0.0


def _track_blocks(spec: PlantedSpec, sizes: np.ndarray, truth: dict):
    """Yield ``(row offset, block)`` of the track-level matrix in keyed row blocks.

    ``sizes`` (segments per track) weights the norms so that the segment-level
    matrix, not the track-level one, has the documented scaling.
    """
    n, t = spec.n_tracks, spec.T
    m = int(sizes.sum())
    scale = np.sqrt(m * t)
    pidx = planted_indices(spec)
    pmask = np.zeros(n, dtype=bool)
    pmask[pidx] = True
    starts = range(0, n, _GEN_BLOCK)

    def noise_block(b, i0, i1):
        return _rng(spec.seed, _E, b).standard_normal((i1 - i0, t))

    if spec.regime == "collapsed-rank1":
        u = _rng(spec.seed, _U).standard_normal(n)
        u[pmask] = spec.elevation + 0.1 * _rng(spec.seed, _U, 1).standard_normal(pmask.sum())
        v = np.maximum(1.0 + 0.2 * _rng(spec.seed, _V).standard_normal(t), 0.2)
        w = np.where(pmask, spec.planted_noise_scale, 1.0)
        l_norm = np.sqrt(np.sum(sizes * u**2)) * np.linalg.norm(v)
        e_sq = 0.0
        for b, i0 in enumerate(starts):
            i1 = min(n, i0 + _GEN_BLOCK)
            e = noise_block(b, i0, i1) * w[i0:i1, None]
            e_sq += float(np.sum(sizes[i0:i1, None] * e * e))
        s = spec.collapse_strength
        a = scale * s * _unit_scale(l_norm)
        c = scale * (1.0 - s) * _unit_scale(np.sqrt(e_sq))
        truth["planted_r1"] = s**2 / (s**2 + (1.0 - s) ** 2)
        truth["expected_regime"] = "collapsed-rank1"
        for b, i0 in enumerate(starts):
            i1 = min(n, i0 + _GEN_BLOCK)
            yield i0, a * np.outer(u[i0:i1], v) + c * noise_block(b, i0, i1) * w[i0:i1, None]
    elif spec.regime == "offset-dominated":
        mu = 1.0 + 0.5 * _rng(spec.seed, _MU).random(t)
        truth["expected_regime"] = "offset-dominated"
        for b, i0 in enumerate(starts):
            i1 = min(n, i0 + _GEN_BLOCK)
            block = np.tile(spec.offset * mu, (i1 - i0, 1))
            if spec.signal:
                block += spec.signal * noise_block(b, i0, i1)
            yield i0, block
    elif spec.regime == "query-dependent":
        g = spec.group_size if spec.group_size is not None else max(2, n // 20)
        groups = [np.sort(_rng(spec.seed, _QGROUP, j).choice(n, size=g, replace=False)) for j in range(t)]
        rows = np.concatenate(groups)
        cols = np.repeat(np.arange(t), g)
        order = np.argsort(rows, kind="stable")
        rows, cols = rows[order], cols[order]
        truth["query_groups"] = [[int(i) for i in grp] for grp in groups]
        truth["expected_regime"] = "query-dependent"
        for b, i0 in enumerate(starts):
            i1 = min(n, i0 + _GEN_BLOCK)
            block = noise_block(b, i0, i1)
            lo, hi = np.searchsorted(rows, [i0, i1])
            block[rows[lo:hi] - i0, cols[lo:hi]] += spec.elevation
            yield i0, block
    else:
        # Diagnostics certify the absence of collapse/offset, not the presence of
        # signal, so pure noise falls in the same diagnostic class.
        truth["expected_regime"] = "query-dependent"
        for b, i0 in enumerate(starts):
            i1 = min(n, i0 + _GEN_BLOCK)
            yield i0, noise_block(b, i0, i1)


def _col_ids(t: int) -> list[str]:
    return [f"q{j:0{len(str(max(t - 1, 0)))}d}" for j in range(t)]


def _truth_header(spec: PlantedSpec, tracks: list[str]) -> dict:
    return {
        "spec": asdict(spec),
        "regime": spec.regime,
        "planted_group": [tracks[i] for i in planted_indices(spec)],
        "shape": [spec.M, spec.T],
        "n_tracks": spec.n_tracks,
    }


def generate_matrix(spec: PlantedSpec) -> BenchMatrix:
    """Score matrix with planted structure; ``truth`` records what was planted."""
    n, t, m = spec.n_tracks, spec.T, spec.M
    tracks = track_ids(n)
    owner, seg_ids, segmap = _segments(spec, tracks)
    sizes = np.bincount(owner, minlength=n).astype(np.float64)
    truth = _truth_header(spec, tracks)
    X = np.vstack([blk for _, blk in _track_blocks(spec, sizes, truth)])
    if "query_groups" in truth:
        truth["query_groups"] = [[tracks[i] for i in grp] for grp in truth["query_groups"]]
    if owner.shape[0] != n or not np.array_equal(owner, np.arange(n)):
        X = X[owner]
    if spec.noise:
        X = X + spec.noise * _normal_rows(spec.seed, _G, m, t)
    values = X.astype(np.float32 if spec.precision == "float32" else np.float64)
    S = ScoreMatrix(values, tuple(seg_ids), tuple(_col_ids(t)), {"generator": spec.regime})
    return BenchMatrix(S, truth, segmap)


def write_matrix_asm1(spec: PlantedSpec, path) -> dict:
    """Stream a track-indexed (N = M) bench matrix straight to ASM1 without holding it in memory.

    Produces the same values as ``generate_matrix`` for the same spec.
    """
    if spec.N is not None and spec.N != spec.M:
        raise InputError("streaming generation supports one segment per track only")
    n, t = spec.n_tracks, spec.T
    tracks = track_ids(n)
    truth = _truth_header(spec, tracks)
    dtype = np.float32 if spec.precision == "float32" else np.float64

    def blocks():
        for b, (i0, blk) in enumerate(_track_blocks(spec, np.ones(n), truth)):
            if spec.noise:
                blk = blk + spec.noise * _rng(spec.seed, _G, b).standard_normal(blk.shape)
            yield blk.astype(dtype)

    write_asm1_stream(path, (n, t), dtype, tracks, _col_ids(t), blocks())
    if "query_groups" in truth:
        truth["query_groups"] = [[tracks[i] for i in grp] for grp in truth["query_groups"]]
    return truth


def classify_regime(r1: float, kappa: float | None, p: float) -> str:
    if p > OFFSET_P:
        return "offset-dominated"
    if r1 > COLLAPSED_R1:
        return "collapsed-rank1"
    if kappa is not None and kappa < QUERY_KAPPA and r1 < QUERY_R1:
        return "query-dependent"
    return "indeterminate"


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureLayout:
    id: str
    channel: str
    dimension: int | None  # None -> chord-progression sequence
    group: str | None = None


AUDIO_LAYOUT = (
    FeatureLayout("beat_interval_hist", "rhythmic", 16),
    FeatureLayout("onset_interval_hist", "rhythmic", 16),
    FeatureLayout("chroma", "harmonic", 12),
    FeatureLayout("tonnetz", "harmonic", 6),
    FeatureLayout("chord_progression", "harmonic", None),
    FeatureLayout("mfcc", "timbral", 26),
    FeatureLayout("cqt", "timbral", 168),
)

SMALL_LAYOUT = (
    FeatureLayout("beat_interval_hist", "rhythmic", 8),
    FeatureLayout("onset_interval_hist", "rhythmic", 8),
    FeatureLayout("chroma", "harmonic", 12),
    FeatureLayout("tonnetz", "harmonic", 6),
    FeatureLayout("chord_progression", "harmonic", None),
    FeatureLayout("mfcc", "timbral", 26),
)

SEQ_MIN_LEN, SEQ_MAX_LEN = 8, 24


def generate_features(
    N: int,
    channels: Sequence[FeatureLayout] | None = None,
    planted_group: Sequence[str] | Sequence[int] = (),
    coherence: float = 0.0,
    seed: int = 0,
    *,
    tracks: Sequence[str] | None = None,
    coherent_channels: Sequence[str] | None = None,
) -> FeatureSet:
    """Background tracks draw iid standard normal vectors and random chord sequences.

    Planted tracks in a coherent channel draw ``c * centroid + sqrt(1 - c^2) * noise``
    (``c`` = coherence), so c = 1 gives identical values and c = 0 is
    indistinguishable from background. Sequences keep each element of a shared
    base sequence with probability c.
    """
    if not 0.0 <= coherence <= 1.0:
        raise InputError("coherence must lie in [0, 1]")
    layout = tuple(channels) if channels is not None else AUDIO_LAYOUT
    tracks = list(tracks) if tracks is not None else track_ids(N)
    if len(tracks) != N:
        raise InputError(f"{len(tracks)} track ids for N={N}")
    pos = {t: i for i, t in enumerate(tracks)}
    pidx = np.array(sorted(pos[p] if isinstance(p, str) else int(p) for p in planted_group), dtype=np.int64)
    coherent = set(coherent_channels) if coherent_channels is not None else {f.channel for f in layout}
    specs, vectors, sequences = [], {}, {}
    for fi, feat in enumerate(layout):
        active = feat.channel in coherent and len(pidx) > 0
        if feat.dimension is None:
            rng = _rng(seed, 100 + fi)
            lengths = rng.integers(SEQ_MIN_LEN, SEQ_MAX_LEN + 1, size=N)
            seqs = [rng.integers(0, 12, size=L) for L in lengths]
            if active:
                prng = _rng(seed, 200 + fi)
                base = prng.integers(0, 12, size=prng.integers(SEQ_MIN_LEN, SEQ_MAX_LEN + 1))
                for i in pidx:
                    if prng.random() < coherence:
                        length = len(base)
                    else:
                        length = int(prng.integers(SEQ_MIN_LEN, SEQ_MAX_LEN + 1))
                    fresh = prng.integers(0, 12, size=length)
                    keep = prng.random(length) < coherence
                    seqs[i] = np.where(keep, np.resize(base, length), fresh)
            sequences[feat.id] = seqs
            specs.append(FeatureSpec(feat.id, feat.channel, SEQUENCE_KIND, group=feat.group))
            continue
        X = _rng(seed, 100 + fi).standard_normal((N, feat.dimension))
        if active:
            prng = _rng(seed, 200 + fi)
            centroid = prng.standard_normal(feat.dimension)
            spread = prng.standard_normal((len(pidx), feat.dimension))
            X[pidx] = coherence * centroid + np.sqrt(1.0 - coherence**2) * spread
        vectors[feat.id] = X
        specs.append(FeatureSpec(feat.id, feat.channel, VECTOR_KIND, feat.dimension, group=feat.group))
    return make_feature_set(tracks, specs, vectors, sequences)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    am = a - a.mean()
    bm = b - b.mean()
    return float((am @ bm) / np.sqrt((am @ am) * (bm @ bm)))


def oracle_diagnostics(S) -> dict:
    """Exact kappa (explicit pair loop), all energy ratios (full gesvd spectrum) and p."""
    X = np.asarray(S.values if isinstance(S, ScoreMatrix) else S, dtype=np.float64)
    m, t = X.shape
    if m * t > ORACLE_MAX_ENTRIES:
        raise InputError(f"oracle limited to {ORACLE_MAX_ENTRIES} entries, got {m * t}")
    live = [j for j in range(t) if X[:, j].max() != X[:, j].min()]
    kappa = None
    if len(live) >= 2:
        total = 0.0
        for a in live:
            for b in live:
                if a != b:
                    total += abs(_pearson(X[:, a], X[:, b]))
        kappa = min(1.0, total / (len(live) * (len(live) - 1)))
    sigma = sla.svd(X, compute_uv=False, lapack_driver="gesvd")
    energy = float(np.sum(sigma**2))
    ratios = sigma**2 / energy if energy > 0 else np.zeros_like(sigma)
    terms = []
    for j in range(t):
        col = X[:, j]
        sq = float(col @ col)
        terms.append(0.0 if sq == 0 else m * col.mean() ** 2 / sq)
    return {
        "kappa": kappa,
        "kappa_defined": kappa is not None,
        "degenerate_columns": t - len(live),
        "sigmas": sigma,
        "ratios": ratios,
        "r_trailing": float(ratios[1:5].sum()),
        "p": float(np.mean(terms)),
    }
