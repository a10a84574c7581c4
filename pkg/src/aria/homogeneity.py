"""Null-calibrated within-group musical homogeneity.

For each query the top-K tracks form a group; each feature's mean pairwise
similarity is standardized against random groups of the same size, averaged
within a channel, and standardized again at channel level.
"""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from aria.data import FeatureSet, QueryLabels, ScoreMatrix
from aria.errors import InputError
from aria.similarity import SimilarityEngine

log = logging.getLogger(__name__)

DEFAULT_B = 200
DEFAULT_K_LIST = (20, 50, 100, 200, 300, 400, 500)
SIG_THRESHOLD = 1.96
# Null stds at or below this fraction of max(|mean|, 1) count as zero spread.
DEGENERATE_REL_STD = 1e-12


def _rng(seed: int, counter: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), counter & (2**64 - 1)]))


@dataclass(frozen=True)
class TrackGroup:
    query_id: str
    K: int
    track_ids: tuple[str, ...]
    skipped_missing: int = 0


def top_k_group(S_track: ScoreMatrix, query: str, K: int, exclude: Sequence[str] | set[str] = ()) -> TrackGroup:
    """The K highest-scoring tracks for ``query``; ties go to the smaller track id.

    Tracks in ``exclude`` (feature-missing) are skipped and the next-ranked
    track takes their place; the number skipped above the cut is recorded.
    """
    try:
        j = S_track.col_ids.index(query)
    except ValueError:
        raise InputError(f"unknown query {query!r}") from None
    return _top_k(S_track, j, K, _eligible_mask(S_track, exclude), _id_rank(S_track))


def _id_rank(S_track: ScoreMatrix) -> np.ndarray:
    order = sorted(range(len(S_track.row_ids)), key=S_track.row_ids.__getitem__)
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return rank


def _eligible_mask(S_track: ScoreMatrix, exclude) -> np.ndarray:
    exclude = set(exclude)
    return np.array([r not in exclude for r in S_track.row_ids], dtype=bool)


def _top_k(S_track: ScoreMatrix, j: int, K: int, eligible: np.ndarray, id_rank: np.ndarray) -> TrackGroup:
    col = np.asarray(S_track.values[:, j], dtype=np.float64)
    cand = np.flatnonzero(eligible)
    if K > len(cand):
        raise InputError(f"K={K} exceeds the {len(cand)} available tracks")
    if K < len(cand):
        vals = col[cand]
        kth = np.partition(vals, len(vals) - K)[len(vals) - K]
        cand = cand[vals >= kth]
    order = np.lexsort((id_rank[cand], -col[cand]))
    chosen = cand[order[:K]]
    # Count excluded tracks that would have ranked inside the group.
    cutoff = col[chosen[-1]]
    excluded = ~eligible
    skipped = int(np.sum(excluded & (col > cutoff)) + np.sum(excluded & (col == cutoff) & (id_rank < id_rank[chosen[-1]])))
    ids = tuple(S_track.row_ids[i] for i in chosen)
    return TrackGroup(S_track.col_ids[j], K, ids, skipped)


def group_similarity(group: TrackGroup, spec, fs: FeatureSet, engine: SimilarityEngine | None = None) -> float:
    """g_d: mean similarity over all unordered pairs in the group."""
    if group.K < 2 or len(group.track_ids) < 2:
        raise InputError("group similarity needs K >= 2")
    idx = _group_index(group, fs)
    engine = engine or SimilarityEngine(fs, [spec])
    return engine.g(spec.id, idx)


def _group_index(group: TrackGroup, fs: FeatureSet) -> np.ndarray:
    try:
        idx = np.array([fs.index[t] for t in group.track_ids], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"track {exc.args[0]!r} has no features") from None
    missing = [t for t in group.track_ids if t in fs.missing]
    if missing:
        raise InputError(f"group contains feature-missing tracks {missing[:5]}")
    return idx


@dataclass(frozen=True, eq=False)
class NullModel:
    """Per-feature and per-channel null statistics for groups of size K."""

    K: int
    B: int
    seed: int
    feature_ids: tuple[str, ...]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    channels: tuple[str, ...]
    channel_features: Mapping[str, tuple[str, ...]]
    channel_mean: np.ndarray
    channel_std: np.ndarray
    degenerate_features: tuple[str, ...]
    degenerate_channels: tuple[str, ...]
    pool_size: int
    group_g: np.ndarray = field(repr=False)

    def feature_stats(self, fid: str) -> tuple[float, float]:
        i = self.feature_ids.index(fid)
        return float(self.feature_mean[i]), float(self.feature_std[i])

    def channel_stats(self, channel: str) -> tuple[float, float]:
        i = self.channels.index(channel)
        return float(self.channel_mean[i]), float(self.channel_std[i])

    @property
    def identity(self) -> str:
        h = hashlib.sha256()
        h.update(f"K={self.K};B={self.B};seed={self.seed};pool={self.pool_size};".encode())
        h.update(";".join(self.feature_ids).encode())
        h.update(np.ascontiguousarray(self.group_g).tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "B": self.B,
            "seed": self.seed,
            "pool_size": self.pool_size,
            "identity": self.identity,
            "std_form": "population",
            "features": {
                f: {"mean": float(m), "std": float(s)}
                for f, m, s in zip(self.feature_ids, self.feature_mean, self.feature_std)
            },
            "channels": {
                c: {"mean": float(m), "std": float(s), "features": list(self.channel_features[c])}
                for c, m, s in zip(self.channels, self.channel_mean, self.channel_std)
            },
            "degenerate_features": list(self.degenerate_features),
            "degenerate_channels": list(self.degenerate_channels),
        }


def _channel_map(fs: FeatureSet, channels: Sequence[str] | None) -> dict[str, list[str]]:
    all_channels = fs.channels()
    names = list(channels) if channels is not None else list(all_channels)
    unknown = [c for c in names if c not in all_channels]
    if unknown:
        raise InputError(f"unknown channels {unknown}")
    return {c: [f.id for f in all_channels[c]] for c in names}


def _degenerate(mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return std <= DEGENERATE_REL_STD * np.maximum(np.abs(mean), 1.0)


def _standardized_channels(g: np.ndarray, fids, mean, std, deg, cmap) -> np.ndarray:
    """Rows of g (groups x features) -> mean standardized g per channel (groups x channels)."""
    g = np.atleast_2d(g)
    safe = np.where(deg, 1.0, std)
    zf = (g - mean) / safe
    out = np.full((g.shape[0], len(cmap)), np.nan)
    for ci, feats in enumerate(cmap.values()):
        cols = [fids.index(f) for f in feats if not deg[fids.index(f)]]
        if cols:
            out[:, ci] = zf[:, cols].mean(axis=1)
    return out


def sample_null_groups(pool: np.ndarray, K: int, B: int, seed: int) -> list[np.ndarray]:
    """B groups of K distinct pool members; group b uses the RNG keyed (seed, b)."""
    return [pool[_rng(seed, b).choice(len(pool), size=K, replace=False)] for b in range(B)]


def build_null_model(
    fs: FeatureSet,
    channels: Sequence[str] | None,
    K: int,
    B: int = DEFAULT_B,
    seed: int = 0,
    *,
    engine: SimilarityEngine | None = None,
    groups: Sequence[Sequence[int]] | None = None,
    workers: int = 1,
) -> NullModel:
    """Estimate null means/stds of g_d and of the channel score over B random groups.

    ``groups`` overrides sampling with explicit index groups (testing aid).
    """
    cmap = _channel_map(fs, channels)
    fids = [f for feats in cmap.values() for f in feats]
    specs = [fs.spec(f) for f in fids]
    pool = np.flatnonzero(fs.usable_mask())
    if B < 2:
        raise InputError("B must be at least 2")
    if K < 2:
        raise InputError("K must be at least 2")
    if groups is None:
        if K > len(pool):
            raise InputError(f"K={K} exceeds the usable track pool ({len(pool)})")
        groups = sample_null_groups(pool, K, B, seed)
    else:
        groups = [np.asarray(g, dtype=np.int64) for g in groups]
        if len(groups) != B or any(len(g) != K for g in groups):
            raise InputError("explicit groups must be B groups of size K")
    engine = engine or SimilarityEngine(fs, specs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(lambda idx: np.array([engine.g(f, idx) for f in fids]), groups))
    else:
        rows = [np.array([engine.g(f, idx) for f in fids]) for idx in groups]
    G = np.vstack(rows)
    mean = G.mean(axis=0)
    std = G.std(axis=0)
    deg = _degenerate(mean, std)
    if deg.any():
        log.warning("degenerate null features (zero spread): %s", [f for f, d in zip(fids, deg) if d])
    gc = _standardized_channels(G, fids, mean, std, deg, cmap)
    cmean = gc.mean(axis=0)
    cstd = gc.std(axis=0)
    cdeg = np.isnan(cmean) | _degenerate(np.nan_to_num(cmean), np.nan_to_num(cstd))
    return NullModel(
        K=K,
        B=B,
        seed=seed,
        feature_ids=tuple(fids),
        feature_mean=mean,
        feature_std=std,
        channels=tuple(cmap),
        channel_features={c: tuple(v) for c, v in cmap.items()},
        channel_mean=cmean,
        channel_std=cstd,
        degenerate_features=tuple(f for f, d in zip(fids, deg) if d),
        degenerate_channels=tuple(c for c, d in zip(cmap, cdeg) if d),
        pool_size=len(pool),
        group_g=G,
    )


def channel_z_from_g(g: np.ndarray, null: NullModel) -> np.ndarray:
    """Channel z-scores for rows of raw g values ordered like ``null.feature_ids``."""
    fids = list(null.feature_ids)
    deg = np.array([f in null.degenerate_features for f in fids])
    cmap = {c: list(null.channel_features[c]) for c in null.channels}
    gc = _standardized_channels(g, fids, null.feature_mean, null.feature_std, deg, cmap)
    cdeg = np.array([c in null.degenerate_channels for c in null.channels])
    safe = np.where(cdeg, 1.0, null.channel_std)
    z = (gc - null.channel_mean) / safe
    z[:, cdeg] = np.nan
    return z


def channel_z(group: TrackGroup, channel: str, fs: FeatureSet, null: NullModel, engine: SimilarityEngine | None = None) -> float:
    """z_c = (g~_c - mu_c) / sigma_c with g~_c the mean per-feature standardized g_d."""
    if group.K != null.K:
        raise InputError(f"group size K={group.K} does not match null model K={null.K}")
    if channel not in null.channels:
        raise InputError(f"channel {channel!r} not in null model")
    idx = _group_index(group, fs)
    engine = engine or SimilarityEngine(fs, [fs.spec(f) for f in null.feature_ids])
    g = np.array([engine.g(f, idx) for f in null.feature_ids])
    return float(channel_z_from_g(g, null)[0, null.channels.index(channel)])


@dataclass(frozen=True)
class Summary:
    n: int
    z_mean: float
    pos: float
    sig: float

    def to_dict(self) -> dict:
        return {"n": self.n, "z_mean": self.z_mean, "pos": self.pos, "sig": self.sig}


def summarize(z_values, threshold: float = SIG_THRESHOLD) -> Summary:
    """Across-query mean z, fraction with z > 0, fraction with z > threshold (both strict)."""
    z = np.asarray(z_values, dtype=np.float64).ravel()
    if z.size == 0:
        raise InputError("cannot summarize an empty list of z-scores")
    return Summary(int(z.size), float(z.mean()), float(np.mean(z > 0)), float(np.mean(z > threshold)))


def stratify_summary(z_values: Mapping[str, float], labels: QueryLabels, threshold: float = SIG_THRESHOLD) -> dict:
    """Per-label summaries over labeled queries; also reports how many were unlabeled."""
    by_label: dict[str, list[float]] = {}
    unlabeled = 0
    for q, z in z_values.items():
        lab = labels.labels.get(q)
        if lab is None:
            unlabeled += 1
        else:
            by_label.setdefault(lab, []).append(z)
    strata = {lab: summarize(v, threshold) for lab, v in sorted(by_label.items())}
    means = np.array([s.z_mean for s in strata.values()])
    return {
        "strata": strata,
        "unlabeled": unlabeled,
        "n_labeled": sum(s.n for s in strata.values()),
        "across_label_std": float(means.std()) if len(means) else float("nan"),
    }


@dataclass
class HomogeneityReport:
    K: int
    channels: tuple[str, ...]
    query_ids: tuple[str, ...]
    z: np.ndarray  # queries x channels
    summaries: dict[str, Summary]
    null_identity: str
    normalization: str | None = None
    threshold: float = SIG_THRESHOLD
    skipped_missing: int = 0
    strata: dict[str, dict] | None = None

    def z_by_query(self, channel: str) -> dict[str, float]:
        ci = self.channels.index(channel)
        return {q: float(v) for q, v in zip(self.query_ids, self.z[:, ci])}

    def to_dict(self, include_per_query: bool = True) -> dict:
        d = {
            "K": self.K,
            "normalization": self.normalization,
            "threshold": self.threshold,
            "null_identity": self.null_identity,
            "skipped_missing": self.skipped_missing,
            "channels": {c: self.summaries[c].to_dict() for c in self.channels},
        }
        if include_per_query:
            d["per_query"] = {c: self.z_by_query(c) for c in self.channels}
        if self.strata is not None:
            d["strata"] = {
                c: {
                    "unlabeled": s["unlabeled"],
                    "n_labeled": s["n_labeled"],
                    "across_label_std": s["across_label_std"],
                    "labels": {lab: v.to_dict() for lab, v in s["strata"].items()},
                }
                for c, s in self.strata.items()
            }
        return d


def query_groups(S_track: ScoreMatrix, fs: FeatureSet, K: int, queries: Sequence[str] | None = None) -> list[TrackGroup]:
    exclude = {r for r in S_track.row_ids if r not in fs.index or r in fs.missing}
    eligible = _eligible_mask(S_track, exclude)
    id_rank = _id_rank(S_track)
    cols = range(S_track.shape[1]) if queries is None else [S_track.col_ids.index(q) for q in queries]
    return [_top_k(S_track, j, K, eligible, id_rank) for j in cols]


def homogeneity_for_k(
    S_track: ScoreMatrix,
    fs: FeatureSet,
    null: NullModel,
    *,
    queries: Sequence[str] | None = None,
    labels: QueryLabels | None = None,
    threshold: float = SIG_THRESHOLD,
    engine: SimilarityEngine | None = None,
    workers: int = 1,
) -> HomogeneityReport:
    groups = query_groups(S_track, fs, null.K, queries)
    engine = engine or SimilarityEngine(fs, [fs.spec(f) for f in null.feature_ids])
    fids = list(null.feature_ids)

    def evaluate(group: TrackGroup) -> np.ndarray:
        idx = np.array([fs.index[t] for t in group.track_ids], dtype=np.int64)
        return np.array([engine.g(f, idx) for f in fids])

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(evaluate, groups))
    else:
        rows = [evaluate(g) for g in groups]
    G = np.vstack(rows) if rows else np.zeros((0, len(fids)))
    z = channel_z_from_g(G, null)
    live = [c for c in null.channels if c not in null.degenerate_channels]
    keep = [null.channels.index(c) for c in live]
    z = z[:, keep]
    qids = tuple(g.query_id for g in groups)
    summaries = {c: summarize(z[:, i], threshold) for i, c in enumerate(live)}
    strata = None
    if labels is not None:
        strata = {
            c: stratify_summary(dict(zip(qids, z[:, i])), labels, threshold) for i, c in enumerate(live)
        }
    return HomogeneityReport(
        K=null.K,
        channels=tuple(live),
        query_ids=qids,
        z=z,
        summaries=summaries,
        null_identity=null.identity,
        normalization=S_track.meta.get("normalization") if S_track.meta else None,
        threshold=threshold,
        skipped_missing=sum(g.skipped_missing for g in groups),
        strata=strata,
    )


def build_null_models(
    fs: FeatureSet,
    channels: Sequence[str] | None,
    K_list: Sequence[int],
    B: int = DEFAULT_B,
    seed: int = 0,
    *,
    engine: SimilarityEngine | None = None,
    workers: int = 1,
) -> dict[int, NullModel]:
    cmap = _channel_map(fs, channels)
    engine = engine or SimilarityEngine(fs, [fs.spec(f) for feats in cmap.values() for f in feats])
    return {K: build_null_model(fs, channels, K, B, seed, engine=engine, workers=workers) for K in K_list}


def homogeneity_sweep(
    S_track: ScoreMatrix,
    fs: FeatureSet,
    channels: Sequence[str] | None,
    K_list: Sequence[int] = DEFAULT_K_LIST,
    null_models: Mapping[int, NullModel] | None = None,
    queries: Sequence[str] | None = None,
    *,
    labels: QueryLabels | None = None,
    B: int = DEFAULT_B,
    seed: int = 0,
    threshold: float = SIG_THRESHOLD,
    engine: SimilarityEngine | None = None,
    workers: int = 1,
) -> dict[int, HomogeneityReport]:
    """One HomogeneityReport per K; null models are built on demand when not supplied."""
    cmap = _channel_map(fs, channels)
    engine = engine or SimilarityEngine(fs, [fs.spec(f) for feats in cmap.values() for f in feats])
    nulls = dict(null_models or {})
    out = {}
    for K in K_list:
        if K not in nulls:
            nulls[K] = build_null_model(fs, list(cmap), K, B, seed, engine=engine, workers=workers)
        null = nulls[K]
        if null.K != K:
            raise InputError(f"null model for K={K} was built with K={null.K}")
        out[K] = homogeneity_for_k(
            S_track, fs, null, queries=queries, labels=labels, threshold=threshold, engine=engine, workers=workers
        )
    return out
