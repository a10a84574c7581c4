"""Alignment of the dominant retrieval axis u1 with per-channel musical features."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from aria.data import FeatureSet, ScoreMatrix
from aria.errors import InputError, NumericError
from aria.linalg import top_singular_triplets

PINV_RCOND = 1e-10


def leading_left_singular_vector(S_track: ScoreMatrix, *, method: str = "auto", seed: int = 0) -> np.ndarray:
    """Unit-norm u1 with its largest-magnitude entry made positive."""
    res = top_singular_triplets(S_track, 1, method=method, seed=seed)
    if res.s[0] <= 0:
        raise NumericError("sigma_1 = 0: leading singular vector undefined")
    u = res.u[:, 0]
    return u / np.linalg.norm(u)


def _abs_corr_columns(u: np.ndarray, X: np.ndarray) -> np.ndarray:
    """|corr(u, X[:, j])| per column; NaN for constant columns."""
    uc = u - u.mean()
    Xc = X - X.mean(axis=0)
    num = uc @ Xc
    den = np.linalg.norm(uc) * np.linalg.norm(Xc, axis=0)
    const = np.ptp(X, axis=0) == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.abs(num / den)
    r[const] = np.nan
    return np.clip(r, 0.0, 1.0)


def ols_sqrt_r2(y: np.ndarray, X: np.ndarray, rcond: float = PINV_RCOND) -> float:
    """sqrt(R^2) of least squares of y on [1, X] via a cutoff pseudo-inverse."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
    yc = y - y.mean()
    sst = float(yc @ yc)
    if sst == 0:
        raise NumericError("response has zero variance")
    Xc = X - X.mean(axis=0)
    scale = np.linalg.norm(Xc, axis=0)
    live = scale > 0
    if not live.any():
        return 0.0
    Xs = Xc[:, live] / scale[live]
    beta = np.linalg.pinv(Xs, rcond=rcond) @ yc
    resid = yc - Xs @ beta
    r2 = 1.0 - float(resid @ resid) / sst
    return float(np.sqrt(np.clip(r2, 0.0, 1.0)))


@dataclass
class ChannelAlignment:
    channel: str
    alpha_max: float
    max_feature: str | None
    max_dim: int | None
    alpha_reg: float
    reg_group: str | None
    n_tracks: int
    excluded_features: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _aligned_rows(row_ids: Sequence[str], fs: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
    """Positions in u1 and in fs.tracks of tracks that have features."""
    pos_u, pos_f = [], []
    for i, t in enumerate(row_ids):
        j = fs.index.get(t)
        if j is not None and t not in fs.missing:
            pos_u.append(i)
            pos_f.append(j)
    return np.asarray(pos_u, dtype=np.int64), np.asarray(pos_f, dtype=np.int64)


def axis_channel_alignment(u1: np.ndarray, row_ids: Sequence[str], fs: FeatureSet, channel: str) -> ChannelAlignment:
    """alpha_max = max |corr(u1, psi_d)| over scalar dimensions; alpha_reg = max sqrt(R^2) over feature groups.

    Sequence-valued features have no per-track vector and are excluded.
    """
    u1 = np.asarray(u1, dtype=np.float64)
    if len(u1) != len(row_ids):
        raise InputError(f"u1 has {len(u1)} entries for {len(row_ids)} tracks")
    specs = fs.channels().get(channel)
    if specs is None:
        raise InputError(f"unknown channel {channel!r}")
    pos_u, pos_f = _aligned_rows(row_ids, fs)
    if len(pos_u) < 3:
        raise InputError(f"channel {channel!r}: fewer than 3 tracks with features")
    u = u1[pos_u]
    excluded = [s.id for s in specs if s.is_sequence]
    vec_specs = [s for s in specs if not s.is_sequence]
    best = (-1.0, None, None)
    groups: dict[str, list[np.ndarray]] = {}
    for spec in vec_specs:
        X = fs.vectors[spec.id][pos_f]
        r = _abs_corr_columns(u, X)
        if np.isfinite(r).any():
            j = int(np.nanargmax(r))
            if r[j] > best[0]:
                best = (float(r[j]), spec.id, j)
        groups.setdefault(spec.group, []).append(X)
    if best[1] is None:
        raise InputError(f"channel {channel!r}: no usable vector feature dimension")
    best_reg = (-1.0, None)
    for name, blocks in groups.items():
        val = ols_sqrt_r2(u, np.hstack(blocks))
        if val > best_reg[0]:
            best_reg = (val, name)
    return ChannelAlignment(
        channel=channel,
        alpha_max=min(1.0, best[0]),
        max_feature=best[1],
        max_dim=best[2],
        alpha_reg=min(1.0, best_reg[0]),
        reg_group=best_reg[1],
        n_tracks=int(len(pos_u)),
        excluded_features=excluded,
    )


@dataclass
class AlignmentReport:
    channels: dict[str, ChannelAlignment]
    u1_norm: float
    n_rows: int
    missing_tracks: int

    def to_dict(self) -> dict:
        return {
            "u1_norm_check": self.u1_norm,
            "n_rows": self.n_rows,
            "missing_tracks": self.missing_tracks,
            "channels": {c: a.to_dict() for c, a in self.channels.items()},
        }


def align(S_track: ScoreMatrix, fs: FeatureSet, channels: Sequence[str] | None = None, *, seed: int = 0) -> AlignmentReport:
    u1 = leading_left_singular_vector(S_track, seed=seed)
    names = list(channels) if channels is not None else list(fs.channels())
    pos_u, _ = _aligned_rows(S_track.row_ids, fs)
    out = {}
    for c in names:
        specs = fs.channels().get(c, [])
        if specs and all(s.is_sequence for s in specs):
            continue
        out[c] = axis_channel_alignment(u1, S_track.row_ids, fs, c)
    return AlignmentReport(out, float(np.linalg.norm(u1)), S_track.shape[0], S_track.shape[0] - len(pos_u))
