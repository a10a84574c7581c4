"""Core data types and their on-disk formats.

Score matrices are stored either as ASM1 binaries (large, memory-mappable) or
as CSV (small). Feature tables are declared by a JSON manifest that points at
per-feature CSV files.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from aria.errors import InputError

log = logging.getLogger(__name__)

ASM1_MAGIC = b"ASM1"
_HEADER = struct.Struct("<4sBBQQ")
_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_PRECISIONS = {"float32": np.float32, "float64": np.float64}

VECTOR_KIND = "standardized-euclidean"
SEQUENCE_KIND = "lcs-sequence"
FEATURE_KINDS = (VECTOR_KIND, SEQUENCE_KIND)

# Files above this size are memory-mapped instead of read into RAM.
MMAP_THRESHOLD_BYTES = 256 * 2**20
# Target working-set size of one row block during streaming passes.
BLOCK_BYTES = 64 * 2**20


def _check_ids(ids: Sequence[str], expected: int, what: str) -> tuple[str, ...]:
    ids = tuple(str(i) for i in ids)
    if len(ids) != expected:
        raise InputError(f"{what}: {len(ids)} ids for dimension {expected}")
    if len(set(ids)) != len(ids):
        seen: set[str] = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise InputError(f"{what}: duplicate id {dup!r}")
    return ids


def block_rows(n_cols: int, itemsize: int = 8, target_bytes: int = BLOCK_BYTES) -> int:
    return max(1, target_bytes // max(1, n_cols * itemsize))


def _first_nonfinite(values: np.ndarray) -> tuple[int, int] | None:
    step = block_rows(values.shape[1], values.dtype.itemsize)
    for i0 in range(0, values.shape[0], step):
        block = np.asarray(values[i0 : i0 + step])
        bad = ~np.isfinite(block)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            return i0 + int(r), int(c)
    return None


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Dense M x T score matrix; rows are segments or tracks, columns are queries.

    ``values`` may be a read-only ``np.memmap`` for matrices loaded from large
    ASM1 files. ``meta`` carries provenance such as the normalization mode.
    """

    values: np.ndarray
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    meta: Mapping[str, object] = field(default_factory=dict)
    check_finite: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise InputError(f"score matrix must be 2-D, got shape {v.shape}")
        if v.dtype not in (np.float32, np.float64):
            v = np.asarray(v, dtype=np.float64)
            object.__setattr__(self, "values", v)
        m, t = v.shape
        if m < 1 or t < 1:
            raise InputError(f"score matrix must be non-empty, got {m}x{t}")
        object.__setattr__(self, "row_ids", _check_ids(self.row_ids, m, "row ids"))
        object.__setattr__(self, "col_ids", _check_ids(self.col_ids, t, "column ids"))
        if isinstance(v, np.ndarray) and not isinstance(v, np.memmap) and v.flags.writeable:
            v = v.view()
            v.flags.writeable = False
            object.__setattr__(self, "values", v)
        if self.check_finite:
            bad = _first_nonfinite(v)
            if bad is not None:
                r, c = bad
                raise InputError(
                    f"non-finite entry {v[r, c]!r} at (row {r} {self.row_ids[r]!r}, col {c} {self.col_ids[c]!r})"
                )

    @classmethod
    def from_array(cls, values, row_ids=None, col_ids=None, meta=None, precision=None) -> "ScoreMatrix":
        arr = np.asarray(values)
        if precision is not None:
            arr = arr.astype(_PRECISIONS[precision], copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.array(arr, copy=True, order="C")
        m, t = arr.shape
        row_ids = row_ids if row_ids is not None else [f"r{i}" for i in range(m)]
        col_ids = col_ids if col_ids is not None else [f"q{j}" for j in range(t)]
        return cls(arr, tuple(row_ids), tuple(col_ids), dict(meta or {}))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def precision(self) -> str:
        return "float32" if self.values.dtype == np.float32 else "float64"

    def with_values(self, values: np.ndarray, row_ids=None, **meta) -> "ScoreMatrix":
        merged = {**self.meta, **meta}
        return ScoreMatrix(values, tuple(row_ids or self.row_ids), self.col_ids, merged, check_finite=False)

    def iter_row_blocks(self, step: int | None = None) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(row_offset, float64 block)`` in fixed row order."""
        m, t = self.shape
        step = step or block_rows(t)
        for i0 in range(0, m, step):
            yield i0, np.asarray(self.values[i0 : i0 + step], dtype=np.float64)

    def column_block(self, j0: int, j1: int) -> np.ndarray:
        return np.asarray(self.values[:, j0:j1], dtype=np.float64)

    def to_dense(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


# ---------------------------------------------------------------------------
# ASM1 / CSV score matrix IO
# ---------------------------------------------------------------------------


def _atomic_path(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    return Path(tmp)


def write_asm1_stream(path, shape: tuple[int, int], dtype, row_ids, col_ids, blocks) -> None:
    """Write an ASM1 file from an iterator of row blocks (used for out-of-core data)."""
    path = Path(path)
    dt = np.dtype(dtype).newbyteorder("<")
    code = {4: 0, 8: 1}[dt.itemsize]
    m, t = shape
    row_ids = _check_ids(row_ids, m, "row ids")
    col_ids = _check_ids(col_ids, t, "column ids")
    tmp = _atomic_path(path)
    try:
        with open(tmp, "wb") as f:
            f.write(_HEADER.pack(ASM1_MAGIC, code, 0, m, t))
            written = 0
            for block in blocks:
                block = np.ascontiguousarray(block, dtype=dt)
                if block.ndim != 2 or block.shape[1] != t:
                    raise InputError(f"row block shape {block.shape} does not match T={t}")
                block.tofile(f)
                written += block.shape[0]
            if written != m:
                raise InputError(f"wrote {written} rows, header declares {m}")
            for ids in (row_ids, col_ids):
                f.write(_U64.pack(len(ids)))
                for s in ids:
                    b = s.encode("utf-8")
                    f.write(_U32.pack(len(b)))
                    f.write(b)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_score_matrix(S: ScoreMatrix, path, format: str = "asm1") -> None:
    path = Path(path)
    if format == "csv":
        tmp = _atomic_path(path)
        with open(tmp, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["row_id", *S.col_ids])
            for rid, row in zip(S.row_ids, S.to_dense()):
                w.writerow([rid, *(repr(float(x)) for x in row)])
        os.replace(tmp, path)
        return
    if format != "asm1":
        raise InputError(f"unknown matrix format {format!r}")
    m, t = S.shape
    step = block_rows(t, S.values.dtype.itemsize)
    blocks = (S.values[i : i + step] for i in range(0, m, step))
    write_asm1_stream(path, S.shape, S.values.dtype, S.row_ids, S.col_ids, blocks)


def _read_ids(buf: bytes, pos: int, what: str) -> tuple[list[str], int]:
    try:
        (count,) = _U64.unpack_from(buf, pos)
        pos += 8
        ids = []
        for _ in range(count):
            (n,) = _U32.unpack_from(buf, pos)
            pos += 4
            raw = buf[pos : pos + n]
            if len(raw) != n:
                raise InputError(f"truncated {what} id block")
            ids.append(raw.decode("utf-8"))
            pos += n
    except struct.error as exc:
        raise InputError(f"truncated {what} id block") from exc
    return ids, pos


def _load_asm1(path: Path, mmap: bool | None, check_finite: bool) -> ScoreMatrix:
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise InputError(f"{path}: truncated ASM1 header")
        magic, code, layout, m, t = _HEADER.unpack(head)
        if magic != ASM1_MAGIC:
            raise InputError(f"{path}: bad magic {magic!r}, expected b'ASM1'")
        if code not in _DTYPE_CODES:
            raise InputError(f"{path}: unknown dtype code {code}")
        if layout != 0:
            raise InputError(f"{path}: unsupported layout code {layout} (only row-major)")
        dt = _DTYPE_CODES[code]
        nbytes = m * t * dt.itemsize
        if size < _HEADER.size + nbytes + 16:
            raise InputError(f"{path}: file too short for declared shape {m}x{t}")
        f.seek(_HEADER.size + nbytes)
        tail = f.read()
    row_ids, pos = _read_ids(tail, 0, "row")
    col_ids, pos = _read_ids(tail, pos, "column")
    if pos != len(tail):
        raise InputError(f"{path}: {len(tail) - pos} trailing bytes after id blocks")
    if len(row_ids) != m or len(col_ids) != t:
        raise InputError(
            f"{path}: dimension mismatch, header {m}x{t} vs ids {len(row_ids)}x{len(col_ids)}"
        )
    use_mmap = mmap if mmap is not None else nbytes >= MMAP_THRESHOLD_BYTES
    if use_mmap:
        values = np.memmap(path, dtype=dt, mode="r", offset=_HEADER.size, shape=(m, t))
    else:
        with open(path, "rb") as f:
            f.seek(_HEADER.size)
            values = np.fromfile(f, dtype=dt, count=m * t).reshape(m, t)
        values = values.astype(dt.newbyteorder("="), copy=False)
    return ScoreMatrix(values, tuple(row_ids), tuple(col_ids), {"source": str(path)}, check_finite=check_finite)


def _load_csv_matrix(path: Path, precision: str) -> ScoreMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or len(rows[0]) < 2:
        raise InputError(f"{path}: malformed header, expected 'row_id,<query ids...>'")
    col_ids = rows[0][1:]
    row_ids, data = [], []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(col_ids) + 1:
            raise InputError(f"{path}:{ln}: expected {len(col_ids) + 1} fields, got {len(row)}")
        row_ids.append(row[0])
        try:
            vals = [float(x) for x in row[1:]]
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: unparsable value ({exc})") from exc
        data.append(vals)
    if not data:
        raise InputError(f"{path}: no data rows")
    values = np.asarray(data, dtype=_PRECISIONS[precision])
    return ScoreMatrix(values, tuple(row_ids), tuple(col_ids), {"source": str(path)})


def load_score_matrix(
    path, format: str | None = None, *, precision: str = "float64", mmap: bool | None = None, check_finite: bool = True
) -> ScoreMatrix:
    """Load and validate a score matrix.

    ``format`` defaults to the file suffix (``.csv`` -> csv, otherwise asm1).
    ASM1 files keep their stored precision; ``precision`` applies to CSV only.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    format = format or ("csv" if path.suffix.lower() == ".csv" else "asm1")
    if format == "asm1":
        return _load_asm1(path, mmap, check_finite)
    if format == "csv":
        return _load_csv_matrix(path, precision)
    raise InputError(f"unknown matrix format {format!r}")


# ---------------------------------------------------------------------------
# Segment map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentMap:
    """Assignment of segments to tracks; track order follows first appearance."""

    assignment: Mapping[str, tuple[str, int]]
    track_sizes: Mapping[str, int]

    def __post_init__(self):
        counts: dict[str, int] = {}
        for seg, (track, _k) in self.assignment.items():
            counts[track] = counts.get(track, 0) + 1
        if counts != dict(self.track_sizes):
            raise InputError("track_sizes disagree with segment assignment")
        if any(n < 1 for n in self.track_sizes.values()):
            raise InputError("every track needs at least one segment")

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> "SegmentMap":
        assignment: dict[str, tuple[str, int]] = {}
        sizes: dict[str, int] = {}
        for seg, track in pairs:
            seg, track = str(seg), str(track)
            if seg in assignment:
                raise InputError(f"segment {seg!r} assigned twice")
            k = sizes.get(track, 0)
            assignment[seg] = (track, k)
            sizes[track] = k + 1
        return cls(assignment, sizes)

    @classmethod
    def identity(cls, ids: Sequence[str]) -> "SegmentMap":
        return cls.from_pairs([(i, i) for i in ids])

    @property
    def tracks(self) -> tuple[str, ...]:
        return tuple(self.track_sizes)

    @property
    def n_segments(self) -> int:
        return len(self.assignment)

    def is_identity(self) -> bool:
        return all(seg == tr for seg, (tr, _) in self.assignment.items())


def load_segment_map(path) -> SegmentMap:
    """CSV with header ``segment_id,track_id`` (an optional third index column is ignored)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows or [c.strip() for c in rows[0][:2]] != ["segment_id", "track_id"]:
        raise InputError(f"{path}: header must start with 'segment_id,track_id'")
    pairs = []
    for ln, r in enumerate(rows[1:], start=2):
        if len(r) < 2:
            raise InputError(f"{path}:{ln}: expected segment_id,track_id")
        pairs.append((r[0], r[1]))
    return SegmentMap.from_pairs(pairs)


def write_segment_map(segmap: SegmentMap, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["segment_id", "track_id", "index"])
        for seg, (track, k) in segmap.assignment.items():
            w.writerow([seg, track, k])


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureSpec:
    id: str
    channel: str
    kind: str
    dimension: int | None = None
    std_vector: np.ndarray | None = None
    group: str | None = None
    degenerate_dims: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.channel:
            raise InputError(f"feature {self.id!r}: empty channel")
        if self.kind not in FEATURE_KINDS:
            raise InputError(f"feature {self.id!r}: unknown kind {self.kind!r}")
        if self.kind == VECTOR_KIND:
            if self.dimension is None or self.dimension < 1:
                raise InputError(f"feature {self.id!r}: vector features need dimension >= 1")
            if self.std_vector is not None:
                std = np.asarray(self.std_vector, dtype=np.float64)
                if std.shape != (self.dimension,):
                    raise InputError(f"feature {self.id!r}: std vector length {std.size} != {self.dimension}")
                if (std < 0).any() or not np.isfinite(std).all():
                    raise InputError(f"feature {self.id!r}: negative or non-finite std entry")
                object.__setattr__(self, "std_vector", std)
        if self.group is None:
            object.__setattr__(self, "group", self.id)

    @property
    def is_sequence(self) -> bool:
        return self.kind == SEQUENCE_KIND


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Per-track feature values grouped into channels.

    Vector features are stored as ``(N, D)`` float arrays with NaN rows for
    tracks in ``missing``; sequence features as lists of int8 arrays (empty
    for missing tracks).
    """

    tracks: tuple[str, ...]
    features: tuple[FeatureSpec, ...]
    vectors: Mapping[str, np.ndarray]
    sequences: Mapping[str, tuple[np.ndarray, ...]]
    missing: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "tracks", _check_ids(self.tracks, len(self.tracks), "feature tracks"))
        n = len(self.tracks)
        ids = [f.id for f in self.features]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate feature id in feature set")
        unknown = set(self.missing) - set(self.tracks)
        if unknown:
            raise InputError(f"missing-set lists unknown tracks: {sorted(unknown)[:5]}")
        for spec in self.features:
            if spec.is_sequence:
                seqs = self.sequences.get(spec.id)
                if seqs is None or len(seqs) != n:
                    raise InputError(f"feature {spec.id!r}: expected {n} sequences")
                for s in seqs:
                    if s.size and (s.min() < 0 or s.max() > 11):
                        raise InputError(f"feature {spec.id!r}: sequence values must lie in [0, 11]")
            else:
                arr = self.vectors.get(spec.id)
                if arr is None or arr.shape != (n, spec.dimension):
                    got = None if arr is None else arr.shape
                    raise InputError(f"feature {spec.id!r}: expected shape {(n, spec.dimension)}, got {got}")
                if spec.std_vector is None:
                    raise InputError(f"feature {spec.id!r}: std vector not set")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tracks)})

    @property
    def index(self) -> Mapping[str, int]:
        return self._index  # type: ignore[attr-defined]

    @property
    def n_tracks(self) -> int:
        return len(self.tracks)

    def usable_mask(self) -> np.ndarray:
        return np.array([t not in self.missing for t in self.tracks], dtype=bool)

    def spec(self, feature_id: str) -> FeatureSpec:
        for f in self.features:
            if f.id == feature_id:
                return f
        raise KeyError(feature_id)

    def channels(self) -> dict[str, list[FeatureSpec]]:
        out: dict[str, list[FeatureSpec]] = {}
        for f in self.features:
            out.setdefault(f.channel, []).append(f)
        return out

    def standardized(self, feature_id: str) -> np.ndarray:
        """Feature values divided by the dataset-wide std; zero-std dimensions map to 0."""
        spec = self.spec(feature_id)
        std = spec.std_vector
        safe = np.where(std > 0, std, 1.0)
        z = self.vectors[feature_id] / safe
        z[:, std == 0] = 0.0
        return z

    def value(self, feature_id: str, track: str):
        i = self.index[track]
        if self.spec(feature_id).is_sequence:
            return self.sequences[feature_id][i]
        return self.vectors[feature_id][i]


def population_std(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).std(axis=0)


def make_feature_set(
    tracks: Sequence[str],
    specs: Sequence[FeatureSpec],
    vectors: Mapping[str, np.ndarray],
    sequences: Mapping[str, Sequence[Sequence[int]]] | None = None,
    missing: Sequence[str] = (),
) -> FeatureSet:
    """Assemble a FeatureSet, filling in std vectors over the non-missing tracks when absent."""
    tracks = tuple(str(t) for t in tracks)
    missing_set = frozenset(str(m) for m in missing)
    usable = np.array([t not in missing_set for t in tracks], dtype=bool)
    vecs: dict[str, np.ndarray] = {}
    seqs: dict[str, tuple[np.ndarray, ...]] = {}
    final_specs = []
    for spec in specs:
        if spec.is_sequence:
            raw = (sequences or {})[spec.id]
            seqs[spec.id] = tuple(np.asarray(s, dtype=np.int8).reshape(-1) for s in raw)
            final_specs.append(spec)
            continue
        arr = np.array(vectors[spec.id], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != spec.dimension:
            raise InputError(f"feature {spec.id!r}: dimension mismatch, declared {spec.dimension}, data {arr.shape}")
        arr[~usable] = np.nan
        if not np.isfinite(arr[usable]).all():
            raise InputError(f"feature {spec.id!r}: non-finite value for a non-missing track")
        std = spec.std_vector
        if std is None:
            std = population_std(arr[usable]) if usable.any() else np.zeros(spec.dimension)
        std = np.asarray(std, dtype=np.float64)
        degenerate = tuple(int(j) for j in np.flatnonzero(std == 0))
        if degenerate:
            log.warning("feature %s: zero-std dimensions %s flagged degenerate", spec.id, degenerate)
        final_specs.append(
            FeatureSpec(spec.id, spec.channel, spec.kind, spec.dimension, std, spec.group, degenerate)
        )
        vecs[spec.id] = arr
    return FeatureSet(tracks, tuple(final_specs), vecs, seqs, missing_set)


def _read_track_list(path: Path) -> list[str]:
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    lines = [ln.split(",")[0] for ln in lines if ln]
    if lines and lines[0] == "track_id":
        lines = lines[1:]
    return lines


def _read_vector_csv(path: Path, dimension: int, fid: str) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows or rows[0][0] != "track_id":
        raise InputError(f"{path}: header must start with 'track_id'")
    if len(rows[0]) - 1 != dimension:
        raise InputError(f"feature {fid!r}: dimension mismatch, declared {dimension}, file has {len(rows[0]) - 1}")
    out = {}
    for ln, r in enumerate(rows[1:], start=2):
        if len(r) - 1 != dimension:
            raise InputError(f"{path}:{ln}: expected {dimension} values, got {len(r) - 1}")
        if r[0] in out:
            raise InputError(f"{path}:{ln}: duplicate track {r[0]!r}")
        try:
            out[r[0]] = np.array([float(x) for x in r[1:]])
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: unparsable value ({exc})") from exc
    return out


def _read_sequence_file(path: Path) -> dict[str, list[int]]:
    out = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        tid, _, rest = line.partition(",")
        if ln == 1 and tid == "track_id":
            continue
        if tid in out:
            raise InputError(f"{path}:{ln}: duplicate track {tid!r}")
        try:
            seq = [int(x) for x in rest.split()]
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: sequence entries must be integers") from exc
        if any(x < 0 or x > 11 for x in seq):
            raise InputError(f"{path}:{ln}: sequence entries must lie in [0, 11]")
        out[tid] = seq
    return out


def _read_std(path: Path, dimension: int) -> np.ndarray:
    rows = [r for r in csv.reader(path.read_text().splitlines()) if r]
    if rows and not _is_float(rows[0][0]):
        rows = rows[1:]
    if len(rows) != 1 or len(rows[0]) != dimension:
        raise InputError(f"{path}: expected one row of {dimension} std values")
    return np.array([float(x) for x in rows[0]])


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _match_ids(fid: str, found: Mapping[str, object], tracks: Sequence[str], missing: frozenset[str]) -> None:
    extra = sorted(set(found) - set(tracks))
    absent = sorted(t for t in tracks if t not in found and t not in missing)
    if extra or absent:
        raise InputError(f"feature {fid!r}: track ids mismatch manifest; extra={extra[:10]} missing={absent[:10]}")


def load_feature_set(manifest_path) -> FeatureSet:
    """Load a feature manifest.

    Manifest keys: ``tracks_path``, ``features`` (list of ``{id, channel, kind,
    dimension, group, path, std_path?}``) and optionally ``missing`` (track ids)
    or ``missing_path``. Relative paths resolve against the manifest directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise InputError(f"{manifest_path}: no such file")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{manifest_path}: invalid JSON ({exc})") from exc
    base = manifest_path.parent

    def resolve(p) -> Path:
        q = Path(p)
        q = q if q.is_absolute() else base / q
        if not q.exists():
            raise InputError(f"{manifest_path}: referenced file {q} does not exist")
        return q

    if "tracks_path" not in manifest or "features" not in manifest:
        raise InputError(f"{manifest_path}: manifest needs 'tracks_path' and 'features'")
    tracks = _read_track_list(resolve(manifest["tracks_path"]))
    missing = set(manifest.get("missing", []))
    if "missing_path" in manifest:
        missing |= set(_read_track_list(resolve(manifest["missing_path"])))
    missing_f = frozenset(missing)

    specs, vectors, sequences = [], {}, {}
    for entry in manifest["features"]:
        for key in ("id", "channel", "kind", "path"):
            if key not in entry:
                raise InputError(f"{manifest_path}: feature entry missing {key!r}")
        fid, kind = entry["id"], entry["kind"]
        if kind == SEQUENCE_KIND:
            found = _read_sequence_file(resolve(entry["path"]))
            _match_ids(fid, found, tracks, missing_f)
            sequences[fid] = [found.get(t, []) for t in tracks]
            specs.append(FeatureSpec(fid, entry["channel"], kind, None, None, entry.get("group")))
            continue
        dim = entry.get("dimension")
        if not isinstance(dim, int):
            raise InputError(f"feature {fid!r}: integer 'dimension' required")
        found = _read_vector_csv(resolve(entry["path"]), dim, fid)
        _match_ids(fid, found, tracks, missing_f)
        arr = np.full((len(tracks), dim), np.nan)
        for i, t in enumerate(tracks):
            if t in found:
                arr[i] = found[t]
        std = _read_std(resolve(entry["std_path"]), dim) if entry.get("std_path") else None
        specs.append(FeatureSpec(fid, entry["channel"], kind, dim, std, entry.get("group")))
        vectors[fid] = arr
    return make_feature_set(tracks, specs, vectors, sequences, sorted(missing_f))


def write_feature_set(fs: FeatureSet, directory, *, write_std: bool = True) -> Path:
    """Write ``fs`` as a manifest plus per-feature files; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "tracks.txt").write_text("track_id\n" + "".join(f"{t}\n" for t in fs.tracks))
    entries = []
    for spec in fs.features:
        entry = {"id": spec.id, "channel": spec.channel, "kind": spec.kind, "group": spec.group}
        if spec.is_sequence:
            p = d / f"{spec.id}.seq"
            lines = ["track_id,sequence"]
            for t, s in zip(fs.tracks, fs.sequences[spec.id]):
                if t not in fs.missing:
                    lines.append(f"{t}," + " ".join(str(int(x)) for x in s))
            p.write_text("\n".join(lines) + "\n")
        else:
            entry["dimension"] = spec.dimension
            p = d / f"{spec.id}.csv"
            with open(p, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["track_id", *(f"d{j}" for j in range(spec.dimension))])
                for t, row in zip(fs.tracks, fs.vectors[spec.id]):
                    if t not in fs.missing:
                        w.writerow([t, *(repr(float(x)) for x in row)])
            if write_std:
                sp = d / f"{spec.id}.std.csv"
                sp.write_text(
                    ",".join(f"d{j}" for j in range(spec.dimension))
                    + "\n"
                    + ",".join(repr(float(x)) for x in spec.std_vector)
                    + "\n"
                )
                entry["std_path"] = sp.name
        entry["path"] = p.name
        entries.append(entry)
    manifest = {"tracks_path": "tracks.txt", "features": entries, "missing": sorted(fs.missing)}
    mp = d / "manifest.json"
    mp.write_text(json.dumps(manifest, indent=2) + "\n")
    return mp


# ---------------------------------------------------------------------------
# Embeddings and labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] < 1:
            raise InputError(f"embedding table must be 2-D with dimension >= 1, got {v.shape}")
        object.__setattr__(self, "ids", _check_ids(self.ids, v.shape[0], "embedding ids"))
        if not np.isfinite(v).all():
            raise InputError("embedding table contains non-finite values")
        norms = np.linalg.norm(v, axis=1)
        if (norms == 0).any():
            bad = self.ids[int(np.flatnonzero(norms == 0)[0])]
            raise InputError(f"zero-norm embedding for id {bad!r}")
        object.__setattr__(self, "vectors", v)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]


def load_embeddings(path) -> EmbeddingTable:
    """CSV ``id,d0,...,dk``."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows or rows[0][0] != "id":
        raise InputError(f"{path}: header must start with 'id'")
    dim = len(rows[0]) - 1
    ids, vecs = [], []
    for ln, r in enumerate(rows[1:], start=2):
        if len(r) - 1 != dim:
            raise InputError(f"{path}:{ln}: expected {dim} values, got {len(r) - 1}")
        ids.append(r[0])
        try:
            vecs.append([float(x) for x in r[1:]])
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: unparsable value ({exc})") from exc
    return EmbeddingTable(tuple(ids), np.asarray(vecs).reshape(len(ids), dim))


def cosine_embedding_scores(queries: EmbeddingTable, tracks: EmbeddingTable) -> ScoreMatrix:
    """Track x query cosine-similarity matrix (the embedding retrieval baseline)."""
    if queries.dimension != tracks.dimension:
        raise InputError(f"embedding dimension mismatch: queries {queries.dimension}, tracks {tracks.dimension}")
    q = queries.vectors / np.linalg.norm(queries.vectors, axis=1, keepdims=True)
    t = tracks.vectors / np.linalg.norm(tracks.vectors, axis=1, keepdims=True)
    scores = np.clip(t @ q.T, -1.0, 1.0)
    return ScoreMatrix(scores, tracks.ids, queries.ids, {"method": "embedding-cosine"})


@dataclass(frozen=True)
class QueryLabels:
    labels: Mapping[str, str]

    def validate(self, query_ids: Sequence[str]) -> None:
        unknown = sorted(set(self.labels) - set(query_ids))
        if unknown:
            raise InputError(f"labels reference unknown query ids: {unknown[:10]}")


def load_labels(path, query_ids: Sequence[str] | None = None) -> QueryLabels:
    """CSV ``query_id,label``; rows with empty labels count as unlabeled."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows or rows[0][:2] != ["query_id", "label"]:
        raise InputError(f"{path}: header must be 'query_id,label'")
    labels = {}
    for ln, r in enumerate(rows[1:], start=2):
        if len(r) < 2:
            raise InputError(f"{path}:{ln}: expected query_id,label")
        if r[1].strip():
            labels[r[0]] = r[1].strip()
    out = QueryLabels(labels)
    if query_ids is not None:
        out.validate(query_ids)
    return out
