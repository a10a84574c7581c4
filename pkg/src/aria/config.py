"""Multi-setting runs driven by a single JSON config file."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from aria.alignment import align
from aria.data import load_feature_set, load_labels, load_score_matrix, load_segment_map
from aria.errors import InputError
from aria.homogeneity import DEFAULT_B, DEFAULT_K_LIST, SIG_THRESHOLD, build_null_models, homogeneity_sweep
from aria.normalize import CONVENTIONS, default_mode, track_matrix
from aria.reliability import DiagnoseConfig, diagnose
from aria.report import (
    ALIGNMENT_COLUMNS,
    HOMOGENEITY_COLUMNS,
    RELIABILITY_COLUMNS,
    RESIDUAL_COLUMNS,
    STRATA_COLUMNS,
    canonical_json,
    metadata,
    sha256_file,
    sha256_text,
    write_csv,
    write_json,
)
from aria.residual import residual_homogeneity_sweep
from aria.similarity import SimilarityEngine

log = logging.getLogger(__name__)

STAGES = ("diagnose", "homogeneity", "align", "residual-sweep", "stratify")
NEEDS_FEATURES = {"homogeneity", "align", "residual-sweep"}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["out_dir", "stages", "settings"],
    "properties": {
        "out_dir": {"type": "string"},
        "stages": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"enum": list(STAGES)}},
        "seed": {"type": "integer", "minimum": 0},
        "precision": {"enum": ["float32", "float64"]},
        "features": {"type": "string"},
        "labels": {"type": "string"},
        "channels": {"type": "array", "minItems": 1, "items": {"type": "string"}},
        "K": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
        "B": {"type": "integer", "minimum": 2},
        "threshold": {"type": "number"},
        "kappa_max_queries": {"type": "integer", "minimum": 2},
        "svd_k": {"type": "integer", "minimum": 5},
        "exact_svd": {"type": "boolean"},
        "streaming_residual": {"type": "boolean"},
        "workers": {"type": "integer", "minimum": 1},
        "per_query": {"type": "boolean"},
        "settings": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["method", "stage", "matrix"],
                "properties": {
                    "method": {"type": "string", "minLength": 1},
                    "stage": {"type": "string", "minLength": 1},
                    "matrix": {"type": "string"},
                    "format": {"enum": ["asm1", "csv"]},
                    "segmap": {"type": "string"},
                    "normalize": {"enum": ["zscore", "rank", "none"]},
                },
            },
        },
    },
}


@dataclass
class RunConfig:
    out_dir: Path
    stages: tuple[str, ...]
    settings: list[dict]
    seed: int = 0
    precision: str = "float64"
    features: Path | None = None
    labels: Path | None = None
    channels: list[str] | None = None
    K: tuple[int, ...] = DEFAULT_K_LIST
    B: int = DEFAULT_B
    threshold: float = SIG_THRESHOLD
    kappa_max_queries: int = 1024
    svd_k: int = 8
    exact_svd: bool = False
    streaming_residual: bool = False
    workers: int = 1
    per_query: bool = False
    raw: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return sha256_text(canonical_json(self.raw))


def _schema_error(exc: jsonschema.ValidationError) -> InputError:
    where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
    return InputError(f"config schema violation at {where}: {exc.message}")


def load_config(path, *, workers: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise _schema_error(exc) from None
    base = path.parent

    def resolve(p):
        return None if p is None else (base / p).resolve()

    stages = tuple(s for s in STAGES if s in raw["stages"])
    if NEEDS_FEATURES & set(stages) and "features" not in raw:
        raise InputError(f"stage dependency unmet: {sorted(NEEDS_FEATURES & set(stages))} need 'features'")
    if "stratify" in stages:
        if "labels" not in raw:
            raise InputError("stage dependency unmet: 'stratify' needs 'labels'")
        if not {"homogeneity", "residual-sweep"} & set(stages):
            raise InputError("stage dependency unmet: 'stratify' needs 'homogeneity' or 'residual-sweep'")
    keys = [(s["method"], s["stage"]) for s in raw["settings"]]
    if len(set(keys)) != len(keys):
        raise InputError("settings must have unique (method, stage) pairs")
    settings = []
    for s in raw["settings"]:
        s = dict(s)
        s["matrix"] = resolve(s["matrix"])
        s["segmap"] = resolve(s.get("segmap"))
        for key in ("matrix", "segmap"):
            if s[key] is not None and not s[key].exists():
                raise InputError(f"missing input file: {s[key]}")
        settings.append(s)
    cfg = RunConfig(
        out_dir=resolve(raw["out_dir"]),
        stages=stages,
        settings=settings,
        seed=raw.get("seed", 0),
        precision=raw.get("precision", "float64"),
        features=resolve(raw.get("features")),
        labels=resolve(raw.get("labels")),
        channels=raw.get("channels"),
        K=tuple(raw.get("K", DEFAULT_K_LIST)),
        B=raw.get("B", DEFAULT_B),
        threshold=raw.get("threshold", SIG_THRESHOLD),
        kappa_max_queries=raw.get("kappa_max_queries", 1024),
        svd_k=raw.get("svd_k", 8),
        exact_svd=raw.get("exact_svd", False),
        streaming_residual=raw.get("streaming_residual", False),
        workers=workers or raw.get("workers", 1),
        per_query=raw.get("per_query", False),
        raw=raw,
    )
    for p in (cfg.features, cfg.labels):
        if p is not None and not p.exists():
            raise InputError(f"missing input file: {p}")
    return cfg


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in text)


def _summary_rows(reports, channels, method, stage) -> list[dict]:
    # Degenerate channels still get a row (NaN) so row counts stay settings x K x channels.
    nan = float("nan")
    rows = []
    for K in sorted(reports):
        rep = reports[K]
        for c in channels:
            s = rep.summaries.get(c)
            rows.append(
                {
                    "method": method,
                    "stage": stage,
                    "channel": c,
                    "K": K,
                    "z_mean": s.z_mean if s else nan,
                    "pos": s.pos if s else nan,
                    "sig": s.sig if s else nan,
                    "n_queries": s.n if s else 0,
                    "normalization": rep.normalization,
                }
            )
    return rows


def _strata_rows(reports, method, stage) -> list[dict]:
    rows = []
    for K in sorted(reports):
        for c, st in (reports[K].strata or {}).items():
            for label, s in st["strata"].items():
                rows.append({"method": method, "stage": stage, "channel": c, "K": K, "label": label, **s.to_dict()})
    return rows


def _run_setting(cfg: RunConfig, setting: dict, shared: dict) -> dict:
    method, stage = setting["method"], setting["stage"]
    mode = setting.get("normalize") or default_mode(method).value
    S = load_score_matrix(setting["matrix"], format=setting.get("format"), precision=cfg.precision)
    segmap = load_segment_map(setting["segmap"]) if setting["segmap"] else None
    fs, labels, nulls, channels = shared["fs"], shared["labels"], shared["nulls"], shared["channels"]
    inputs = {"matrix": {"path": str(setting["matrix"]), "sha256": sha256_file(setting["matrix"])}}
    if segmap is not None:
        inputs["segmap"] = {"path": str(setting["segmap"]), "sha256": sha256_file(setting["segmap"])}
    report = {
        "meta": metadata(
            config_hash=cfg.hash,
            method=method,
            stage=stage,
            seed=cfg.seed,
            precision=S.precision,
            normalization=mode,
            normalization_conventions=CONVENTIONS,
            shape=list(S.shape),
            inputs={**inputs, **shared["inputs"]},
        )
    }
    rows: dict[str, list[dict]] = {k: [] for k in ("reliability", "homogeneity", "residual", "alignment", "strata")}
    if "diagnose" in cfg.stages:
        rel = diagnose(S, DiagnoseConfig(cfg.kappa_max_queries, cfg.svd_k, cfg.exact_svd, seed=cfg.seed))
        report["reliability"] = rel.to_dict()
        rows["reliability"].append(
            {
                "method": method,
                "stage": stage,
                "r1": rel.r1,
                "r2_5": rel.r_trailing,
                "p": rel.p,
                "kappa": rel.kappa if rel.kappa is not None else float("nan"),
                "kappa_query_subsample": rel.kappa_query_subsample,
                "precision": rel.precision,
            }
        )
    need_track = {"homogeneity", "align"} & set(cfg.stages)
    St = track_matrix(S, segmap, mode) if need_track else None
    common = dict(labels=labels, engine=shared["engine"], workers=1, seed=cfg.seed, threshold=cfg.threshold)
    if "homogeneity" in cfg.stages:
        reps = homogeneity_sweep(St, fs, channels, cfg.K, nulls, **common)
        report["homogeneity"] = {str(K): r.to_dict(cfg.per_query) for K, r in reps.items()}
        rows["homogeneity"] = _summary_rows(reps, channels, method, stage)
        rows["strata"] += [{**r, "arm": "original"} for r in _strata_rows(reps, method, stage)]
    if "align" in cfg.stages:
        al = align(St, fs, channels, seed=cfg.seed)
        report["alignment"] = al.to_dict()
        for c, a in al.channels.items():
            rows["alignment"].append({"method": method, "stage": stage, **a.to_dict()})
    if "residual-sweep" in cfg.stages:
        paired = residual_homogeneity_sweep(
            S,
            fs,
            segmap=segmap,
            mode=mode,
            channels=channels,
            K_list=cfg.K,
            null_models=nulls,
            seed=cfg.seed,
            labels=labels,
            streaming=cfg.streaming_residual,
        )
        by_key = {(r["K"], r["channel"]): r for r in paired.rows()}
        nan = float("nan")
        for K in cfg.K:
            for c in channels:
                r = by_key.get((K, c), {})
                rows["residual"].append(
                    {"method": method, "stage": stage, "channel": c, "K": K}
                    | {col: r.get(col, nan) for col in RESIDUAL_COLUMNS[4:]}
                )
        report["residual_sweep"] = {
            "sigma1_removed": paired.sigma1,
            "original": {str(K): r.to_dict(cfg.per_query) for K, r in paired.original.items()},
            "residual": {str(K): r.to_dict(cfg.per_query) for K, r in paired.residual.items()},
        }
        rows["strata"] += [{**r, "arm": "residual"} for r in _strata_rows(paired.residual, method, stage)]
        if "homogeneity" not in cfg.stages:
            rows["strata"] += [{**r, "arm": "original"} for r in _strata_rows(paired.original, method, stage)]
    if "stratify" not in cfg.stages:
        rows["strata"] = []
    name = f"{_slug(method)}__{_slug(stage)}"
    write_json(cfg.out_dir / "settings" / name / "report.json", report)
    return rows


def run_config(config_path, *, workers: int | None = None) -> Path:
    """Execute every declared stage over every (method, stage) setting; returns the run directory."""
    cfg = load_config(config_path, workers=workers)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    fs = labels = engine = None
    nulls: dict = {}
    channels: list[str] = []
    shared_inputs: dict = {}
    if cfg.features is not None:
        fs = load_feature_set(cfg.features)
        channels = list(cfg.channels) if cfg.channels else list(fs.channels())
        unknown = [c for c in channels if c not in fs.channels()]
        if unknown:
            raise InputError(f"unknown channels {unknown}")
        shared_inputs["features"] = {"path": str(cfg.features), "sha256": sha256_file(cfg.features)}
    if cfg.labels is not None:
        labels = load_labels(cfg.labels)
        shared_inputs["labels"] = {"path": str(cfg.labels), "sha256": sha256_file(cfg.labels)}
    if {"homogeneity", "residual-sweep"} & set(cfg.stages):
        engine = SimilarityEngine(fs, [s for c in channels for s in fs.channels()[c]])
        # Null models depend only on features, K, B and seed, so every setting shares them.
        nulls = build_null_models(fs, channels, cfg.K, cfg.B, cfg.seed, engine=engine, workers=cfg.workers)
    shared = {"fs": fs, "labels": labels, "nulls": nulls, "channels": channels, "engine": engine, "inputs": shared_inputs}
    if cfg.workers > 1 and len(cfg.settings) > 1:
        with ThreadPoolExecutor(min(cfg.workers, len(cfg.settings))) as ex:
            results = list(ex.map(lambda s: _run_setting(cfg, s, shared), cfg.settings))
    else:
        results = [_run_setting(cfg, s, shared) for s in cfg.settings]

    def collect(key):
        return [r for res in results for r in res[key]]

    out = cfg.out_dir
    outputs = {}
    if "diagnose" in cfg.stages:
        write_csv(out / "reliability.csv", collect("reliability"), RELIABILITY_COLUMNS)
        outputs["reliability"] = "reliability.csv"
    if "homogeneity" in cfg.stages:
        write_csv(out / "homogeneity.csv", collect("homogeneity"), HOMOGENEITY_COLUMNS)
        outputs["homogeneity"] = "homogeneity.csv"
    if "align" in cfg.stages:
        write_csv(out / "alignment.csv", collect("alignment"), ALIGNMENT_COLUMNS)
        outputs["alignment"] = "alignment.csv"
    if "residual-sweep" in cfg.stages:
        write_csv(out / "residual_sweep.csv", collect("residual"), RESIDUAL_COLUMNS)
        outputs["residual_sweep"] = "residual_sweep.csv"
    if "stratify" in cfg.stages:
        write_csv(out / "strata.csv", collect("strata"), ("arm",) + STRATA_COLUMNS)
        outputs["strata"] = "strata.csv"
    write_json(
        out / "run.json",
        metadata(
            config_hash=cfg.hash,
            config=cfg.raw,
            seed=cfg.seed,
            stages=list(cfg.stages),
            settings=[f"{_slug(s['method'])}__{_slug(s['stage'])}" for s in cfg.settings],
            null_models={str(K): n.to_dict() for K, n in nulls.items()},
            outputs=outputs,
        ),
    )
    log.info("run complete: %s", out)
    return out
