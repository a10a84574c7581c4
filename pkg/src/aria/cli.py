"""``aria`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from aria import __version__
from aria.alignment import align
from aria.bench import AUDIO_LAYOUT, REGIMES, SMALL_LAYOUT, PlantedSpec, generate_features, generate_matrix, write_matrix_asm1
from aria.config import run_config
from aria.data import (
    cosine_embedding_scores,
    load_embeddings,
    load_feature_set,
    load_labels,
    load_score_matrix,
    load_segment_map,
    write_feature_set,
    write_score_matrix,
    write_segment_map,
)
from aria.errors import InputError, NumericError
from aria.homogeneity import DEFAULT_B, DEFAULT_K_LIST, SIG_THRESHOLD, homogeneity_sweep
from aria.normalize import CONVENTIONS, default_mode, track_matrix
from aria.reliability import DiagnoseConfig, diagnose
from aria.report import HOMOGENEITY_COLUMNS, RESIDUAL_COLUMNS, metadata, write_csv, write_json
from aria.residual import residual_homogeneity_sweep, write_rank1_residual

log = logging.getLogger("aria")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


def thread_budget() -> int:
    raw = os.environ.get("ARIA_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"ARIA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"ARIA_THREADS must be a positive integer, got {raw!r}")
    return n


def _k_list(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return ks


def _channels(text: str | None):
    return None if text is None else [c for c in text.split(",") if c]


def _mode(args) -> str:
    return args.normalize or default_mode(args.method).value


def _load_matrix(args):
    return load_score_matrix(args.matrix, format=args.format, precision=args.precision)


def cmd_diagnose(args, workers):
    S = _load_matrix(args)
    cfg = DiagnoseConfig(args.kappa_max_queries, args.svd_k, args.exact_svd, args.svd_method, args.seed)
    rep = diagnose(S, cfg)
    write_json(args.out, {"meta": metadata(command="diagnose", seed=args.seed, config=vars_of(cfg)), **rep.to_dict()})


def vars_of(obj) -> dict:
    return {k: v for k, v in vars(obj).items() if not k.startswith("_")}


def _homog_meta(args, mode, S):
    return metadata(
        command=args.command,
        seed=args.seed,
        B=args.B,
        K=list(args.K),
        precision=S.precision,
        normalization=mode,
        normalization_conventions=CONVENTIONS,
        threshold=args.threshold,
    )


def _csv_path(args, suffix):
    return Path(args.csv) if args.csv else Path(args.out).with_suffix(suffix)


def cmd_homogeneity(args, workers):
    S = _load_matrix(args)
    fs = load_feature_set(args.features)
    mode = _mode(args)
    segmap = load_segment_map(args.segmap) if args.segmap else None
    St = track_matrix(S, segmap, mode)
    labels = load_labels(args.labels, St.col_ids) if args.labels else None
    channels = _channels(args.channels)
    reps = homogeneity_sweep(
        St, fs, channels, args.K, labels=labels, B=args.B, seed=args.seed, threshold=args.threshold, workers=workers
    )
    write_json(
        args.out,
        {"meta": _homog_meta(args, mode, S), "K": {str(K): r.to_dict(args.per_query) for K, r in reps.items()}},
    )
    rows = [
        {"method": args.method or "", "stage": args.stage or "", "channel": c, "K": K, "normalization": r.normalization, "n_queries": s.n, **s.to_dict()}
        for K, r in reps.items()
        for c, s in r.summaries.items()
    ]
    write_csv(_csv_path(args, ".csv"), rows, HOMOGENEITY_COLUMNS)


def cmd_align(args, workers):
    S = _load_matrix(args)
    fs = load_feature_set(args.features)
    mode = _mode(args)
    segmap = load_segment_map(args.segmap) if args.segmap else None
    St = track_matrix(S, segmap, mode) if (segmap is not None or mode != "none") else S
    rep = align(St, fs, _channels(args.channels), seed=args.seed)
    write_json(args.out, {"meta": metadata(command="align", seed=args.seed, normalization=mode), **rep.to_dict()})


def cmd_residual(args, workers):
    S = _load_matrix(args)
    comp = write_rank1_residual(S, args.out, seed=args.seed)
    log.info("removed sigma_1=%.6g via %s SVD", comp.sigma, comp.method)


def cmd_residual_sweep(args, workers):
    S = _load_matrix(args)
    fs = load_feature_set(args.features)
    mode = _mode(args)
    segmap = load_segment_map(args.segmap) if args.segmap else None
    labels = load_labels(args.labels) if args.labels else None
    paired = residual_homogeneity_sweep(
        S,
        fs,
        segmap=segmap,
        mode=mode,
        channels=_channels(args.channels),
        K_list=args.K,
        B=args.B,
        seed=args.seed,
        labels=labels,
        streaming=args.streaming,
        workers=workers,
    )
    write_json(
        args.out,
        {
            "meta": _homog_meta(args, mode, S),
            "sigma1_removed": paired.sigma1,
            "original": {str(K): r.to_dict(args.per_query) for K, r in paired.original.items()},
            "residual": {str(K): r.to_dict(args.per_query) for K, r in paired.residual.items()},
        },
    )
    rows = [{"method": args.method or "", "stage": args.stage or "", **r} for r in paired.rows()]
    write_csv(_csv_path(args, ".csv"), rows, RESIDUAL_COLUMNS)


def cmd_score_embeddings(args, workers):
    S = cosine_embedding_scores(load_embeddings(args.queries), load_embeddings(args.tracks))
    fmt = args.format or ("csv" if str(args.out).endswith(".csv") else "asm1")
    write_score_matrix(S, args.out, format=fmt)


def cmd_simulate(args, workers):
    prefix = Path(args.out_prefix)
    prefix.mkdir(parents=True, exist_ok=True)
    spec = PlantedSpec(
        regime=args.regime,
        M=args.m,
        T=args.t,
        seed=args.seed,
        N=args.n,
        collapse_strength=args.collapse_strength,
        noise=args.noise,
        planted_size=args.planted_size,
        precision=args.precision,
    )
    matrix_path = prefix / "matrix.asm1"
    if spec.N is None or spec.N == spec.M:
        truth = write_matrix_asm1(spec, matrix_path)
        segmap = None
    else:
        bench = generate_matrix(spec)
        write_score_matrix(bench.matrix, matrix_path)
        truth, segmap = bench.truth, bench.segment_map
    if segmap is not None:
        write_segment_map(segmap, prefix / "segmap.csv")
    outputs = {"matrix": "matrix.asm1"} | ({"segmap": "segmap.csv"} if segmap is not None else {})
    if not args.no_features:
        layout = SMALL_LAYOUT if args.layout == "small" else AUDIO_LAYOUT
        fs = generate_features(
            spec.n_tracks,
            layout,
            truth["planted_group"],
            args.coherence,
            args.seed,
            coherent_channels=_channels(args.coherent_channels),
        )
        write_feature_set(fs, prefix / "features")
        outputs["features"] = "features/manifest.json"
        truth["features"] = {"layout": args.layout, "coherence": args.coherence, "coherent_channels": _channels(args.coherent_channels)}
    write_json(prefix / "ground_truth.json", {"meta": metadata(command="simulate", seed=args.seed), "outputs": outputs, **truth})


def cmd_run(args, workers):
    out = run_config(args.config, workers=workers)
    print(out)


def _matrix_args(p, out_help="output path"):
    p.add_argument("--matrix", required=True, type=Path)
    p.add_argument("--format", choices=("asm1", "csv"), help="input format (default: by extension)")
    p.add_argument("--precision", choices=("float32", "float64"), default="float64", help="precision for CSV input")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path, help=out_help)


def _homog_args(p):
    p.add_argument("--features", required=True, type=Path, help="feature manifest JSON")
    p.add_argument("--segmap", type=Path, help="segment -> track map CSV (omit when rows are tracks)")
    p.add_argument("--normalize", choices=("zscore", "rank", "none"))
    p.add_argument("--method", help="scoring method name; picks the default normalization")
    p.add_argument("--stage", help="training-stage label copied into CSV rows")
    p.add_argument("--channels", help="comma-separated channel subset")
    p.add_argument("--K", type=_k_list, default=DEFAULT_K_LIST)
    p.add_argument("--B", type=int, default=DEFAULT_B)
    p.add_argument("--threshold", type=float, default=SIG_THRESHOLD)
    p.add_argument("--labels", type=Path, help="query_id,label CSV for stratified summaries")
    p.add_argument("--csv", type=Path, help="per-K summary CSV (default: --out with .csv)")
    p.add_argument("--per-query", action="store_true", help="include per-query z in the JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aria", description="Diagnostics for attribution score matrices.")
    parser.add_argument("--version", action="version", version=f"aria {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diagnose", help="kappa, energy ratios and concentration ratio")
    _matrix_args(p, "report JSON")
    p.add_argument("--kappa-max-queries", type=int, default=1024)
    p.add_argument("--svd-k", type=int, default=8)
    p.add_argument("--exact-svd", action="store_true")
    p.add_argument("--svd-method", choices=("exact", "gram", "randomized"))
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("homogeneity", help="null-calibrated within-group homogeneity sweep")
    _matrix_args(p, "report JSON")
    _homog_args(p)
    p.set_defaults(func=cmd_homogeneity)

    p = sub.add_parser("align", help="alignment of u1 with channel features")
    _matrix_args(p, "report JSON")
    p.add_argument("--features", required=True, type=Path)
    p.add_argument("--segmap", type=Path)
    p.add_argument("--normalize", choices=("zscore", "rank", "none"))
    p.add_argument("--method")
    p.add_argument("--channels")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("residual", help="write the rank-1 residual as ASM1")
    _matrix_args(p, "residual ASM1 path")
    p.set_defaults(func=cmd_residual)

    p = sub.add_parser("residual-sweep", help="paired original/residual homogeneity sweep")
    _matrix_args(p, "report JSON")
    _homog_args(p)
    p.add_argument("--streaming", action="store_true", help="never materialize the residual")
    p.set_defaults(func=cmd_residual_sweep)

    p = sub.add_parser("score-embeddings", help="cosine retrieval scores from embedding tables")
    p.add_argument("--queries", required=True, type=Path)
    p.add_argument("--tracks", required=True, type=Path)
    p.add_argument("--format", choices=("asm1", "csv"))
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_score_embeddings)

    p = sub.add_parser("simulate", help="synthetic score matrix with planted structure")
    p.add_argument("--regime", required=True, choices=REGIMES)
    p.add_argument("--m", type=int, required=True, help="segments (rows)")
    p.add_argument("--t", type=int, required=True, help="queries (columns)")
    p.add_argument("--n", type=int, help="tracks (default: one per segment)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--collapse-strength", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--planted-size", type=int)
    p.add_argument("--precision", choices=("float32", "float64"), default="float64")
    p.add_argument("--layout", choices=("audio", "small"), default="audio")
    p.add_argument("--coherence", type=float, default=0.9)
    p.add_argument("--coherent-channels", help="comma-separated; default all channels")
    p.add_argument("--no-features", action="store_true")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="execute a JSON config")
    p.add_argument("config", type=Path)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        workers = thread_budget()
        with threadpool_limits(limits=workers):
            args.func(args, workers)
    except (InputError, FileNotFoundError) as exc:
        print(f"aria: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"aria: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
