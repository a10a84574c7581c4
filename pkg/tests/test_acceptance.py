"""Acceptance suite. Each test records one PASS/FAIL line, repeated in the terminal summary."""
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from aria.alignment import axis_channel_alignment, ols_sqrt_r2
from aria.bench import (
    AUDIO_LAYOUT,
    SMALL_LAYOUT,
    PlantedSpec,
    generate_features,
    generate_matrix,
    oracle_diagnostics,
)
from aria.data import VECTOR_KIND, FeatureSpec, ScoreMatrix, make_feature_set, write_feature_set, write_score_matrix
from aria.homogeneity import (
    SIG_THRESHOLD,
    build_null_model,
    channel_z_from_g,
    homogeneity_sweep,
    sample_null_groups,
    summarize,
)
from aria.linalg import top_singular_triplets
from aria.normalize import normalize_per_query
from aria.config import run_config
from aria.reliability import DiagnoseConfig, diagnose, mean_abs_inter_query_correlation
from aria.residual import rank1_residual, residual_homogeneity_sweep
from aria.similarity import SimilarityEngine

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))


def sm(x):
    return ScoreMatrix.from_array(np.asarray(x))


def test_c01_oracle_equivalence(record):
    rng = np.random.default_rng(101)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(50):
        m, t = int(rng.integers(6, 65)), int(rng.integers(3, 17))
        X = rng.standard_normal((m, t)) * rng.uniform(0.1, 5, t) + rng.normal(0, 3, t)
        rep = diagnose(sm(X), DiagnoseConfig(svd_k=5))
        ref = oracle_diagnostics(X)
        k = min(5, m, t)
        errs = [abs(rep.kappa - ref["kappa"]), abs(rep.p - ref["p"])]
        errs += list(np.abs(np.array(rep.energy_ratios[:k]) - ref["ratios"][:k]))
        worst = max(worst, max(errs))
    dt = time.perf_counter() - t0
    ok = record(1, "oracle equivalence", worst <= 1e-10 and dt < 5, f"max abs err {worst:.2e} (<=1e-10), {dt:.2f}s (<5s)")
    assert ok


def test_c02_randomized_svd_accuracy(record):
    worst = 0.0
    t0 = time.perf_counter()
    for seed in range(20):
        X = np.random.default_rng(seed).standard_normal((2000, 200))
        res = top_singular_triplets(sm(X), 5, method="randomized", seed=seed)
        ref = np.linalg.svd(X, compute_uv=False)[:5]
        worst = max(worst, float(np.max(np.abs(res.s - ref) / ref)))
    dt = time.perf_counter() - t0
    ok = record(2, "randomized SVD accuracy", worst <= 1e-6 and dt < 30, f"max rel err {worst:.2e} (<=1e-6), {dt:.1f}s (<30s)")
    assert ok


def test_c03_null_calibration(record):
    seed = 7
    t0 = time.perf_counter()
    fs = generate_features(2000, AUDIO_LAYOUT, seed=seed)
    engine = SimilarityEngine(fs)
    null = build_null_model(fs, None, 300, 200, seed, engine=engine)
    held = sample_null_groups(np.arange(2000), 300, 200, seed + 1000003)
    z = channel_z_from_g(np.vstack([engine.g_all(g) for g in held]), null)
    dt = time.perf_counter() - t0
    means, stds = z.mean(axis=0), z.std(axis=0)
    per_channel_sig = np.mean(z > SIG_THRESHOLD, axis=0)
    pooled_sig = float(np.mean(z > SIG_THRESHOLD))
    ok = (
        bool(np.all(np.abs(means) <= 0.15))
        and bool(np.all((stds >= 0.8) & (stds <= 1.2)))
        and 0.01 <= pooled_sig <= 0.04
        and dt < 120
    )
    detail = (
        f"channels {list(null.channels)} mean {np.round(means, 3).tolist()} std {np.round(stds, 3).tolist()} "
        f"Sig pooled {pooled_sig:.2%} (per channel {[f'{s:.1%}' for s in per_channel_sig]}), {dt:.0f}s"
    )
    assert record(3, "null calibration", ok, detail)


def test_c04_collapse_detection(record):
    fails = []
    lo = {"r1": 1.0, "kappa": 1.0}
    hi = {"r1": 0.0, "kappa": 0.0}
    for seed in range(100):
        for strength in (0.9, 1.0):
            rep = diagnose(generate_matrix(PlantedSpec("collapsed-rank1", M=2000, T=64, seed=seed, collapse_strength=strength)).matrix)
            lo = {"r1": min(lo["r1"], rep.r1), "kappa": min(lo["kappa"], rep.kappa)}
            if rep.r1 < 0.85 or rep.kappa < 0.85:
                fails.append(("collapsed", seed, strength))
        rep = diagnose(generate_matrix(PlantedSpec("iid-noise", M=2000, T=64, seed=seed)).matrix)
        hi = {"r1": max(hi["r1"], rep.r1), "kappa": max(hi["kappa"], rep.kappa)}
        if rep.r1 > 0.2 or rep.kappa > 0.1:
            fails.append(("noise", seed))
    detail = (
        f"collapsed min r1 {lo['r1']:.3f} min kappa {lo['kappa']:.3f}; "
        f"noise max r1 {hi['r1']:.3f} max kappa {hi['kappa']:.3f}; {len(fails)} failing cases"
    )
    assert record(4, "collapse detection (2000x64, 100 seeds)", not fails, detail)


def test_c05_residual_sign_flip(record):
    rows = []
    for seed in range(10):
        spec = PlantedSpec("collapsed-rank1", M=600, T=40, seed=seed, collapse_strength=0.9, planted_size=120)
        bench = generate_matrix(spec)
        fs = generate_features(600, SMALL_LAYOUT, bench.truth["planted_group"], 0.9, seed, coherent_channels=["harmonic"])
        kw = dict(mode="zscore", channels=["harmonic"], K_list=[50], B=200, seed=seed)
        a = residual_homogeneity_sweep(bench.matrix, fs, **kw).rows()[0]
        b = residual_homogeneity_sweep(bench.matrix, fs, **kw).rows()[0]
        rows.append((a["z_mean_original"], a["z_mean_residual"], a == b))
    good = sum(o >= 3 and r <= 0 and same for o, r, same in rows)
    detail = (
        f"{good}/10 seeds; original z in [{min(r[0] for r in rows):.1f}, {max(r[0] for r in rows):.1f}], "
        f"residual z in [{min(r[1] for r in rows):.2f}, {max(r[1] for r in rows):.2f}]"
    )
    assert record(5, "residual sign flip", good == 10, detail)


def test_c06_residual_spectral_identities(record):
    worst_f = worst_s = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((300, 40)) + np.outer(rng.standard_normal(300), rng.standard_normal(40))
        R = rank1_residual(sm(X)).values
        s = np.linalg.svd(X, compute_uv=False)
        fro = np.sum(X**2) - s[0] ** 2
        worst_f = max(worst_f, abs(np.sum(R**2) - fro) / fro)
        worst_s = max(worst_s, abs(np.linalg.svd(R, compute_uv=False)[0] - s[1]) / s[1])
    ok = worst_f <= 1e-8 and worst_s <= 1e-6
    assert record(6, "residual spectral identities", ok, f"Frobenius rel {worst_f:.1e} (<=1e-8), sigma rel {worst_s:.1e} (<=1e-6)")


def _increasing(rng, x):
    kind = rng.integers(3)
    if kind == 0:
        return np.exp(x / 4)
    if kind == 1:
        return x**3 + 2 * x - 5
    return np.arctan(x) * 10 + x


def test_c07_normalization_invariances(record):
    rng = np.random.default_rng(707)
    z_worst = k_worst = 0.0
    rank_ok = 0
    for _ in range(200):
        m, t = int(rng.integers(3, 60)), int(rng.integers(2, 8))
        # integer grid so ties survive every transform exactly
        X = rng.integers(-6, 7, (m, t)).astype(np.float64) / 2
        Y = np.column_stack([_increasing(rng, X[:, j]) for j in range(t)])
        rank_ok += normalize_per_query(sm(X), "rank").values.tobytes() == normalize_per_query(sm(Y), "rank").values.tobytes()

        X = rng.standard_normal((m, t))
        a, b = 10.0 ** rng.uniform(-2, 3, t), rng.uniform(-10, 10, t)
        z0 = normalize_per_query(sm(X), "zscore").values
        z1 = normalize_per_query(sm(X * a + b), "zscore").values
        z_worst = max(z_worst, float(np.max(np.abs(z0 - z1))))

        s = rng.choice([-1.0, 1.0], t)
        k0 = mean_abs_inter_query_correlation(sm(X)).kappa
        k1 = mean_abs_inter_query_correlation(sm(X * a * s + b)).kappa
        k_worst = max(k_worst, abs(k0 - k1))
    ok = rank_ok == 200 and z_worst <= 1e-10 and k_worst <= 1e-10
    detail = f"rank bitwise {rank_ok}/200; zscore max diff {z_worst:.1e}; kappa max diff {k_worst:.1e}"
    assert record(7, "normalization invariances", ok, detail)


def _normal_eq_sqrt_r2(y, X):
    A = np.column_stack([np.ones(len(y)), X])
    beta = np.linalg.solve(A.T @ A, A.T @ y)
    r = y - A @ beta
    yc = y - y.mean()
    return math.sqrt(max(0.0, 1 - (r @ r) / (yc @ yc)))


def test_c08_alignment_identities(record):
    rng = np.random.default_rng(808)
    unit_worst = ols_worst = 0.0
    reg_ok = 0
    n = 60
    tracks = [f"t{i}" for i in range(n)]
    for _ in range(50):
        d = int(rng.integers(1, 6))
        F = rng.standard_normal((n, d))
        fs = make_feature_set(tracks, [FeatureSpec("f", "c", VECTOR_KIND, d)], {"f": F})
        j = int(rng.integers(d))
        u1 = top_singular_triplets(sm(np.outer(F[:, j], rng.uniform(0.5, 2, 5))), 1).u[:, 0]
        al = axis_channel_alignment(u1, tracks, fs, "c")
        unit_worst = max(unit_worst, abs(al.alpha_max - 1.0))

        y = rng.standard_normal(n)
        al = axis_channel_alignment(y, tracks, fs, "c")
        reg_ok += al.alpha_reg >= al.alpha_max - 1e-12
        ols_worst = max(ols_worst, abs(ols_sqrt_r2(y, F) - _normal_eq_sqrt_r2(y, F)))
    ok = unit_worst <= 1e-9 and reg_ok == 50 and ols_worst <= 1e-10
    detail = f"|alpha_max-1| {unit_worst:.1e}; alpha_reg>=alpha_max {reg_ok}/50; OLS vs normal eq {ols_worst:.1e}"
    assert record(8, "alignment identities", ok, detail)


def test_c09_threshold_semantics(record):
    rng = np.random.default_rng(909)
    edge = summarize([1.96, 1.96, 0.0, -0.0, 2.0])
    agree = 0
    for _ in range(100):
        z = rng.standard_normal(int(rng.integers(1, 200))) * 2
        z[rng.random(len(z)) < 0.2] = 1.96
        s = summarize(z)
        pos = sum(1 for v in z if v > 0) / len(z)
        sig = sum(1 for v in z if v > 1.96) / len(z)
        agree += s.pos == pos and s.sig == sig and abs(s.z_mean - math.fsum(z) / len(z)) <= 1e-12
    ok = edge.sig == 0.2 and edge.pos == 0.6 and agree == 100
    assert record(9, "threshold semantics", ok, f"z=1.96 excluded: {edge.sig == 0.2}; counting oracle {agree}/100")


@pytest.mark.slow
def test_c10_performance(record, tmp_path):
    from perf_diagnose import run

    d = run(1_000_000, 512, tmp_path / "perf.asm1")
    diag_ok = d["returncode"] == 0 and d["seconds"] < 120 and d["peak_rss_gb"] < 6

    seed = 7
    fs = generate_features(2000, AUDIO_LAYOUT, seed=seed)
    S = generate_matrix(PlantedSpec("query-dependent", M=2000, T=1000, seed=seed)).matrix
    t0 = time.perf_counter()
    rep = homogeneity_sweep(S, fs, None, [300], B=200, seed=seed)[300]
    h_dt = time.perf_counter() - t0
    h_ok = rep.z.shape == (1000, 3) and h_dt < 600
    detail = (
        f"diagnose 1e6x512 fp32 {d['seconds']:.1f}s, {d['peak_rss_gb']:.2f} GB, svd {d.get('svd', {}).get('method')}; "
        f"homogeneity K=300 B=200 1000q 3ch {h_dt:.0f}s"
    )
    assert record(10, "performance", diag_ok and h_ok, detail)


def _floats(obj, path=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _floats(v, f"{path}/{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _floats(v, f"{path}/{i}")
    elif isinstance(obj, float):
        yield path, obj


def _csv_floats(path):
    with open(path, newline="") as f:
        for i, row in enumerate(csv.DictReader(f)):
            for k, v in row.items():
                try:
                    yield f"{path.name}/{i}/{k}", float(v)
                except ValueError:
                    pass


def _outputs(out_dir):
    files = {p.relative_to(out_dir): p.read_bytes() for p in sorted(out_dir.rglob("*")) if p.is_file()}
    vals = {}
    for p in sorted(out_dir.rglob("*")):
        if p.suffix == ".json":
            vals.update({f"{p.relative_to(out_dir)}{k}": v for k, v in _floats(json.loads(p.read_text()))})
        elif p.suffix == ".csv":
            vals.update(dict(_csv_floats(p)))
    return files, vals


def test_c11_determinism(record, tmp_path):
    seed = 11
    bench = generate_matrix(PlantedSpec("collapsed-rank1", M=3000, T=48, seed=seed, collapse_strength=0.9, planted_size=200))
    write_score_matrix(bench.matrix, tmp_path / "a.asm1")
    write_score_matrix(generate_matrix(PlantedSpec("query-dependent", M=3000, T=48, seed=seed)).matrix, tmp_path / "b.asm1")
    write_feature_set(generate_features(3000, AUDIO_LAYOUT, bench.truth["planted_group"], 0.9, seed), tmp_path / "features")
    cfg = {
        "out_dir": "run",
        "stages": ["diagnose", "homogeneity", "align", "residual-sweep"],
        "seed": seed,
        "K": [50, 200],
        "B": 60,
        "features": "features/manifest.json",
        "settings": [
            {"method": "trak", "stage": "final", "matrix": "a.asm1"},
            {"method": "logra", "stage": "final", "matrix": "b.asm1"},
        ],
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    runs = []
    for blas, workers in [(1, 1), (1, 1), (4, 4)]:
        with threadpool_limits(blas):
            runs.append(_outputs(run_config(tmp_path / "c.json", workers=workers)))
    bitwise = runs[0][0] == runs[1][0]
    a, b = runs[0][1], runs[2][1]
    worst = 0.0
    same_keys = a.keys() == b.keys()
    for k in a.keys() & b.keys():
        x, y = a[k], b[k]
        if math.isnan(x) or math.isnan(y):
            worst = worst if (math.isnan(x) and math.isnan(y)) else math.inf
            continue
        worst = max(worst, abs(x - y) / max(abs(x), abs(y), 1e-300) if x != y else 0.0)
    ok = bitwise and same_keys and worst <= 1e-10
    detail = f"rerun bitwise identical: {bitwise}; {len(a)} floats across 1 vs 4 threads/workers, max rel diff {worst:.1e}"
    assert record(11, "determinism", ok, detail)
