import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aria.bench import SMALL_LAYOUT, generate_features
from aria.data import FeatureSpec, QueryLabels, ScoreMatrix, make_feature_set
from aria.errors import InputError
from aria.homogeneity import (
    DEFAULT_B,
    DEFAULT_K_LIST,
    TrackGroup,
    build_null_model,
    channel_z,
    channel_z_from_g,
    group_similarity,
    homogeneity_sweep,
    sample_null_groups,
    stratify_summary,
    summarize,
    top_k_group,
)
from aria.similarity import SimilarityEngine, feature_similarity


def test_top_k_tie_broken_by_id():
    S = ScoreMatrix.from_array(np.array([[0.9], [0.1], [0.9], [0.5]]), row_ids=list("abcd"), col_ids=["q"])
    assert top_k_group(S, "q", 2).track_ids == ("a", "c")


def test_top_k_ties_use_id_order_not_row_order():
    S = ScoreMatrix.from_array(np.array([[1.0], [1.0], [1.0]]), row_ids=["z", "m", "a"], col_ids=["q"])
    assert top_k_group(S, "q", 2).track_ids == ("a", "m")


def test_top_k_full():
    S = ScoreMatrix.from_array(np.random.default_rng(0).random((5, 1)), col_ids=["q"])
    assert set(top_k_group(S, "q", 5).track_ids) == set(S.row_ids)


def test_top_k_sort_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.random(30)
        S = ScoreMatrix.from_array(x[:, None], col_ids=["q"])
        expect = tuple(S.row_ids[i] for i in sorted(range(30), key=lambda i: (-x[i], S.row_ids[i]))[:3])
        assert top_k_group(S, "q", 3).track_ids == expect


def test_top_k_skips_excluded():
    S = ScoreMatrix.from_array(np.array([[3.0], [2.0], [1.0]]), row_ids=list("abc"), col_ids=["q"])
    g = top_k_group(S, "q", 2, exclude={"a"})
    assert g.track_ids == ("b", "c")
    assert g.skipped_missing == 1


def test_top_k_errors():
    S = ScoreMatrix.from_array(np.ones((3, 1)), col_ids=["q"])
    with pytest.raises(InputError):
        top_k_group(S, "nope", 2)
    with pytest.raises(InputError):
        top_k_group(S, "q", 4)


def _fs_one_vector(X):
    n = len(X)
    spec = FeatureSpec("v", "c", "standardized-euclidean", X.shape[1])
    return make_feature_set([f"t{i}" for i in range(n)], [spec], {"v": X}, {})


def test_group_similarity_k2_and_identical():
    X = np.random.default_rng(2).standard_normal((6, 2))
    fs = _fs_one_vector(X)
    spec = fs.spec("v")
    g = group_similarity(TrackGroup("q", 2, ("t1", "t4")), spec, fs)
    assert g == pytest.approx(feature_similarity(spec, X[1], X[4]), abs=1e-15)
    X2 = X.copy()
    X2[:3] = X2[0]
    fs2 = _fs_one_vector(X2)
    assert group_similarity(TrackGroup("q", 3, ("t0", "t1", "t2")), fs2.spec("v"), fs2) == 1.0


def test_defaults():
    assert DEFAULT_B == 200
    assert DEFAULT_K_LIST == (20, 50, 100, 200, 300, 400, 500)


def test_forced_identical_groups_degenerate(caplog):
    fs = _fs_one_vector(np.random.default_rng(3).standard_normal((8, 2)))
    null = build_null_model(fs, None, 3, 2, groups=[[0, 1, 2], [0, 1, 2]])
    assert null.feature_std[0] == 0.0
    assert "v" in null.degenerate_features
    assert "c" in null.degenerate_channels


def test_null_mean_against_exhaustive_enumeration():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((10, 3))
    fs = _fs_one_vector(X)
    eng = SimilarityEngine(fs)
    every = np.array([eng.g("v", np.array(c)) for c in itertools.combinations(range(10), 3)])
    null = build_null_model(fs, None, 3, 50, seed=11, engine=eng)
    se = every.std() / np.sqrt(50)
    assert abs(null.feature_mean[0] - every.mean()) < 3 * se


def test_null_sampling_reproducible():
    pool = np.arange(100)
    a = sample_null_groups(pool, 10, 5, seed=3)
    b = sample_null_groups(pool, 10, 5, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(len(set(g)) == 10 for g in a)


def _two_channel_fs(n=40, seed=5):
    rng = np.random.default_rng(seed)
    specs = [
        FeatureSpec("a", "c1", "standardized-euclidean", 2),
        FeatureSpec("b", "c1", "standardized-euclidean", 3),
        FeatureSpec("s", "c2", "lcs-sequence"),
    ]
    seqs = [rng.integers(0, 12, size=rng.integers(3, 8)) for _ in range(n)]
    vecs = {"a": rng.standard_normal((n, 2)), "b": rng.standard_normal((n, 3))}
    return make_feature_set([f"t{i:02d}" for i in range(n)], specs, vecs, {"s": seqs})


def test_channel_z_at_null_means():
    fs = _two_channel_fs()
    null = build_null_model(fs, None, 4, 30, seed=1)
    # g_d = mu_d for every d -> standardized mean is 0 -> z = -mu_c / sigma_c
    z = channel_z_from_g(null.feature_mean[None, :], null)[0]
    np.testing.assert_allclose(z, -null.channel_mean / null.channel_std, atol=1e-12)


def test_channel_z_step_by_step():
    fs = _two_channel_fs()
    null = build_null_model(fs, ["c1"], 4, 30, seed=2)
    group = TrackGroup("q", 4, ("t03", "t07", "t11", "t30"))
    eng = SimilarityEngine(fs)
    idx = np.array([3, 7, 11, 30])
    za = (eng.g("a", idx) - null.feature_mean[0]) / null.feature_std[0]
    zb = (eng.g("b", idx) - null.feature_mean[1]) / null.feature_std[1]
    expect = ((za + zb) / 2 - null.channel_mean[0]) / null.channel_std[0]
    assert channel_z(group, "c1", fs, null) == pytest.approx(expect, abs=1e-12)


def test_channel_z_wrong_k():
    fs = _two_channel_fs()
    null = build_null_model(fs, None, 4, 10)
    with pytest.raises(InputError):
        channel_z(TrackGroup("q", 3, ("t00", "t01", "t02")), "c1", fs, null)


def test_null_self_consistency():
    fs = _two_channel_fs(n=60)
    null = build_null_model(fs, None, 5, 200, seed=3)
    z = channel_z_from_g(null.group_g, null)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)


def test_summarize_counting():
    s = summarize([2.5, -1.0, 0.5])
    assert s.z_mean == pytest.approx(2 / 3)
    assert s.pos == pytest.approx(2 / 3)
    assert s.sig == pytest.approx(1 / 3)


def test_summarize_threshold_strict():
    s = summarize([1.96, 1.96, 0.0, 2.0])
    assert s.sig == 0.25
    assert s.pos == 0.75


def test_summarize_all_negative_and_empty():
    s = summarize([-1.0, -0.1])
    assert s.pos == 0 and s.sig == 0
    with pytest.raises(InputError):
        summarize([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=50))
def test_summarize_oracle(z):
    s = summarize(z)
    assert s.z_mean == pytest.approx(sum(z) / len(z), abs=1e-12)
    assert s.pos == sum(1 for v in z if v > 0) / len(z)
    assert s.sig == sum(1 for v in z if v > 1.96) / len(z)


def test_stratify_partition():
    z = {"q0": 1.0, "q1": 3.0, "q2": -1.0, "q3": 0.0, "q4": 7.0}
    labels = QueryLabels({"q0": "a", "q1": "a", "q2": "b", "q3": "b"})
    out = stratify_summary(z, labels)
    assert out["strata"]["a"].z_mean == 2.0
    assert out["strata"]["b"].z_mean == -0.5
    assert out["unlabeled"] == 1 and out["n_labeled"] == 4


def test_stratify_single_label_equals_summarize():
    z = {f"q{i}": float(v) for i, v in enumerate(np.random.default_rng(6).standard_normal(20))}
    out = stratify_summary(z, QueryLabels({q: "all" for q in z}))
    assert out["strata"]["all"] == summarize(list(z.values()))


def test_stratify_groupby_oracle():
    rng = np.random.default_rng(7)
    z = {f"q{i}": float(v) for i, v in enumerate(rng.standard_normal(100))}
    lab = {q: str(rng.integers(0, 4)) for q in z}
    out = stratify_summary(z, QueryLabels(lab))
    for label, s in out["strata"].items():
        vals = [v for q, v in z.items() if lab[q] == label]
        assert s.z_mean == pytest.approx(np.mean(vals), abs=1e-12)
        assert s.n == len(vals)


def test_sweep_composition_oracle():
    fs = _two_channel_fs()
    rng = np.random.default_rng(8)
    S = ScoreMatrix.from_array(rng.random((40, 3)), row_ids=fs.tracks, col_ids=["q0", "q1", "q2"])
    null = build_null_model(fs, None, 2, 40, seed=4)
    rep = homogeneity_sweep(S, fs, None, [2], {2: null})[2]
    for j, q in enumerate(S.col_ids):
        g = top_k_group(S, q, 2)
        for c in ("c1", "c2"):
            assert rep.z_by_query(c)[q] == pytest.approx(channel_z(g, c, fs, null), abs=1e-12)


def test_sweep_identical_columns():
    fs = _two_channel_fs()
    col = np.random.default_rng(9).random(40)
    S = ScoreMatrix.from_array(np.tile(col[:, None], (1, 4)), row_ids=fs.tracks)
    rep = homogeneity_sweep(S, fs, None, [5], B=20)[5]
    assert np.all(rep.z == rep.z[0])


def test_sweep_reuses_null_and_labels():
    fs = _two_channel_fs()
    S = ScoreMatrix.from_array(np.random.default_rng(10).random((40, 6)), row_ids=fs.tracks)
    labels = QueryLabels({q: "x" if i % 2 else "y" for i, q in enumerate(S.col_ids)})
    reps = homogeneity_sweep(S, fs, ["c1"], [3, 4], B=20, seed=2, labels=labels)
    assert set(reps) == {3, 4}
    assert reps[3].channels == ("c1",)
    assert set(reps[3].strata["c1"]["strata"]) == {"x", "y"}
    d = reps[3].to_dict()
    assert d["channels"]["c1"]["n"] == 6


def test_sweep_workers_identical():
    fs = _two_channel_fs()
    S = ScoreMatrix.from_array(np.random.default_rng(11).random((40, 5)), row_ids=fs.tracks)
    a = homogeneity_sweep(S, fs, None, [4], B=30, seed=3, workers=1)[4]
    b = homogeneity_sweep(S, fs, None, [4], B=30, seed=3, workers=4)[4]
    assert a.z.tobytes() == b.z.tobytes()


def test_missing_tracks_excluded_from_groups():
    fs = generate_features(30, SMALL_LAYOUT, seed=1)
    vecs = {k: v.copy() for k, v in fs.vectors.items()}
    for v in vecs.values():
        v[0] = np.nan
    fs2 = make_feature_set(fs.tracks, fs.features, vecs, fs.sequences, missing=[fs.tracks[0]])
    x = np.zeros((30, 1))
    x[0] = 10.0
    S = ScoreMatrix.from_array(x, row_ids=fs.tracks)
    rep = homogeneity_sweep(S, fs2, None, [3], B=10)[3]
    assert rep.skipped_missing == 1


def test_coherence_zero_indistinguishable():
    # planted group with coherence 0 behaves like any random group
    zs = []
    for seed in range(100):
        fs = generate_features(200, SMALL_LAYOUT, planted_group=range(20), coherence=0.0, seed=seed)
        null = build_null_model(fs, ["rhythmic"], 20, 30, seed=seed)
        zs.append(channel_z(TrackGroup("q", 20, fs.tracks[:20]), "rhythmic", fs, null))
    assert abs(np.mean(zs)) <= 0.3
