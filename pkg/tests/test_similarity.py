import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aria.data import FeatureSpec, make_feature_set
from aria.errors import InputError
from aria.similarity import SimilarityEngine, feature_similarity, lcs_similarity, vector_similarity


def lcs_oracle(a, b):
    # textbook full-table DP
    T = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            T[i + 1][j + 1] = T[i][j] + 1 if x == y else max(T[i][j + 1], T[i + 1][j])
    return T[-1][-1]


def test_identical_vectors():
    std = np.array([1.0, 2.0])
    assert vector_similarity([1, 2], [1, 2], std) == 1.0


def test_unit_standardized_distance():
    assert vector_similarity([0.0, 0.0], [2.0, 0.0], np.array([2.0, 1.0])) == 0.5


def test_zero_std_dimension_ignored():
    assert vector_similarity([0.0, 5.0], [0.0, -5.0], np.array([1.0, 0.0])) == 1.0


def test_dimension_mismatch():
    with pytest.raises(InputError):
        vector_similarity([1.0], [1.0, 2.0], np.ones(2))


def test_lcs_example():
    spec = FeatureSpec("chords", "harmonic", "lcs-sequence")
    assert feature_similarity(spec, [2, 5, 7], [2, 7]) == pytest.approx(2 / 3)


def test_lcs_empty_conventions():
    assert lcs_similarity([], []) == 1.0
    assert lcs_similarity([], [3]) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 11), max_size=30), st.lists(st.integers(0, 11), max_size=30))
def test_lcs_matches_dp_oracle(a, b):
    if not a and not b:
        expect = 1.0
    elif not a or not b:
        expect = 0.0
    else:
        expect = lcs_oracle(a, b) / max(len(a), len(b))
    assert lcs_similarity(a, b) == pytest.approx(expect, abs=1e-15)
    assert lcs_similarity(a, b) == lcs_similarity(b, a)


def _toy_fs(n=12, seed=0):
    rng = np.random.default_rng(seed)
    specs = [
        FeatureSpec("v", "c1", "standardized-euclidean", 3),
        FeatureSpec("s", "c2", "lcs-sequence"),
    ]
    seqs = [rng.integers(0, 12, size=rng.integers(0, 9)) for _ in range(n)]
    return make_feature_set([f"t{i}" for i in range(n)], specs, {"v": rng.standard_normal((n, 3))}, {"s": seqs})


@pytest.mark.parametrize("table_max", [0, 8000])
def test_group_mean_matches_exhaustive_pairs(table_max):
    fs = _toy_fs()
    eng = SimilarityEngine(fs, lcs_table_max=table_max)
    idx = np.array([0, 3, 5, 9])
    for spec in fs.features:
        vals = fs.sequences[spec.id] if spec.is_sequence else fs.vectors[spec.id]
        pairs = [feature_similarity(spec, vals[a], vals[b]) for a, b in itertools.combinations(idx, 2)]
        assert len(pairs) == 6
        assert eng.g(spec.id, idx) == pytest.approx(np.mean(pairs), abs=1e-12)


def test_two_track_group_is_pair_similarity():
    fs = _toy_fs()
    eng = SimilarityEngine(fs)
    spec = fs.spec("v")
    expect = feature_similarity(spec, fs.vectors["v"][1], fs.vectors["v"][7])
    assert eng.g("v", np.array([1, 7])) == pytest.approx(expect, abs=1e-15)


def test_identical_values_give_one():
    X = np.tile([1.0, 2.0], (5, 1))
    X[4] = [0.0, 0.0]
    fs = make_feature_set(list("abcde"), [FeatureSpec("v", "c", "standardized-euclidean", 2)], {"v": X}, {})
    assert SimilarityEngine(fs).g("v", np.array([0, 1, 2, 3])) == 1.0


def test_singleton_group_rejected():
    with pytest.raises(InputError):
        SimilarityEngine(_toy_fs()).g("v", np.array([2]))
