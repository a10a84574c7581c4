"""Homogeneity of a planted-collapse matrix before and after rank-1 removal.

    python scripts/residual_flip.py --seeds 10 --coherence 0.9
"""
import argparse
import json

from aria.bench import SMALL_LAYOUT, PlantedSpec, generate_features, generate_matrix
from aria.residual import residual_homogeneity_sweep


def run(seed: int, coherence: float, m: int = 600, t: int = 40, K: int = 50, B: int = 200) -> list[dict]:
    bench = generate_matrix(PlantedSpec("collapsed-rank1", M=m, T=t, seed=seed, collapse_strength=0.9, planted_size=120))
    fs = generate_features(m, SMALL_LAYOUT, bench.truth["planted_group"], coherence, seed, coherent_channels=["harmonic"])
    rep = residual_homogeneity_sweep(bench.matrix, fs, mode="zscore", K_list=[K], B=B, seed=seed)
    return [{"seed": seed, **row} for row in rep.rows()]


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--coherence", type=float, default=0.9)
    a = ap.parse_args()
    for s in range(a.seeds):
        for row in run(s, a.coherence):
            print(json.dumps(row))
