"""Diagnose planted matrices of every regime and report how often the regime is recovered.

    python scripts/bench_regimes.py --seeds 20 --m 2000 --t 64
"""
import argparse
import json

from aria.bench import REGIMES, PlantedSpec, classify_regime, generate_matrix
from aria.reliability import diagnose


def run(seeds: int, m: int, t: int, strength: float = 0.9) -> dict:
    out = {}
    for regime in REGIMES:
        expect = "query-dependent" if regime == "iid-noise" else regime
        hits, r1, kappa, p = 0, [], [], []
        for seed in range(seeds):
            rep = diagnose(generate_matrix(PlantedSpec(regime, M=m, T=t, seed=seed, collapse_strength=strength)).matrix)
            hits += classify_regime(rep.r1, rep.kappa, rep.p) == expect
            r1.append(rep.r1)
            kappa.append(rep.kappa)
            p.append(rep.p)
        out[regime] = {
            "recovered": f"{hits}/{seeds}",
            "r1": [min(r1), max(r1)],
            "kappa": [min(kappa), max(kappa)],
            "p": [min(p), max(p)],
        }
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--m", type=int, default=2000)
    ap.add_argument("--t", type=int, default=64)
    ap.add_argument("--collapse-strength", type=float, default=0.9)
    a = ap.parse_args()
    print(json.dumps(run(a.seeds, a.m, a.t, a.collapse_strength), indent=2))
