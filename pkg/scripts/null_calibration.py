"""Null calibration of channel z-scores over many seeds.

Each seed draws a feature set, fits the null on B random groups and scores
fresh held-out groups. Prints per-seed moments and the pass rate of each bound.

    python scripts/null_calibration.py --seeds 10
"""
import argparse
import json

import numpy as np

from aria.bench import AUDIO_LAYOUT, generate_features
from aria.homogeneity import SIG_THRESHOLD, build_null_model, channel_z_from_g, sample_null_groups
from aria.similarity import SimilarityEngine


def calibrate(seed: int, n: int = 2000, K: int = 300, B: int = 200, held_out: int = 200) -> dict:
    fs = generate_features(n, AUDIO_LAYOUT, seed=seed)
    engine = SimilarityEngine(fs)
    null = build_null_model(fs, None, K, B, seed, engine=engine)
    groups = sample_null_groups(np.arange(n), K, held_out, seed + 1000003)
    z = channel_z_from_g(np.vstack([engine.g_all(g) for g in groups]), null)
    return {
        "seed": seed,
        "channels": list(null.channels),
        "mean": z.mean(axis=0).round(4).tolist(),
        "std": z.std(axis=0).round(4).tolist(),
        "sig_per_channel": np.mean(z > SIG_THRESHOLD, axis=0).tolist(),
        "sig_pooled": float(np.mean(z > SIG_THRESHOLD)),
    }


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=0)
    a = ap.parse_args()
    rows = [calibrate(s) for s in range(a.first_seed, a.first_seed + a.seeds)]
    for r in rows:
        print(json.dumps(r))
    mean_ok = sum(all(abs(m) <= 0.15 for m in r["mean"]) for r in rows)
    std_ok = sum(all(0.8 <= s <= 1.2 for s in r["std"]) for r in rows)
    pooled_ok = sum(0.01 <= r["sig_pooled"] <= 0.04 for r in rows)
    channel_ok = sum(all(0.01 <= s <= 0.04 for s in r["sig_per_channel"]) for r in rows)
    print(json.dumps({"seeds": len(rows), "mean_ok": mean_ok, "std_ok": std_ok,
                      "sig_pooled_ok": pooled_ok, "sig_per_channel_ok": channel_ok}))
