"""Time `aria diagnose` on a large float32 ASM1 matrix and report peak resident memory.

    python scripts/perf_diagnose.py --m 1000000 --t 512 --path /tmp/perf.asm1
"""
import argparse
import json
import resource
import subprocess
import sys
import time
from pathlib import Path

from aria.bench import PlantedSpec, write_matrix_asm1


def run(m: int, t: int, path: Path, regime: str = "query-dependent", seed: int = 7, keep: bool = False) -> dict:
    if not path.exists():
        t0 = time.perf_counter()
        write_matrix_asm1(PlantedSpec(regime, M=m, T=t, seed=seed, precision="float32"), path)
        print(f"generated {m}x{t} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    out = path.with_suffix(".report.json")
    cmd = [sys.executable, "-m", "aria.cli", "diagnose", "--matrix", str(path), "--kappa-max-queries", "1024",
           "--svd-k", "8", "--seed", str(seed), "--out", str(out)]
    t0 = time.perf_counter()
    proc = subprocess.run(cmd, capture_output=True, text=True)
    wall = time.perf_counter() - t0
    # ru_maxrss is in KiB on Linux; RUSAGE_CHILDREN covers the finished subprocess
    rss_gb = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss / 2**20
    result = {"m": m, "t": t, "returncode": proc.returncode, "seconds": wall, "peak_rss_gb": rss_gb, "stderr": proc.stderr[-2000:]}
    if proc.returncode == 0:
        rep = json.loads(out.read_text())
        result.update(r1=rep["r1"], kappa=rep["kappa"], p=rep["p"], svd=rep["svd"])
    if not keep:
        path.unlink(missing_ok=True)
        out.unlink(missing_ok=True)
    return result


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--m", type=int, default=1_000_000)
    ap.add_argument("--t", type=int, default=512)
    ap.add_argument("--path", type=Path, default=Path("/tmp/aria_perf.asm1"))
    ap.add_argument("--keep", action="store_true")
    a = ap.parse_args()
    print(json.dumps(run(a.m, a.t, a.path, keep=a.keep), indent=2))
