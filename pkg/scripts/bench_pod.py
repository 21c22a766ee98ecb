"""Wall-clock and accuracy of the Jacobi POD on snapshot-sized matrices.

    python3 scripts/bench_pod.py [--sizes 512x32 2000x200 8192x600]
"""

import argparse
import time

import numpy as np

from poddet.pod import compute_pod


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", nargs="+", default=["512x32", "2000x200", "8192x600"])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print("shape,seconds,recon_rel,orth")
    for spec in args.sizes:
        m, n = (int(v) for v in spec.split("x"))
        # decaying spectrum, closer to real activations than white noise
        S = rng.normal(size=(m, n)) * np.geomspace(1.0, 1e-3, n)
        t0 = time.perf_counter()
        b = compute_pod(S)
        dt = time.perf_counter() - t0
        k = b.rank
        recon = np.linalg.norm(S - b.modes * b.singular_values @ b.right_vectors.T) / np.linalg.norm(S)
        orth = np.linalg.norm(b.modes.T @ b.modes - np.eye(k))
        print(f"{spec},{dt:.3f},{recon:.2e},{orth:.2e}")


if __name__ == "__main__":
    main()
