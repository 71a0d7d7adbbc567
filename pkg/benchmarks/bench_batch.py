#!/usr/bin/env python3
"""Compare the numba batch kernel against the pure-numpy fallback.

Runs the same 10,000-particle batch through a 100-layer line twice, once per
kernel path, in separate subprocesses (the path is chosen at import time via
the POLYTRACK_DISABLE_NUMBA environment variable).

Usage: python3 benchmarks/bench_batch.py [n_particles] [n_layers]
"""

import json
import os
import subprocess
import sys
import time

_WORKER = "_POLYTRACK_BENCH_WORKER"


def _worker(n_particles: int, n_layers: int) -> dict:
    import numpy as np

    from polytrack import kernels
    from polytrack.lattice import parse_lattice, split_at_monitors
    from polytrack.network import build_network, forward_batch

    cells = n_layers // 4
    text = "\n".join([
        "d: drift, l=0.5;",
        "qf: quadrupole, l=0.5, k1=0.6;",
        "qd: quadrupole, l=0.5, k1=-0.6;",
        "sx: sextupole, l=0.2, k2=1.0;",
        "line: sequence = (" + ", ".join(["qf, d, sx, qd"] * cells) + ");",
    ])
    net = build_network(split_at_monitors(parse_lattice(text)),
                        merge_policy="per_element")
    rng = np.random.default_rng(20260826)
    x0s = rng.uniform(-1e-3, 1e-3, size=(n_particles, 4))

    forward_batch(net, x0s[:64])  # warm up (numba compilation)
    times = []
    for _ in range(5):
        t0 = time.perf_counter()
        out, _ = forward_batch(net, x0s)
        times.append(time.perf_counter() - t0)
    return {
        "kernel": "numba" if kernels.USING_NUMBA else "numpy",
        "particles": n_particles,
        "layers": len(net.layers),
        "best_s": min(times),
        "mean_s": sum(times) / len(times),
        "checksum": float(np.sum(out)),
    }


def main() -> int:
    if os.environ.get(_WORKER):
        n_particles, n_layers = map(int, sys.argv[1:3])
        print(json.dumps(_worker(n_particles, n_layers)))
        return 0

    n_particles = int(sys.argv[1]) if len(sys.argv) > 1 else 10_000
    n_layers = int(sys.argv[2]) if len(sys.argv) > 2 else 100
    results = {}
    for disable, name in (("", "numba"), ("1", "numpy")):
        env = dict(os.environ, POLYTRACK_DISABLE_NUMBA=disable)
        env[_WORKER] = "1"
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__),
             str(n_particles), str(n_layers)],
            env=env, capture_output=True, text=True, check=True)
        results[name] = json.loads(proc.stdout.strip().splitlines()[-1])

    for name, r in results.items():
        print(f"{r['kernel']:>6}: best {r['best_s'] * 1e3:8.1f} ms, "
              f"mean {r['mean_s'] * 1e3:8.1f} ms "
              f"({r['particles']} particles x {r['layers']} layers)")
    if results["numba"]["kernel"] != "numba":
        print("note: numba unavailable; both runs used the numpy fallback")
    else:
        speedup = results["numpy"]["best_s"] / results["numba"]["best_s"]
        print(f"numba speedup: {speedup:.2f}x")
    if abs(results["numba"]["checksum"] - results["numpy"]["checksum"]) > 1e-9:
        print("WARNING: kernel outputs differ")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
