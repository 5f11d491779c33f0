"""Compare the numba kernels with their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes mirror the shipped L=3, H=8 graph (322 edges) with a 64-pair batch.
Each row reports the best-of-``repeat`` wall time per call and checks that
both paths agree.
"""

import argparse
import time

import numpy as np

from eapstab import _kernels as K
from eapstab.graph import build_dag
from eapstab.model import ModelConfig


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba unavailable (or EAPSTAB_DISABLE_NUMBA set); nothing to compare")

    rng = np.random.default_rng(0)
    dag = build_dag(ModelConfig())
    B, T, d = 64, 12, 32
    n_up = dag.n_nodes - 1
    delta = rng.standard_normal((n_up, B, T, d))
    grad = rng.standard_normal((n_up, B, T, d))
    keep = rng.random(dag.n_edges) < 0.1
    member = rng.random((200, dag.n_edges)) < 0.1

    d3 = np.ascontiguousarray(delta.reshape(n_up, B, -1))
    g3 = np.ascontiguousarray(grad.reshape(n_up, B, -1))
    up, down = dag.up_idx.astype(np.int64), dag.down_idx.astype(np.int64)

    cases = [
        (
            "edge_contract",
            lambda: K.edge_contract_numpy(delta, grad, dag.up_idx, dag.down_idx),
            lambda: K._edge_contract_nb(d3, g3, up, down),
            lambda a, b: np.allclose(a, b, rtol=1e-12, atol=1e-9),
        ),
        (
            "io_reachable",
            lambda: K.io_reachable_numpy(dag.n_nodes, dag.src, dag.dst, keep),
            lambda: K._io_reachable_nb(dag.n_nodes, dag.src, dag.dst, keep),
            lambda a, b: bool(a) == bool(b),
        ),
        (
            "jaccard_matrix",
            lambda: K.jaccard_matrix_numpy(member),
            lambda: K._jaccard_matrix_nb(member),
            lambda a, b: np.allclose(a, b, rtol=0, atol=1e-15),
        ),
    ]
    print(f"{'kernel':<16}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}  agree")
    for name, f_np, f_nb, same in cases:
        t_np = best_of(f_np, args.repeat)
        t_nb = best_of(f_nb, args.repeat)
        print(f"{name:<16}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x  {same(f_np(), f_nb())}")


if __name__ == "__main__":
    main()
