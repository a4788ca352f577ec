"""Time the hot kernels and one full-batch GD step under the active backend.

    python benchmarks/bench_kernels.py
    DEEPLIMITS_DISABLE_JIT=1 python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from deeplimits import _kernels as K
from deeplimits.descent import batch_gradient
from deeplimits.functions import hypercube, parity_function
from deeplimits.netdag import ActivationSpec, layered_net, random_dag
from deeplimits.rng import make_rng


def best(fn, repeat=5):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    rng = make_rng(0)
    V, E, B = 2000, 20000, 256
    src = rng.integers(0, V, E).astype(np.int64)
    tgt = rng.integers(0, V, E).astype(np.int64)
    w = rng.normal(size=E)
    Y = rng.normal(size=(V, B))
    Dp = rng.normal(size=(V, B))
    pre = np.zeros_like(Y)
    rows = np.arange(B, dtype=np.int64)
    scale = rng.normal(size=(B, 1))
    weight = np.full((B, 1), 1.0 / B)
    out = np.zeros(E)
    x = rng.normal(size=1 << 18)
    print(f"backend: {K.BACKEND}")
    print(f"scatter_forward  {E} edges x {B}: {best(lambda: K.scatter_forward(Y, pre, src, tgt, w)) * 1e3:8.2f} ms")
    print(f"scatter_backward {E} edges x {B}: {best(lambda: K.scatter_backward(pre, Dp, src, tgt, w)) * 1e3:8.2f} ms")
    print(f"clipped_accum    {E} edges x {B}: "
          f"{best(lambda: K.clipped_accumulate(Y, Dp, src, tgt, rows, scale, weight, 0.5, out)) * 1e3:8.2f} ms")
    print(f"piecewise_cubic  {x.size}: {best(lambda: K.piecewise_cubic(x, 0.01, 0.02, True)) * 1e3:8.2f} ms")

    act = ActivationSpec.rectifier(output_identity=True)
    net = layered_net([14, 64, 64, 1], rng, init="kaiming-uniform")
    X = hypercube(14)
    f = parity_function(14, 0b1011)
    Yl = f(X)[:, None]
    W = np.full((X.shape[0], 1), 1.0 / X.shape[0])
    t = best(lambda: batch_gradient(net, act, X, Yl, W, clip=10.0), repeat=3)
    print(f"full-batch clipped gradient, 2^14 x (14-64-64-1): {t * 1e3:8.2f} ms")

    dag = random_dag(rng, 8, 400, 4000, extra=0.02)
    act = ActivationSpec.cubic_saturating()
    Xd = rng.uniform(-1, 1, size=(512, 8))
    Yd = np.zeros((512, 1))
    Wd = np.full((512, 1), 1.0 / 512)
    t = best(lambda: batch_gradient(dag, act, Xd, Yd, Wd, clip=1.0), repeat=3)
    print(f"sparse DAG gradient, {dag.edge_count} edges x 512: {t * 1e3:8.2f} ms")


if __name__ == "__main__":
    main()
