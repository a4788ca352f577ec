"""Hot loops, compiled with numba when available.

Set ``DEEPLIMITS_DISABLE_JIT=1`` to force the pure-numpy versions. Both
backends are deterministic. They agree to rounding, not bit for bit, on the
clipped accumulation (summation order differs); the scatter kernels use the
same order and agree exactly.

Activation arrays are vertex-major, shape (vertices, batch); ``scale`` and
``weight`` are (batch, variants).
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("DEEPLIMITS_DISABLE_JIT", "").strip() not in ("", "0")

try:
    if _DISABLED:
        raise ImportError
    import numba as nb
except ImportError:  # pragma: no cover - exercised through the env flag
    nb = None

BACKEND = "numba" if nb is not None else "numpy"


# ---------------------------------------------------------------- numpy


def _np_scatter_forward(Y, pre, src, tgt, w):
    if src.size:
        np.add.at(pre, tgt, Y[src] * w[:, None])


def _np_scatter_backward(dY, Dp, src, tgt, w):
    if src.size:
        np.add.at(dY, src, Dp[tgt] * w[:, None])


def _np_clipped_accumulate(Y, Dp, src, tgt, rows, scale, weight, A, out):
    if rows.size == 0 or src.size == 0:
        return
    step = max(1, (1 << 22) // max(1, src.size))
    for lo in range(0, rows.size, step):
        r = rows[lo:lo + step]
        raw = Dp[tgt][:, r] * Y[src][:, r]
        for k in range(scale.shape[1]):
            g = np.clip(raw * scale[r, k], -A, A)
            out += g @ weight[r, k]


def _np_hermite(t, h, p0, p1, m0, m1):
    t2 = t * t
    t3 = t2 * t
    val = ((2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * h * m0
           + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * h * m1)
    der = ((6 * t2 - 6 * t) * p0 + (3 * t2 - 4 * t + 1) * h * m0
           + (-6 * t2 + 6 * t) * p1 + (3 * t2 - 2 * t) * h * m1) / h
    return val, der


def _np_piecewise_cubic(x, r, lo, dead):
    """Value and derivative of the saturating cubic, optionally with a dead zone."""
    a = np.abs(x)
    sgn = np.where(x < 0, -1.0, 1.0)
    val = x * x * x
    der = 3.0 * x * x
    mid = (a > 1.0) & (a < 1.5)
    if mid.any():
        v, d = _np_hermite((a[mid] - 1.0) / 0.5, 0.5, 1.0, 2.0, 3.0, 0.0)
        val[mid] = sgn[mid] * v
        der[mid] = d
    hi = a >= 1.5
    val[hi] = 2.0 * sgn[hi]
    der[hi] = 0.0
    if dead:
        z = a <= r
        val[z] = 0.0
        der[z] = 0.0
        join = (a > r) & (a < lo)
        if join.any():
            h = lo - r
            v, d = _np_hermite((a[join] - r) / h, h, 0.0, lo * lo * lo, 0.0, 3.0 * lo * lo)
            val[join] = sgn[join] * v
            der[join] = d
    return val, der


def _np_fwht(a):
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[-1]
    if n & (n - 1):
        raise ValueError("length must be a power of two")
    lead = a.shape[:-1]
    h = 1
    while h < n:
        v = a.reshape(lead + (n // (2 * h), 2, h))
        x = v[..., 0, :].copy()
        y = v[..., 1, :]
        v[..., 0, :] = x + y
        v[..., 1, :] = x - y
        h *= 2
    return a


# ---------------------------------------------------------------- numba

if nb is not None:

    @nb.njit(cache=True)
    def _nb_scatter_forward(Y, pre, src, tgt, w):
        B = Y.shape[1]
        for e in range(src.shape[0]):
            s = src[e]
            t = tgt[e]
            we = w[e]
            for b in range(B):
                pre[t, b] += Y[s, b] * we

    @nb.njit(cache=True)
    def _nb_scatter_backward(dY, Dp, src, tgt, w):
        B = Dp.shape[1]
        for e in range(src.shape[0]):
            s = src[e]
            t = tgt[e]
            we = w[e]
            for b in range(B):
                dY[s, b] += Dp[t, b] * we

    @nb.njit(cache=True)
    def _nb_clipped_accumulate(Y, Dp, src, tgt, rows, scale, weight, A, out):
        K = scale.shape[1]
        for e in range(src.shape[0]):
            s = src[e]
            t = tgt[e]
            acc = 0.0
            for i in range(rows.shape[0]):
                b = rows[i]
                raw = Dp[t, b] * Y[s, b]
                for k in range(K):
                    g = raw * scale[b, k]
                    if g > A:
                        g = A
                    elif g < -A:
                        g = -A
                    acc += weight[b, k] * g
            out[e] += acc

    @nb.njit(cache=True)
    def _nb_hermite(t, h, p0, p1, m0, m1):
        t2 = t * t
        t3 = t2 * t
        val = ((2 * t3 - 3 * t2 + 1) * p0 + (t3 - 2 * t2 + t) * h * m0
               + (-2 * t3 + 3 * t2) * p1 + (t3 - t2) * h * m1)
        der = ((6 * t2 - 6 * t) * p0 + (3 * t2 - 4 * t + 1) * h * m0
               + (-6 * t2 + 6 * t) * p1 + (3 * t2 - 2 * t) * h * m1) / h
        return val, der

    @nb.njit(cache=True)
    def _nb_piecewise_flat(x, r, lo, dead, val, der):
        for i in range(x.shape[0]):
            v = x[i]
            a = abs(v)
            s = -1.0 if v < 0 else 1.0
            if dead and a <= r:
                val[i] = 0.0
                der[i] = 0.0
            elif dead and a < lo:
                h = lo - r
                p, d = _nb_hermite((a - r) / h, h, 0.0, lo * lo * lo, 0.0, 3.0 * lo * lo)
                val[i] = s * p
                der[i] = d
            elif a <= 1.0:
                val[i] = v * v * v
                der[i] = 3.0 * v * v
            elif a < 1.5:
                p, d = _nb_hermite((a - 1.0) / 0.5, 0.5, 1.0, 2.0, 3.0, 0.0)
                val[i] = s * p
                der[i] = d
            else:
                val[i] = 2.0 * s
                der[i] = 0.0

    def _nb_piecewise_cubic(x, r, lo, dead):
        flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
        val = np.empty_like(flat)
        der = np.empty_like(flat)
        _nb_piecewise_flat(flat, float(r), float(lo), bool(dead), val, der)
        return val.reshape(np.shape(x)), der.reshape(np.shape(x))

    @nb.njit(cache=True)
    def _nb_fwht_inplace(a):
        rows, n = a.shape
        for r in range(rows):
            h = 1
            while h < n:
                for i in range(0, n, 2 * h):
                    for j in range(i, i + h):
                        x = a[r, j]
                        y = a[r, j + h]
                        a[r, j] = x + y
                        a[r, j + h] = x - y
                h *= 2

    def _nb_fwht(a):
        a = np.array(a, dtype=np.float64, copy=True)
        n = a.shape[-1]
        if n & (n - 1):
            raise ValueError("length must be a power of two")
        flat = np.ascontiguousarray(a.reshape(-1, n))
        _nb_fwht_inplace(flat)
        return flat.reshape(a.shape)

    scatter_forward = _nb_scatter_forward
    scatter_backward = _nb_scatter_backward
    clipped_accumulate = _nb_clipped_accumulate
    fwht = _nb_fwht
    piecewise_cubic = _nb_piecewise_cubic
else:
    scatter_forward = _np_scatter_forward
    scatter_backward = _np_scatter_backward
    clipped_accumulate = _np_clipped_accumulate
    fwht = _np_fwht
    piecewise_cubic = _np_piecewise_cubic

hermite = _np_hermite

numpy_impl = {
    "piecewise_cubic": _np_piecewise_cubic,
    "scatter_forward": _np_scatter_forward,
    "scatter_backward": _np_scatter_backward,
    "clipped_accumulate": _np_clipped_accumulate,
    "fwht": _np_fwht,
}
