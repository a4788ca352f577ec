"""Scalar-vertex neural nets on weighted DAGs.

A net has one constant vertex emitting 1, ``n`` input vertices emitting their
coordinate unactivated, and every other vertex emits ``act(sum_in w * y)``.
Evaluation and reverse-mode gradients run level by level over a batch of
inputs; a level whose edges fill at least half of its source x target block
is evaluated as one dense matrix product, other levels go through the
scatter kernels in :mod:`deeplimits._kernels`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (CycleDetected, DimensionMismatch, InvalidParameter,
                     NonFinite, SchemaMismatch)

KINDS = ("cubic-saturating", "dead-zone-cubic", "rectifier", "tabulated-piecewise")


# ---------------------------------------------------------------- activations


_hermite = _kernels.hermite


@dataclass(frozen=True)
class ActivationSpec:
    """Piecewise activation.

    ``cubic-saturating``: x**3 on |x| <= 1, sign(x)*2 on |x| >= 3/2, and a
    monotone cubic Hermite join in between.

    ``dead-zone-cubic``: 0 on |x| <= r, a Hermite join on (r, lower) matching
    value and slope at both ends, x**3 on [lower, 1], and the same saturating
    tail. ``lower`` defaults to 2r.

    ``tabulated-piecewise``: cubic Hermite through ``table = (xs, ys, dys)``,
    constant beyond the end knots.

    With ``output_identity`` the output vertex is left unactivated.
    """

    kind: str
    dead_zone_radius: float = 0.0
    lower_cubic_bound: float | None = None
    table: tuple | None = None
    output_identity: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameter(f"unknown activation kind {self.kind!r}")
        if self.kind == "dead-zone-cubic":
            r = float(self.dead_zone_radius)
            if not r >= 0:
                raise InvalidParameter("dead_zone_radius must be >= 0")
            lo = 2 * r if self.lower_cubic_bound is None else float(self.lower_cubic_bound)
            if not (r <= lo < 1):
                raise InvalidParameter("need radius <= lower cubic bound < 1")
            object.__setattr__(self, "lower_cubic_bound", lo)
        if self.kind == "tabulated-piecewise":
            if self.table is None:
                raise InvalidParameter("tabulated-piecewise needs a table")
            xs, ys, dys = (tuple(float(v) for v in col) for col in self.table)
            if not (len(xs) == len(ys) == len(dys) >= 2):
                raise InvalidParameter("table columns must have equal length >= 2")
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise InvalidParameter("table knots must be strictly increasing")
            object.__setattr__(self, "table", (xs, ys, dys))

    # constructors
    @classmethod
    def cubic_saturating(cls, output_identity=False):
        return cls("cubic-saturating", output_identity=output_identity)

    @classmethod
    def dead_zone_cubic(cls, radius, lower=None, output_identity=False):
        return cls("dead-zone-cubic", dead_zone_radius=radius,
                   lower_cubic_bound=lower, output_identity=output_identity)

    @classmethod
    def rectifier(cls, output_identity=False):
        return cls("rectifier", output_identity=output_identity)

    @classmethod
    def cosine_table(cls, lo=-8.0, hi=8.0, spacing=0.25, output_identity=False):
        """cos(pi*x) on [lo, hi]; knots include every integer, where the slope is exactly 0."""
        k = np.arange(round(lo / spacing), round(hi / spacing) + 1)
        xs = k * spacing
        ys = np.cos(np.pi * xs)
        dys = -np.pi * np.sin(np.pi * xs)
        whole = np.isclose(xs, np.round(xs))
        ys[whole] = np.where(np.round(xs[whole]).astype(int) % 2 == 0, 1.0, -1.0)
        dys[whole] = 0.0
        return cls("tabulated-piecewise", table=(xs, ys, dys), output_identity=output_identity)

    def joins(self):
        """Points where the piecewise definition switches branch."""
        if self.kind == "cubic-saturating":
            return (-1.5, -1.0, 1.0, 1.5)
        if self.kind == "dead-zone-cubic":
            r, lo = self.dead_zone_radius, self.lower_cubic_bound
            return (-1.5, -1.0, -lo, -r, r, lo, 1.0, 1.5)
        if self.kind == "rectifier":
            return (0.0,)
        return tuple(self.table[0])

    def __call__(self, x):
        return self.evaluate(x)[0]

    def derivative(self, x):
        return self.evaluate(x)[1]

    def evaluate(self, x):
        """Return (value, derivative) arrays for an array of pre-activations."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "rectifier":
            der = (x > 0).astype(np.float64)
            return x * der, der
        if self.kind == "tabulated-piecewise":
            return self._tabulated(x)
        dead = self.kind == "dead-zone-cubic"
        return _kernels.piecewise_cubic(x, self.dead_zone_radius,
                                        self.lower_cubic_bound if dead else 0.0, dead)

    def evaluate_into(self, x, val, der):
        """Write value and derivative of ``x`` into the given arrays."""
        if self.kind == "rectifier":
            np.copyto(der, x > 0)
            np.multiply(x, der, out=val)
            return
        v, d = self.evaluate(x)
        val[...] = v
        der[...] = d

    def _tabulated(self, x):
        xs, ys, dys = (np.asarray(c) for c in self.table)
        idx = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
        h = xs[idx + 1] - xs[idx]
        t = (x - xs[idx]) / h
        val, der = _hermite(t, h, ys[idx], ys[idx + 1], dys[idx], dys[idx + 1])
        below = x <= xs[0]
        above = x >= xs[-1]
        val = np.where(below, ys[0], np.where(above, ys[-1], val))
        der = np.where(below, np.where(x == xs[0], dys[0], 0.0),
                       np.where(above, np.where(x == xs[-1], dys[-1], 0.0), der))
        return val, der

    def to_dict(self):
        d = {"kind": self.kind, "output_identity": self.output_identity}
        if self.kind == "dead-zone-cubic":
            d["dead_zone_radius"] = repr(self.dead_zone_radius)
            d["lower_cubic_bound"] = repr(self.lower_cubic_bound)
        if self.kind == "tabulated-piecewise":
            d["table"] = [[repr(v) for v in col] for col in self.table]
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {"output_identity": bool(d.get("output_identity", False))}
        if d["kind"] == "dead-zone-cubic":
            kw["dead_zone_radius"] = float(d["dead_zone_radius"])
            kw["lower_cubic_bound"] = float(d["lower_cubic_bound"])
        if d["kind"] == "tabulated-piecewise":
            kw["table"] = tuple(tuple(float(v) for v in col) for col in d["table"])
        return cls(d["kind"], **kw)


# ---------------------------------------------------------------- losses


def loss_value(kind, out, target):
    if kind == "squared":
        return (out - target) ** 2
    if kind == "logistic":
        return np.logaddexp(0.0, -target * out)
    raise InvalidParameter(f"unknown loss {kind!r}")


def loss_derivative(kind, out, target):
    """dL/d(out)."""
    if kind == "squared":
        return 2.0 * (out - target)
    if kind == "logistic":
        z = -target * out
        return -target * np.exp(-np.logaddexp(0.0, -z))
    raise InvalidParameter(f"unknown loss {kind!r}")


# ---------------------------------------------------------------- the net


@dataclass(frozen=True, eq=False)
class NeuralNet:
    vertex_count: int
    constant_vertex: int
    input_vertices: tuple
    output_vertex: int
    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray
    _plan_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_vertices", tuple(int(v) for v in self.input_vertices))
        for name, dt in (("src", np.int64), ("dst", np.int64), ("weights", np.float64)):
            arr = np.array(getattr(self, name), dtype=dt)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.src.shape == self.dst.shape == self.weights.shape) or self.src.ndim != 1:
            raise DimensionMismatch("edge arrays must be 1-d and of equal length")
        self._check_structure()

    @classmethod
    def from_edges(cls, vertex_count, constant_vertex, input_vertices, output_vertex, edges):
        edges = list(edges)
        src = [int(e[0]) for e in edges]
        dst = [int(e[1]) for e in edges]
        w = [float(e[2]) for e in edges]
        return cls(vertex_count, constant_vertex, tuple(input_vertices), output_vertex,
                   np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
                   np.array(w, dtype=np.float64))

    @property
    def n(self):
        return len(self.input_vertices)

    @property
    def edge_count(self):
        return int(self.src.size)

    @property
    def edges(self):
        return [(int(s), int(t), float(w)) for s, t, w in zip(self.src, self.dst, self.weights)]

    def with_weights(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != self.weights.shape:
            raise DimensionMismatch("weight vector length differs from edge count")
        other = NeuralNet.__new__(NeuralNet)
        for name in ("vertex_count", "constant_vertex", "input_vertices", "output_vertex",
                     "src", "dst"):
            object.__setattr__(other, name, getattr(self, name))
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(other, "weights", w)
        object.__setattr__(other, "_plan_cache", self._plan_cache)
        return other

    def _check_structure(self):
        V = int(self.vertex_count)
        roles = [self.constant_vertex, *self.input_vertices, self.output_vertex]
        if V < 1 or any(not 0 <= v < V for v in roles):
            raise InvalidParameter("role vertex out of range")
        sources = {self.constant_vertex, *self.input_vertices}
        if len(sources) != 1 + len(self.input_vertices):
            raise InvalidParameter("constant and input vertices must be distinct")
        if self.output_vertex in sources:
            raise InvalidParameter("output vertex cannot be a source vertex")
        if self.src.size and (self.src.min() < 0 or self.dst.min() < 0
                              or self.src.max() >= V or self.dst.max() >= V):
            raise InvalidParameter("edge endpoint out of range")
        pairs = self.src * V + self.dst
        if np.unique(pairs).size != pairs.size:
            raise InvalidParameter("duplicate edge")
        indeg = np.bincount(self.dst, minlength=V)
        for v in sources:
            if indeg[v]:
                raise InvalidParameter(f"source vertex {v} has incoming edges")
        for v in range(V):
            if v not in sources and indeg[v] == 0:
                raise InvalidParameter(f"vertex {v} has no incoming edges")
        order = topo_order(self)
        reach = np.zeros(V, dtype=bool)
        reach[self.output_vertex] = True
        out_edges = _adjacency(self.src, self.dst, V)
        for v in reversed(order):
            if any(reach[t] for t in out_edges[v]):
                reach[v] = True
        for v in range(V):
            if v not in sources and not reach[v]:
                raise InvalidParameter(f"vertex {v} has no path to the output")

    def plan(self):
        p = self._plan_cache.get("plan")
        if p is None:
            p = _Plan(self)
            self._plan_cache["plan"] = p
        return p


def _adjacency(src, dst, V):
    out = [[] for _ in range(V)]
    for s, t in zip(src.tolist(), dst.tolist()):
        out[s].append(t)
    return out


def _levels(net):
    V = net.vertex_count
    indeg = np.bincount(net.dst, minlength=V).astype(np.int64)
    out = _adjacency(net.src, net.dst, V)
    level = np.zeros(V, dtype=np.int64)
    frontier = [v for v in range(V) if indeg[v] == 0]
    seen = 0
    while frontier:
        nxt = []
        for v in frontier:
            seen += 1
            for t in out[v]:
                level[t] = max(level[t], level[v] + 1)
                indeg[t] -= 1
                if indeg[t] == 0:
                    nxt.append(t)
        frontier = nxt
    if seen != V:
        raise CycleDetected("edge relation contains a cycle")
    return level


def topo_order(net):
    """Vertices sorted by longest-path depth, ties by id.

    Depth-0 vertices come first: the constant vertex, then the inputs in their
    declared order, then any other sourceless vertex.
    """
    level = _levels(net)
    head = [net.constant_vertex, *net.input_vertices]
    head_set = set(head)
    rest = sorted((v for v in range(net.vertex_count) if v not in head_set),
                  key=lambda v: (level[v], v))
    return head + rest


# ---------------------------------------------------------------- the engine


class _Cols:
    """A sorted set of vertex ids viewed as runs of consecutive ids.

    Layered nets give one or two runs per level, so blocks of the
    vertex-major work arrays are contiguous slices rather than gathers.
    """

    __slots__ = ("ids", "runs", "single")

    def __init__(self, ids):
        self.ids = ids
        cut = np.flatnonzero(np.diff(ids) != 1) + 1
        starts = np.concatenate([[0], cut]).astype(int)
        stops = np.concatenate([cut, [ids.size]]).astype(int)
        self.runs = [(int(ids[a]), int(ids[a]) + (b - a), a, b) for a, b in zip(starts, stops)]
        self.single = len(self.runs) == 1

    def take(self, A):
        if self.single:
            lo, hi = self.runs[0][:2]
            return A[lo:hi]
        return A[self.ids]

    def put(self, A, vals):
        if self.single:
            lo, hi = self.runs[0][:2]
            A[lo:hi] = vals
        else:
            A[self.ids] = vals

    def absmax(self, A):
        return np.max([np.abs(A[lo:hi]).max(axis=0) for lo, hi, _, _ in self.runs], axis=0)


class _Level:
    __slots__ = ("targets", "edge_idx", "src", "tgt", "dense", "S", "T", "rows", "cols", "out_j")


class _Plan:
    """Level decomposition of a net, reused across weight updates.

    Work arrays are held vertex-major, (V, B); the (B, V) arrays handed out
    are transposed views of them and are accepted back without copies.
    """

    density = 0.5

    def __init__(self, net):
        level = _levels(net)
        self.V = net.vertex_count
        self.const = net.constant_vertex
        self.inputs = np.array(net.input_vertices, dtype=np.int64)
        self.out = net.output_vertex
        self.levels = []
        order = np.lexsort((net.src, net.dst, level[net.dst]))
        lv_of_edge = level[net.dst][order]
        bounds = np.flatnonzero(np.diff(lv_of_edge)) + 1
        for chunk in np.split(order, bounds) if order.size else []:
            L = _Level()
            L.edge_idx = chunk
            L.src = net.src[chunk].copy()
            L.tgt = net.dst[chunk].copy()
            L.targets = np.unique(L.tgt)
            L.T = _Cols(L.targets)
            S = np.unique(L.src)
            L.S = _Cols(S)
            L.dense = (chunk.size >= 16 and chunk.size >= self.density * S.size * L.targets.size)
            L.rows = np.searchsorted(S, L.src)
            L.cols = np.searchsorted(L.targets, L.tgt)
            hit = np.flatnonzero(L.targets == self.out)
            L.out_j = int(hit[0]) if hit.size else None
            self.levels.append(L)
        hit = np.zeros(self.V, dtype=bool)
        for L in self.levels:
            hit[L.targets] = True
        self._untargeted = np.flatnonzero(~hit)
        self._entered = hit

    def _matrices(self, w):
        """Per-level weights: transposed dense blocks or edge vectors, cached for the last ``w``."""
        key = getattr(self, "_key", None)
        if key is not None and key[0] is w and np.array_equal(key[1], w):
            return self._mats
        mats = []
        for L in self.levels:
            wl = w[L.edge_idx]
            if L.dense:
                M = np.zeros((L.targets.size, L.S.ids.size))
                M[L.cols, L.rows] = wl
                mats.append([np.ascontiguousarray(M[:, a:b]) for _, _, a, b in L.S.runs])
            else:
                mats.append(wl)
        self._key = (w, np.array(w, copy=True))
        self._mats = mats
        return mats

    def _zeros(self, name, B, reuse, full=True):
        """Zeroed (V, B) work array; with ``reuse`` the buffer is kept between calls,
        so results from the previous call with the same name are overwritten.
        ``full=False`` zeroes only rows no level writes."""
        if not reuse:
            return np.zeros((self.V, B))
        pool = self.__dict__.setdefault("_pool", {})
        buf = pool.get(name)
        if buf is None or buf.shape[1] != B:
            buf = pool[name] = np.zeros((self.V, B))
        elif full:
            buf.fill(0.0)
        else:
            buf[self._untargeted] = 0.0
        return buf

    def forward(self, act, w, X, store_derivative=False, reuse=False):
        """Outputs and pre-activations, plus activation slopes if asked for."""
        X = np.asarray(X, dtype=np.float64)
        B = X.shape[0]
        Y = self._zeros("Y", B, reuse, full=False)
        pre = self._zeros("pre", B, reuse, full=False)
        D = self._zeros("D", B, reuse, full=False) if store_derivative else None
        Y[self.const] = 1.0
        if self.inputs.size:
            Y[self.inputs] = X.T
        for L, wl in zip(self.levels, self._matrices(w)):
            if L.dense and L.T.single:
                t0, t1 = L.T.runs[0][:2]
                z = pre[t0:t1]
                first = True
                for (lo, hi, _, _), M in zip(L.S.runs, wl):
                    # single-vertex runs (typically the constant) skip BLAS
                    if lo == self.const and hi - lo == 1:
                        if first:
                            z[...] = M
                        else:
                            z += M
                    elif hi - lo == 1:
                        if first:
                            np.multiply(M, Y[lo], out=z)
                        else:
                            z += M * Y[lo]
                    elif first:
                        np.matmul(M, Y[lo:hi], out=z)
                    else:
                        z += M @ Y[lo:hi]
                    first = False
            elif L.dense:
                acc = None
                for (lo, hi, _, _), M in zip(L.S.runs, wl):
                    part = M * Y[lo] if hi - lo == 1 else M @ Y[lo:hi]
                    acc = part if acc is None else acc + part
                L.T.put(pre, acc)
                z = acc
            else:
                L.T.put(pre, 0.0)
                _kernels.scatter_forward(Y, pre, L.src, L.tgt, wl)
                z = L.T.take(pre)
            if L.T.single:
                t0, t1 = L.T.runs[0][:2]
                der = D[t0:t1] if D is not None else np.empty_like(z)
                act.evaluate_into(z, Y[t0:t1], der)
                if act.output_identity and L.out_j is not None:
                    Y[t0 + L.out_j] = z[L.out_j]
                    der[L.out_j] = 1.0
                continue
            val, der = act.evaluate(z)
            if act.output_identity and L.out_j is not None:
                val[L.out_j] = z[L.out_j]
                der[L.out_j] = 1.0
            L.T.put(Y, val)
            if D is not None:
                L.T.put(D, der)
        if D is not None:
            return Y.T, pre.T, D.T
        return Y.T, pre.T

    def backward(self, act, w, Y, pre, d_out, D=None, reuse=False):
        """Return dL/d(pre-activation) for every vertex given dL/d(output).

        ``D`` holds activation slopes from a forward pass; without it they are
        recomputed from ``pre``.
        """
        pre = pre.T
        D = None if D is None else D.T
        B = pre.shape[1]
        dY = self._zeros("dY", B, reuse)
        Dp = self._zeros("Dp", B, reuse, full=False)
        dY[self.out] = d_out
        for L, wl in zip(reversed(self.levels), reversed(self._matrices(w))):
            if D is not None:
                der = L.T.take(D)
            else:
                der = act.evaluate(L.T.take(pre))[1]
                if act.output_identity and L.out_j is not None:
                    der[L.out_j] = 1.0
            if L.T.single:
                t0, t1 = L.T.runs[0][:2]
                dp = np.multiply(dY[t0:t1], der, out=Dp[t0:t1])
            else:
                dp = L.T.take(dY) * der
                L.T.put(Dp, dp)
            if L.dense:
                for (lo, hi, _, _), M in zip(L.S.runs, wl):
                    if not self._entered[lo:hi].any():
                        # sources that no edge enters never need dL/dY
                        continue
                    if hi - lo == 1:
                        dY[lo] += M[:, 0] @ dp
                    else:
                        dY[lo:hi] += M.T @ dp
            else:
                _kernels.scatter_backward(dY, Dp, L.src, L.tgt, wl)
        return Dp.T

    def accumulate(self, Y, Dp, scale, weight, A=math.inf):
        """Per-edge sum over samples b and variants k of
        ``weight[b,k] * clip(scale[b,k] * Dp[b,dst] * Y[b,src], -A, A)``.

        Samples whose bound max|scale| * max|Dp| * max|Y| cannot reach A are
        summed with merged coefficients (one matrix product for dense levels);
        the rest go through the clipping kernel.

        Returns (gradient, fraction of clipped per-sample coordinates).
        """
        Y = Y.T
        Dp = Dp.T
        B = Y.shape[1]
        E = sum(L.edge_idx.size for L in self.levels)
        grad = np.zeros(E)
        merged = (scale * weight).sum(axis=1)
        scale = np.ascontiguousarray(scale)
        weight = np.ascontiguousarray(weight)
        clipped = 0
        smax = np.abs(scale).max(axis=1)
        all_safe = math.isinf(A)
        if not all_safe:
            # whole-chunk bound first, then one bound per sample for the whole net
            ym = max(Y.max(), -Y.min())
            dm = max(Dp.max(), -Dp.min())
            all_safe = smax.max() * ym * dm <= A
        if not all_safe:
            all_safe = bool((smax * np.abs(Y).max(axis=0) * np.abs(Dp).max(axis=0) <= A).all())
        for L in self.levels:
            part = np.zeros(L.edge_idx.size)
            safe = None
            if not all_safe:
                safe = smax * L.T.absmax(Dp) * L.S.absmax(Y) <= A
                if safe.all():
                    safe = None
            hot = np.zeros(0, dtype=np.int64) if safe is None else np.flatnonzero(~safe)
            if hot.size < B:
                keep = None if safe is None else np.flatnonzero(safe)
                if L.dense:
                    dpm = L.T.take(Dp) * merged
                    if keep is not None:
                        dpm = dpm[:, keep]
                    G = np.empty((L.targets.size, L.S.ids.size))
                    for lo, hi, a, b in L.S.runs:
                        Ys = Y[lo:hi] if keep is None else Y[lo:hi][:, keep]
                        if lo == self.const and hi - lo == 1:
                            G[:, a] = dpm.sum(axis=1)
                        else:
                            G[:, a:b] = dpm @ Ys.T
                    part += G[L.cols, L.rows]
                else:
                    rows = np.arange(B) if keep is None else keep
                    _kernels.clipped_accumulate(Y, Dp, L.src, L.tgt, rows.astype(np.int64),
                                                np.ones((B, 1)), merged[:, None].copy(),
                                                math.inf, part)
            if hot.size:
                _kernels.clipped_accumulate(Y, Dp, L.src, L.tgt, hot.astype(np.int64),
                                            scale, weight, float(A), part)
                raw = np.abs(Dp[L.tgt][:, hot] * Y[L.src][:, hot])
                clipped += int((raw[None, :, :] * np.abs(scale[hot]).T[:, None, :] > A).sum())
            grad[L.edge_idx] = part
        total = B * scale.shape[1] * max(E, 1)
        return grad, clipped / total


@dataclass
class ForwardTrace:
    pre: np.ndarray
    out: np.ndarray


def _check_x(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != net.n:
        raise DimensionMismatch(f"expected {net.n} input coordinates, got shape {x.shape}")
    return x


def evaluate(net, act, x):
    """Output and full trace for one input vector."""
    x = _check_x(net, x)
    Y, pre = net.plan().forward(act, net.weights, x[None, :])
    if not (np.isfinite(Y).all() and np.isfinite(pre).all()):
        raise NonFinite("non-finite value during evaluation")
    return float(Y[0, net.output_vertex]), ForwardTrace(pre=pre[0].copy(), out=Y[0].copy())


def evaluate_batch(net, act, X, weights=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.n:
        raise DimensionMismatch(f"expected shape (B, {net.n}), got {X.shape}")
    w = net.weights if weights is None else weights
    Y, _ = net.plan().forward(act, w, X)
    out = Y[:, net.output_vertex].copy()
    if not np.isfinite(out).all():
        raise NonFinite("non-finite network output")
    return out


def loss_gradient(net, act, x, target, loss="squared"):
    """Exact d/dw of L(eval(x) - target), one entry per edge in edge order."""
    x = _check_x(net, x)
    plan = net.plan()
    Y, pre = plan.forward(act, net.weights, x[None, :])
    out = Y[0, net.output_vertex]
    d = loss_derivative(loss, np.array([out]), np.array([float(target)]))
    Dp = plan.backward(act, net.weights, Y, pre, d)
    g, _ = plan.accumulate(Y, Dp, np.ones((1, 1)), np.ones((1, 1)))
    if not np.isfinite(g).all():
        raise NonFinite("non-finite gradient")
    return g


def finite_diff_gradient(net, act, x, target, loss="squared", step=1e-6):
    """Central differences of the loss, one edge at a time."""
    if not step > 0:
        raise InvalidParameter("step must be positive")
    x = _check_x(net, x)[None, :]
    w0 = np.array(net.weights)
    plan = net.plan()
    t = float(target)
    g = np.empty_like(w0)
    for e in range(w0.size):
        vals = []
        for sign in (1.0, -1.0):
            w = w0.copy()
            w[e] += sign * step
            Y, _ = plan.forward(act, w, x)
            vals.append(loss_value(loss, Y[0, net.output_vertex], t))
        g[e] = (vals[0] - vals[1]) / (2 * step)
    if not np.isfinite(g).all():
        raise NonFinite("non-finite finite-difference gradient")
    return g


def fd_relative_error(g, fd, loss):
    """Per-edge |g - fd| / max(|g|, 1e-2 * max(1, loss)).

    Central differences of a loss of size L carry a rounding error of a few
    eps * L / step; the floor keeps the relative error meaningful for
    entries too small for the difference quotient to resolve.
    """
    g = np.asarray(g)
    return np.abs(g - np.asarray(fd)) / np.maximum(np.abs(g), 1e-2 * max(1.0, float(loss)))


# ---------------------------------------------------------------- building


class NetBuilder:
    """Incremental construction; vertex 0 is the constant vertex."""

    def __init__(self, n_inputs=0):
        self.vertex_count = 1
        self.constant = 0
        self.inputs = [self.add_vertex() for _ in range(n_inputs)]
        self.output = None
        self._edges = {}

    def add_vertex(self):
        v = self.vertex_count
        self.vertex_count += 1
        return v

    def add_input(self):
        v = self.add_vertex()
        self.inputs.append(v)
        return v

    def add_edge(self, s, t, w):
        key = (int(s), int(t))
        if key in self._edges:
            raise InvalidParameter(f"duplicate edge {key}")
        self._edges[key] = float(w)
        return len(self._edges) - 1

    def edge_index(self, s, t):
        return list(self._edges).index((s, t))

    def build(self, output=None):
        out = self.output if output is None else output
        edges = [(s, t, w) for (s, t), w in self._edges.items()]
        return NeuralNet.from_edges(self.vertex_count, self.constant, self.inputs, out, edges)


def layered_net(widths, rng, init="gaussian", bias=True):
    """Fully connected layers ``widths = [n, h1, ..., 1]``.

    ``init='gaussian'``: N(0, 1/fan_in) weights, biases included in the fan.
    ``init='kaiming-uniform'``: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights
    and biases, the usual default for linear layers.
    """
    if len(widths) < 2 or widths[-1] != 1 or min(widths) < 1:
        raise InvalidParameter("widths must be [n, ..., 1] with positive entries")
    nb = NetBuilder(widths[0])
    prev = list(nb.inputs)
    for width in widths[1:]:
        layer = [nb.add_vertex() for _ in range(width)]
        fan = len(prev)
        for t in layer:
            if init == "gaussian":
                ws = rng.normal(0.0, 1.0 / math.sqrt(fan + bias), size=fan + bias)
            elif init == "kaiming-uniform":
                ws = rng.uniform(-1.0, 1.0, size=fan + bias) / math.sqrt(fan)
            else:
                raise InvalidParameter(f"unknown init {init!r}")
            for s, w in zip(prev, ws):
                nb.add_edge(s, t, w)
            if bias:
                nb.add_edge(nb.constant, t, ws[-1])
        prev = layer
    return nb.build(output=prev[0])


def random_dag(rng, n_inputs=3, n_hidden=8, max_edges=60, extra=0.3, scale=0.6):
    """Random valid net whose last hidden vertex is the output.

    Every hidden vertex gets one edge from an earlier vertex and one edge to a
    later hidden vertex, so the structural invariants hold by construction;
    further random forward edges are added while the edge budget allows.
    """
    if n_hidden < 1 or max_edges < 2 * n_hidden - 1:
        raise InvalidParameter("edge budget too small for the requested hidden count")
    nb = NetBuilder(n_inputs)
    hidden = [nb.add_vertex() for _ in range(n_hidden)]
    sources = [nb.constant, *nb.inputs]
    for i, h in enumerate(hidden):
        pool = sources + hidden[:i]
        nb.add_edge(pool[rng.integers(len(pool))], h, rng.normal(0.0, scale))
    for i, h in enumerate(hidden[:-1]):
        t = hidden[rng.integers(i + 1, n_hidden)]
        if (h, t) not in nb._edges:
            nb.add_edge(h, t, rng.normal(0.0, scale))
    for i, h in enumerate(hidden):
        for v in sources + hidden[:i]:
            if len(nb._edges) >= max_edges:
                break
            if (v, h) not in nb._edges and rng.random() < extra:
                nb.add_edge(v, h, rng.normal(0.0, scale))
    return nb.build(output=hidden[-1])


# ---------------------------------------------------------------- json

FORMAT = "deeplimits.net"
VERSION = 1


def net_to_dict(net):
    return {
        "format": FORMAT, "version": VERSION,
        "vertex_count": net.vertex_count,
        "constant_vertex": net.constant_vertex,
        "input_vertices": list(net.input_vertices),
        "output_vertex": net.output_vertex,
        "edges": [[s, t, repr(w)] for s, t, w in net.edges],
    }


def net_from_dict(d):
    if d.get("format") != FORMAT:
        raise SchemaMismatch("not a serialized net")
    if d.get("version") != VERSION:
        raise SchemaMismatch(f"net format version {d.get('version')} != {VERSION}")
    return NeuralNet.from_edges(d["vertex_count"], d["constant_vertex"], d["input_vertices"],
                                d["output_vertex"], [(s, t, float(w)) for s, t, w in d["edges"]])


def dumps(net):
    return json.dumps(net_to_dict(net), indent=None, separators=(",", ":"))


def loads(text):
    try:
        return net_from_dict(json.loads(text))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaMismatch(f"malformed net document: {exc}") from exc
