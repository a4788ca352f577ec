"""Learning problems: boolean function families, data distributions, datasets.

Points live in {-1, +1}^n. Where a bit view is needed, bit 1 corresponds to
+1 (``x = 2b - 1``). A parity support is an integer bitmask whose bit ``i``
selects coordinate ``i``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import DimensionMismatch, InvalidParameter, TooLarge

ENUM_LIMIT = 20


def bits_to_pm1(b):
    return 2.0 * np.asarray(b, dtype=np.float64) - 1.0


def pm1_to_bits(x):
    return (np.asarray(x) > 0).astype(np.int64)


def support_mask(indices):
    m = 0
    for i in indices:
        m |= 1 << int(i)
    return m


def mask_indices(mask):
    return [i for i in range(int(mask).bit_length()) if mask >> i & 1]


def hypercube(n):
    """All of {-1,+1}^n, row i is the binary expansion of i (bit j in column j)."""
    if n > ENUM_LIMIT:
        raise TooLarge(f"hypercube of dimension {n} is too large to enumerate")
    idx = np.arange(2 ** n, dtype=np.int64)
    return bits_to_pm1((idx[:, None] >> np.arange(n)) & 1)


def parity_eval(s, x):
    """p_s(x) for a single point or a batch of points (rows)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if int(s) >> n:
        raise DimensionMismatch(f"support {s:#b} does not fit {n} coordinates")
    idx = mask_indices(s)
    if not idx:
        out = np.ones(x.shape[:-1])
    else:
        out = np.prod(x[..., idx], axis=-1)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- types


@dataclass(frozen=True)
class BooleanFunction:
    n: int
    fn: Callable = field(repr=False)
    descriptor: Any = None

    def __call__(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X2 = X[None, :] if single else X
        if X2.shape[-1] != self.n:
            raise DimensionMismatch(f"expected {self.n} coordinates, got {X2.shape[-1]}")
        y = self.fn(X2)
        return float(y[0]) if single else y


def parity_function(n, mask):
    return BooleanFunction(n, lambda X, m=mask: parity_eval(m, X), ("parity", int(mask)))


def constant_function(n, value=1.0):
    return BooleanFunction(n, lambda X: np.full(X.shape[0], float(value)), ("constant", value))


@dataclass
class DataDistribution:
    """``uniform-hypercube``, ``point-mass`` or ``custom-table``.

    A custom table with ``points=None`` is sample-only; ``table_fn`` may build
    the table lazily.
    """

    kind: str
    n: int
    sampler: Callable = field(repr=False)
    points: np.ndarray | None = field(default=None, repr=False)
    probs: np.ndarray | None = field(default=None, repr=False)
    table_fn: Callable | None = field(default=None, repr=False)

    def sample(self, rng, count):
        return self.sampler(rng, int(count))

    @property
    def enumerable(self):
        if self.kind == "uniform-hypercube":
            return self.n <= ENUM_LIMIT
        return self.points is not None or self.table_fn is not None

    def table(self):
        if self.kind == "uniform-hypercube":
            pts = hypercube(self.n)
            return pts, np.full(pts.shape[0], 1.0 / pts.shape[0])
        if self.points is None and self.table_fn is not None:
            self.points, self.probs = self.table_fn()
        if self.points is None:
            raise TooLarge(f"{self.kind} distribution has no enumerable table")
        return self.points, self.probs


def uniform_data(n):
    return DataDistribution("uniform-hypercube", n,
                            lambda rng, c: rng.choice((-1.0, 1.0), size=(c, n)))


def point_mass(x):
    x = np.asarray(x, dtype=np.float64)
    return DataDistribution("point-mass", x.size, lambda rng, c: np.tile(x, (c, 1)),
                            points=x[None, :].copy(), probs=np.ones(1))


def table_data(points, probs):
    points = np.asarray(points, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if points.ndim != 2 or probs.shape != (points.shape[0],):
        raise DimensionMismatch("table points and probabilities disagree in length")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise InvalidParameter("table probabilities must be nonnegative and sum to 1")

    def sampler(rng, c):
        return points[rng.choice(points.shape[0], size=c, p=probs)]

    return DataDistribution("custom-table", points.shape[1], sampler, points, probs)


@dataclass
class FunctionDistribution:
    """A distribution over functions, paired with its data distribution.

    ``cp_values`` maps a function's labels to the real values entering
    cross-predictability; for the +-1 families this is the identity.
    """

    name: str
    n: int
    data: DataDistribution
    sampler: Callable = field(repr=False)
    table: list | None = field(default=None, repr=False)
    cp_closed: float | None = None
    family: str = "generic"
    transform: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.table is not None:
            total = math.fsum(p for _, p in self.table)
            if abs(total - 1.0) > 1e-12:
                raise InvalidParameter(f"enumerated probabilities sum to {total}")

    def sample(self, rng):
        return self.sampler(rng)

    def enumerate(self):
        if self.table is None:
            raise TooLarge(f"{self.name} has no enumeration")
        return self.table

    def cp_values(self, f, X):
        y = f(X)
        return y if self.transform is None else self.transform(y)


@dataclass(frozen=True)
class JunkSource:
    """Uniform inputs with labels that are fair coins independent of X."""

    n: int

    def sample(self, rng, count):
        X = rng.choice((-1.0, 1.0), size=(count, self.n))
        y = rng.choice((-1.0, 1.0), size=count)
        return X, y


def _masks_of_size(n, k):
    return [support_mask(c) for c in itertools.combinations(range(n), k)]


def make_distribution(kind, n, k=None):
    """Named function families over n inputs.

    ``uniform-parities``: p_S with S uniform over all subsets.
    ``degree-k-monomials``: p_S with S uniform over the k-subsets.
    ``junk``: a :class:`JunkSource`, not a function distribution.
    ``arithmetic-digits``: the digit-ordering family, see :func:`arithmetic_family`.
    """
    if not isinstance(n, (int, np.integer)) or n < 0:
        raise InvalidParameter("n must be a nonnegative integer")
    if kind == "uniform-parities":
        table = None
        if n <= ENUM_LIMIT:
            table = [(parity_function(n, m), 2.0 ** -n) for m in range(2 ** n)]
        return FunctionDistribution(
            f"uniform-parities({n})", n, uniform_data(n),
            lambda rng: parity_function(n, int(rng.integers(0, 2 ** n)) if n < 63
                                        else support_mask(np.flatnonzero(rng.random(n) < 0.5))),
            table, cp_closed=2.0 ** -n, family="parity")
    if kind == "degree-k-monomials":
        if k is None or not 0 <= k <= n:
            raise InvalidParameter("degree-k-monomials needs 0 <= k <= n")
        count = math.comb(n, k)
        table = None
        if count <= 1 << 16:
            table = [(parity_function(n, m), 1.0 / count) for m in _masks_of_size(n, k)]

        def sampler(rng):
            return parity_function(n, support_mask(rng.choice(n, size=k, replace=False)))

        return FunctionDistribution(f"degree-{k}-monomials({n})", n, uniform_data(n),
                                    sampler, table, cp_closed=1.0 / count, family="parity")
    if kind == "junk":
        return JunkSource(n)
    if kind == "arithmetic-digits":
        return arithmetic_family(n)
    raise InvalidParameter(f"unknown distribution kind {kind!r}")


# ---------------------------------------------------------------- arithmetic


def _glyph_bits(n):
    return max(1, (n - 1).bit_length())


def decode_arithmetic(row, n):
    """Split an encoded instance into (n glyph rows, revealed position, glyph).

    The revealed position indexes the n+1 digits of the sum, most significant
    first, and is never 0.
    """
    b = _glyph_bits(n)
    bits = pm1_to_bits(row).reshape(-1, b)
    vals = (bits << np.arange(b)).sum(axis=1)
    glyphs = vals[: n * n].reshape(n, n)
    return glyphs.tolist(), int(vals[n * n]) + 1, int(vals[n * n + 1])


def _encode_glyphs(vals, n):
    b = _glyph_bits(n)
    bits = (vals[..., None] >> np.arange(b)) & 1
    return bits_to_pm1(bits.reshape(vals.shape[0], -1))


def _arith_eval(X, perm, n):
    b = _glyph_bits(n)
    bits = pm1_to_bits(X).reshape(X.shape[0], -1, b)
    vals = (bits << np.arange(b)).sum(axis=2)
    digits = perm[vals[:, : n * n]].reshape(-1, n, n)
    place = n ** np.arange(n - 1, -1, -1, dtype=np.int64)
    total = (digits * place).sum(axis=(1, 2))
    pos = vals[:, n * n] + 1
    # digit at position pos of the (n+1)-digit sum, most significant first
    shown = (total // n ** (n - pos)) % n
    return np.where(shown == perm[vals[:, n * n + 1]], 1.0, -1.0)


def arithmetic_family(n):
    """Digit-ordering family for the addition check.

    An instance lists n numbers of n base-n digits plus one revealed digit (at
    position 1..n, most significant first) of their (n+1)-digit sum. Every
    digit is drawn as a display glyph; function ``pi`` reads glyph g as digit
    ``pi[g]`` and answers +1 exactly when the revealed glyph is the sum's
    digit. For cross-predictability the +-1 answer is mapped to
    ``[match] - 1/n``, which has mean 0 under uniform instances.
    """
    if n < 2:
        raise InvalidParameter("arithmetic-digits needs n >= 2")
    width = n * n + 2
    if n ** (n + 1) > 2 ** 62:
        raise TooLarge("sums do not fit 64-bit integers")

    def sampler(rng, c):
        vals = rng.integers(0, n, size=(c, width))
        return _encode_glyphs(vals, n)

    def build_table():
        count = n ** width
        if count > 1 << 21:
            raise TooLarge(f"{count} instances is too many to tabulate")
        idx = np.arange(count, dtype=np.int64)
        vals = (idx[:, None] // n ** np.arange(width, dtype=np.int64)) % n
        return _encode_glyphs(vals, n), np.full(count, 1.0 / count)

    data = DataDistribution("custom-table", width * _glyph_bits(n), sampler,
                            table_fn=build_table if n ** width <= 1 << 21 else None)

    def fn_for(perm):
        perm = np.asarray(perm, dtype=np.int64)
        return BooleanFunction(data.n, lambda X, p=perm: _arith_eval(X, p, n),
                               ("arithmetic", tuple(int(v) for v in perm)))

    table = None
    if math.factorial(n) <= 5040:
        perms = list(itertools.permutations(range(n)))
        table = [(fn_for(p), 1.0 / len(perms)) for p in perms]
    return FunctionDistribution(f"arithmetic-digits({n})", data.n, data,
                                lambda rng: fn_for(rng.permutation(n)), table,
                                family="arithmetic",
                                transform=lambda y: (y + 1.0) / 2.0 - 1.0 / n)


# ---------------------------------------------------------------- dots


def dots_label(x):
    """+1 when an even number of pixels are on (pixel on means +1)."""
    x = np.asarray(x)
    on = (x > 0).sum(axis=-1)
    return np.where(on % 2 == 0, 1.0, -1.0) if x.ndim > 1 else (1.0 if on % 2 == 0 else -1.0)


def dots_dataset(k, count, rng):
    """``count`` random k x k images flattened row-major, with parity labels."""
    if k < 1:
        raise InvalidParameter("grid side must be at least 1")
    X = rng.choice((-1.0, 1.0), size=(int(count), k * k))
    return X, dots_label(X)


# ---------------------------------------------------------------- aer


@dataclass
class AerGraph:
    n: int
    edges: list
    r: int
    initial_edge_count: int
    pruned: int


def _bfs(adj, source, skip):
    """Distances and shortest-path counts from ``source``, ignoring edge ``skip``."""
    dist = {source: 0}
    ways = {source: 1}
    parents = {source: []}
    frontier = [source]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if {u, v} == skip:
                    continue
                if v not in dist:
                    dist[v] = dist[u] + 1
                    ways[v] = 0
                    parents[v] = []
                    nxt.append(v)
                if dist[v] == dist[u] + 1:
                    ways[v] += ways[u]
                    parents[v].append(u)
        frontier = nxt
    return dist, ways, parents


def _shortest_cycle_through(adj, v):
    """(length, [(neighbour, bfs data)]) of minimal cycles through v."""
    best = math.inf
    hits = []
    for u in adj[v]:
        dist, ways, parents = _bfs(adj, u, {u, v})
        if v in dist:
            length = dist[v] + 1
            if length < best:
                best, hits = length, []
            if length == best:
                hits.append((u, ways, parents))
    return best, hits


def aer_sample(n, m, r, rng):
    """Erdos-Renyi graph on n vertices with edge probability m/n, then pruned.

    While a cycle shorter than r exists: a vertex is drawn uniformly among the
    vertices lying on one, a minimal cycle through it is drawn uniformly (via
    path counts), and a uniformly chosen edge of that cycle is deleted.
    """
    if n < 1 or m < 0 or r < 3:
        raise InvalidParameter("need n >= 1, m >= 0 and r >= 3")
    p = min(1.0, m / n)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    adj = {v: set() for v in range(n)}
    for a, b in zip(iu[keep].tolist(), ju[keep].tolist()):
        adj[a].add(b)
        adj[b].add(a)
    initial = int(keep.sum())
    pruned = 0
    while True:
        short = {}
        for v in range(n):
            length, hits = _shortest_cycle_through(adj, v)
            if length < r:
                short[v] = hits
        if not short:
            break
        keys = sorted(short)
        v = keys[rng.integers(len(keys))]
        hits = short[v]
        # weight each starting neighbour by its number of shortest return paths
        w = np.array([h[1][v] for h in hits], dtype=np.float64)
        u, ways, parents = hits[rng.choice(len(hits), p=w / w.sum())]
        path = [v]
        cur = v
        while cur != u:
            ps = parents[cur]
            pw = np.array([ways[q] for q in ps], dtype=np.float64)
            cur = ps[rng.choice(len(ps), p=pw / pw.sum())]
            path.append(cur)
        path.append(v)  # closing edge u -> v
        i = int(rng.integers(len(path) - 1))
        a, b = path[i], path[i + 1]
        adj[a].discard(b)
        adj[b].discard(a)
        pruned += 1
    edges = sorted((a, b) for a in adj for b in adj[a] if a < b)
    return AerGraph(n, edges, r, initial, pruned)


# ---------------------------------------------------------------- export


def export_csv(path, X, y):
    """One row per sample: the +-1 features, then the label."""
    path = Path(path)
    X = np.asarray(X)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(X.shape[1])] + ["label"])
        for row, label in zip(X, np.asarray(y)):
            w.writerow([int(v) for v in row] + [int(label)])
    return path


def export_pgm(path, image, k):
    """Plain-text PGM, on pixels white."""
    path = Path(path)
    px = (np.asarray(image).reshape(k, k) > 0).astype(int)
    lines = ["P2", f"{k} {k}", "1"] + [" ".join(map(str, r)) for r in px]
    path.write_text("\n".join(lines) + "\n")
    return path
