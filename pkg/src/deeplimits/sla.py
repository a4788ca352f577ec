"""Sequential learning algorithms at micro scale.

An SLA sees i.i.d. samples z_i = (x_i, y_i) and keeps a memory value
w_i = A(z_i, (w_1, ..., w_{i-1})) from a finite alphabet. Two sources are
compared: the null source (x, y uniform and independent) and a parity source
(y = p_s(x)). For tiny n and T the law of the memory trace is computed
exactly by forward dynamic programming over trace prefixes.

The module also holds the bounded-update SGD trainer: every step computes
the full sample gradient but moves at most k edges, and weights live on a
fixed-point grid.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .descent import StepReport, _check_report, sgd_step
from .errors import (DimensionMismatch, InvalidParameter, InvariantViolation, NonFinite,
                     TooLarge)

MAX_ALPHABET = 2 ** 16
MAX_N = 6
MAX_TRACES = 2 ** 20


@dataclass(frozen=True)
class SlaSpec:
    n: int
    alphabet: tuple
    rule: Callable
    name: str = "rule"

    def __post_init__(self):
        if self.n < 0:
            raise InvalidParameter("n must be nonnegative")
        if not 1 <= len(self.alphabet) <= MAX_ALPHABET:
            raise InvalidParameter(f"alphabet size must lie in [1, {MAX_ALPHABET}]")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise InvalidParameter("alphabet has repeated symbols")

    def step(self, z, history):
        w = self.rule(z, history)
        if w not in self._members:
            raise InvariantViolation(f"rule {self.name!r} returned {w!r} outside its alphabet")
        return w

    @property
    def _members(self):
        return frozenset(self.alphabet)


@dataclass(frozen=True)
class Source:
    kind: str
    n: int
    mask: int = 0

    def draw(self, rng):
        if self.kind == "null":
            v = rng.choice((-1, 1), size=self.n + 1)
            return tuple(int(t) for t in v[:-1]), int(v[-1])
        x = tuple(int(t) for t in rng.choice((-1, 1), size=self.n))
        return x, _parity(x, self.mask)

    def support(self):
        """All sample values with their (equal) probabilities."""
        xs = list(itertools.product((-1, 1), repeat=self.n))
        if self.kind == "null":
            p = 2.0 ** -(self.n + 1)
            return [((x, y), p) for x in xs for y in (-1, 1)]
        p = 2.0 ** -self.n
        return [((x, _parity(x, self.mask)), p) for x in xs]


def _parity(x, mask):
    v = 1
    for i, xi in enumerate(x):
        if mask >> i & 1:
            v *= xi
    return v


def null_source(n):
    return Source("null", n)


def parity_source(n, mask):
    if not 0 <= mask < 2 ** n:
        raise InvalidParameter("parity support out of range")
    return Source("parity", n, mask)


def run_trace(sla, source, T, rng):
    """Sampled run: list of (z, w) pairs."""
    if T < 1:
        raise InvalidParameter("T must be at least 1")
    hist = ()
    out = []
    for _ in range(T):
        z = source.draw(rng)
        w = sla.step(z, hist)
        hist = hist + (w,)
        out.append((z, w))
    return out


@dataclass(frozen=True)
class TraceDistribution:
    T: int
    alphabet: tuple
    probs: dict


def trace_distribution_exact(sla, source, T):
    if T < 1:
        raise InvalidParameter("T must be at least 1")
    if source.n > MAX_N:
        raise TooLarge(f"exact traces need n <= {MAX_N}")
    if float(len(sla.alphabet)) ** T > MAX_TRACES:
        raise TooLarge("number of possible traces exceeds the exact-mode limit")
    support = source.support()
    cur = {(): 1.0}
    for _ in range(T):
        nxt = {}
        for prefix, p in cur.items():
            for z, pz in support:
                key = prefix + (sla.step(z, prefix),)
                nxt[key] = nxt.get(key, 0.0) + p * pz
        cur = nxt
    total = math.fsum(cur.values())
    if abs(total - 1.0) > 1e-12:
        raise InvariantViolation(f"trace probabilities sum to {total!r}")
    return TraceDistribution(T, tuple(sla.alphabet), cur)


def tv_distance(p, q):
    if p.T != q.T or set(p.alphabet) != set(q.alphabet):
        raise DimensionMismatch("trace distributions live on different index sets")
    keys = set(p.probs) | set(q.probs)
    return 0.5 * math.fsum(abs(p.probs.get(k, 0.0) - q.probs.get(k, 0.0)) for k in keys)


def quadratic_bound_check(sla, n):
    """(sum_i sum_s (P[W=i | p_s] - P[W~=i])^2, 2^{n/2}) for the first step of ``sla``."""
    if n > MAX_N:
        raise TooLarge(f"exact check needs n <= {MAX_N}")
    idx = {w: i for i, w in enumerate(sla.alphabet)}

    def law(src):
        v = np.zeros(len(sla.alphabet))
        for z, pz in src.support():
            v[idx[sla.step(z, ())]] += pz
        return v

    ref = law(null_source(n))
    lhs = math.fsum(float(((law(parity_source(n, s)) - ref) ** 2).sum()) for s in range(2 ** n))
    return lhs, 2.0 ** (n / 2)


@dataclass(frozen=True)
class DistinguishabilityReport:
    rule: str
    n: int
    T: int
    average_tv: float
    per_support: tuple
    cp: float
    reference: float
    single_step_lhs: float | None
    single_step_rhs: float | None

    def csv_row(self):
        return [self.rule, self.n, self.T, self.average_tv, self.reference]


def distinguishability_report(sla, n, T, include_empty=False):
    """Average over parity supports of TV(trace | null, trace | parity).

    The empty support gives the constant label +1, which any rule reading y
    tells apart from a fair coin, so by default it is left out of the
    average. ``reference`` is CP^{1/24} for uniform parities, CP = 2^-n. For
    T = 1 the single-step quadratic bound (over all supports) is evaluated
    and enforced.
    """
    null = trace_distribution_exact(sla, null_source(n), T)
    first = 0 if include_empty or n == 0 else 1
    tvs = tuple(tv_distance(null, trace_distribution_exact(sla, parity_source(n, s), T))
                for s in range(first, 2 ** n))
    cp = 2.0 ** -n
    lhs = rhs = None
    if T == 1:
        lhs, rhs = quadratic_bound_check(sla, n)
        if lhs > rhs + 1e-12:
            raise InvariantViolation(f"single-step quadratic bound fails: {lhs!r} > {rhs!r}")
    return DistinguishabilityReport(sla.name, n, T, math.fsum(tvs) / len(tvs), tvs, cp,
                                    cp ** (1 / 24), lhs, rhs)


# ---------------------------------------------------------------- bounded-update SGD


def quantize(w, bits, scale):
    """Round to the grid j * scale * 2^(1-bits), j in [-2^(bits-1), 2^(bits-1) - 1].

    Rounding is to nearest with ties to even (numpy rint); out-of-range values
    saturate at the grid ends.
    """
    if bits < 2:
        raise InvalidParameter("quantization needs at least 2 bits")
    step = scale * 2.0 ** (1 - bits)
    half = 2 ** (bits - 1)
    j = np.clip(np.rint(np.asarray(w, dtype=np.float64) / step), -half, half - 1)
    return j * step


def select_edges(g, k, selection, t):
    """Edges to update at step t: the k largest |g| (ties to the lowest index),
    or a cyclic block of k edges."""
    E = g.size
    k = min(k, E)
    if selection == "top-k":
        return np.sort(np.argsort(-np.abs(g), kind="stable")[:k])
    if selection == "fixed-schedule":
        return (t * k + np.arange(k)) % E
    raise InvalidParameter(f"unknown selection {selection!r}")


def bounded_update_sgd_run(net, act, stream, k, selection, bits, cfg, rng, scale=None,
                           callback=None):
    """SGD that moves at most ``k`` edges per step on a ``bits``-bit fixed-point grid.

    ``bits=None`` turns quantization off. The grid spans [-scale, scale) with
    ``scale`` defaulting to the weight bound of ``cfg`` when finite, else 4.
    Initial weights are put on the grid too. Returns (trained net, reports).
    """
    if k < 1:
        raise InvalidParameter("k must be at least 1")
    if selection not in ("top-k", "fixed-schedule"):
        raise InvalidParameter(f"unknown selection {selection!r}")
    if bits is not None and bits < 2:
        raise InvalidParameter("quantization needs at least 2 bits")
    if scale is None:
        scale = cfg.bound if math.isfinite(cfg.bound) else 4.0
    w = np.array(net.weights)
    if math.isfinite(cfg.bound):
        w = np.clip(w, -cfg.bound, cfg.bound)
    if bits is not None:
        w = quantize(w, bits, scale)
    reports = []
    for t in range(cfg.steps):
        x, y = stream(rng)
        delta = cfg.noise.draw(rng, t, w.size)
        full, info = sgd_step(net, act, x, y, cfg.rate, delta, cfg.bound, cfg.loss, w)
        g = info["grad"]
        sel = select_edges(g, k, selection, t)
        new = w.copy()
        new[sel] = full[sel] if bits is None else quantize(full[sel], bits, scale)
        if (new != w).sum() > k:
            raise InvariantViolation("more than k weights changed")
        gn = float(np.linalg.norm(g))
        reports.append(_check_report(StepReport(t, info["loss"], gn, gn, 0.0,
                                                float(np.abs(new - w).max(initial=0.0)),
                                                float(np.abs(g).max(initial=0.0)))))
        w = new
        if callback is not None:
            callback(t, w)
    if not np.isfinite(w).all():
        raise NonFinite("weights diverged")
    return net.with_weights(w), reports
