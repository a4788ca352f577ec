"""Cross-predictability and the Fourier identities used as test oracles.

For a function distribution P_F and data distribution P_X,

    CP_inf = E_{F,F'} (E_X F(X) F'(X))^2 = E_{X,X'} (E_F F(X) F(X'))^2,

and with an m-sample empirical measure CP_m = 1/m + (1 - 1/m) CP_inf.

The Monte-Carlo estimator draws independent pairs (F, F') and ``inner``
points each. The squared sample mean of z = F(X)F'(X) overestimates
(E z)^2 by Var(z)/inner, so each pair contributes the U-statistic

    ((sum z)^2 - sum z^2) / (inner (inner - 1)),

which for +-1 labels is ``(mean^2 - 1/inner) / (1 - 1/inner)``. The pair
estimates are averaged and the jackknife gives the standard error.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import InvalidParameter, InvariantViolation, TooLarge, ToleranceExceeded, Unsupported
from .functions import hypercube
from .netdag import evaluate_batch, layered_net

WORK_LIMIT = 2 ** 40


@dataclass(frozen=True)
class CpEstimate:
    value: float
    method: str
    std_error: float = 0.0
    raw: float | None = None
    dual: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise InvariantViolation(f"cross-predictability {self.value} outside [0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _clamp01(v):
    return min(1.0, max(0.0, float(v)))


def cp_inf_closed(dist, data=None):
    """Closed forms: 1 under a point-mass input, else the family's own value."""
    data = dist.data if data is None else data
    if data.kind == "point-mass":
        if dist.transform is not None:
            raise Unsupported("point-mass closed form needs +-1 valued functions")
        return CpEstimate(1.0, "closed-form")
    if data.kind != "uniform-hypercube" or dist.cp_closed is None:
        raise Unsupported(f"no closed form for {dist.name} under {data.kind} inputs")
    return CpEstimate(float(dist.cp_closed), "closed-form")


def _value_matrix(dist, points):
    return np.stack([np.asarray(dist.cp_values(f, points), dtype=np.float64)
                     for f, _ in dist.enumerate()])


def cp_inf_bruteforce(dist, data=None):
    """Exact CP_inf by enumeration, in both the primal and the dual form.

    The dual sum runs over distinct columns of the value matrix (points that
    every function treats alike are merged with their total mass), which is
    an exact regrouping of the expectation over (X, X').
    """
    data = dist.data if data is None else data
    table = dist.enumerate()
    nf = len(table)
    if data.kind == "uniform-hypercube" and nf * nf * 2.0 ** data.n > WORK_LIMIT:
        raise TooLarge("enumeration exceeds the work limit")
    points, q = data.table()
    if nf * nf * float(points.shape[0]) > WORK_LIMIT:
        raise TooLarge("enumeration exceeds the work limit")
    p = np.array([w for _, w in table])
    F = _value_matrix(dist, points)
    M = (F * q) @ F.T
    primal = math.fsum((np.outer(p, p) * M * M).ravel())

    cols, inv = np.unique(F.T, axis=0, return_inverse=True)
    Q = np.bincount(inv.ravel(), weights=q, minlength=cols.shape[0])
    if cols.shape[0] ** 2 * float(nf) > WORK_LIMIT:
        raise TooLarge("dual enumeration exceeds the work limit")
    K = (cols * p) @ cols.T
    dual = math.fsum((np.outer(Q, Q) * K * K).ravel())
    if abs(primal - dual) > 1e-12:
        raise ToleranceExceeded(f"primal {primal!r} and dual {dual!r} disagree")
    return CpEstimate(_clamp01(primal), "brute-force", 0.0, raw=primal, dual=dual)


def cp_m(cp_inf, m):
    if m < 1:
        raise InvalidParameter("batch size must be at least 1")
    return 1.0 / m + (1.0 - 1.0 / m) * cp_inf


def cp_m_bruteforce(dist, m, data=None):
    """CP_m straight from its definition: all batches of m points, all pairs."""
    data = dist.data if data is None else data
    points, q = data.table()
    table = dist.enumerate()
    if (points.shape[0] ** m) * len(table) ** 2 * m > WORK_LIMIT:
        raise TooLarge("batch enumeration exceeds the work limit")
    F = _value_matrix(dist, points)
    p = np.array([w for _, w in table])
    PP = np.outer(p, p)
    terms = []
    for batch in itertools.product(range(points.shape[0]), repeat=m):
        idx = list(batch)
        prob = float(np.prod(q[idx]))
        E = F[:, idx] @ F[:, idx].T / m
        terms.append(prob * math.fsum((PP * E * E).ravel()))
    return math.fsum(terms)


def _jackknife_mean(vals):
    """Mean and jackknife standard error of i.i.d. values."""
    vals = np.asarray(vals, dtype=np.float64)
    k = vals.size
    mean = vals.mean()
    loo = (vals.sum() - vals) / (k - 1)
    se = math.sqrt((k - 1) / k * ((loo - loo.mean()) ** 2).sum())
    return float(mean), se


def _u_square(z):
    """Unbiased estimate of (E z)^2 from the rows of z."""
    k = z.shape[-1]
    s = z.sum(axis=-1)
    return (s * s - (z * z).sum(axis=-1)) / (k * (k - 1))


def cp_montecarlo(dist, inner, outer, rng, data=None):
    if inner < 2 or outer < 2:
        raise InvalidParameter("need at least 2 inner samples and 2 pairs")
    data = dist.data if data is None else data
    est = np.empty(outer)
    for i in range(outer):
        f = dist.sample(rng)
        g = dist.sample(rng)
        X = data.sample(rng, inner)
        est[i] = _u_square(dist.cp_values(f, X) * dist.cp_values(g, X))
    mean, se = _jackknife_mean(est)
    return CpEstimate(_clamp01(mean), "monte-carlo", se, raw=mean)


def random_net_predictability(h, widths, act, net_samples, data_samples, rng, data=None):
    """Estimate E_G (E_X h(X) sign(eval_G(X)))^2 over random layered nets.

    Weights are i.i.d. N(0, 1/width of the previous layer) with no bias
    edges; sign(0) counts as +1.
    """
    if min(widths) < 1 or net_samples < 2 or data_samples < 2:
        raise InvalidParameter("widths must be positive and sample counts at least 2")
    if widths[0] != h.n:
        raise InvalidParameter("first width must equal the input dimension")
    est = np.empty(net_samples)
    for i in range(net_samples):
        net = layered_net(list(widths), rng, init="gaussian", bias=False)
        X = (data.sample(rng, data_samples) if data is not None
             else rng.choice((-1.0, 1.0), size=(data_samples, h.n)))
        out = evaluate_batch(net, act, X)
        est[i] = _u_square(h(X) * np.where(out >= 0, 1.0, -1.0))
    mean, se = _jackknife_mean(est)
    return CpEstimate(_clamp01(mean), "monte-carlo", se, raw=mean)


# ---------------------------------------------------------------- new-pred


class NewPredResult(NamedTuple):
    lhs: float
    rhs: float
    parseval_lhs: float
    parseval_rhs: float


def _check_table(g_table):
    t = np.asarray(g_table, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != 2 or t.shape[0] & (t.shape[0] - 1):
        raise InvalidParameter("table must have shape (2**n, 2)")
    n = t.shape[0].bit_length() - 1
    if n > 12:
        raise TooLarge("new-pred check supports n <= 12")
    return t, n


def _shifts(t, n):
    """E f(X,Y) - E f(X, p_s(X)) for every s, by direct enumeration.

    Rows follow :func:`hypercube` order; column 0 is y = -1, column 1 is y = +1.
    """
    X = hypercube(n)
    bits = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    # p_s(x) = prod_{i in s} x_i, for every (s, x): sign of (-1)^{#(s and x is -1)}
    neg = (X < 0).astype(np.int64)
    odd = (bits @ neg.T) & 1
    ps_pos = odd == 0
    rows = np.arange(2 ** n)
    vals = np.where(ps_pos, t[rows, 1][None, :], t[rows, 0][None, :])
    return t.mean() - vals.mean(axis=1)


def newpred_check(g_table):
    """Exact check of the new-pred inequality and of Parseval.

    ``lhs = sum_s (E f(X,Y) - E f(X,p_s(X)))^2`` with X uniform and Y an
    independent fair sign, ``rhs = E f(X,Y)^2``. Parseval is checked on
    ``g(x) = f(x,+1) - f(x,-1)`` through a fast Walsh-Hadamard transform.
    """
    t, n = _check_table(g_table)
    d = _shifts(t, n)
    lhs = math.fsum(d * d)
    rhs = math.fsum((t * t).ravel()) / t.size
    g = t[:, 1] - t[:, 0]
    ghat = _kernels.fwht(g) / 2 ** n
    pl = math.fsum(ghat * ghat)
    pr = math.fsum(g * g) / 2 ** n
    scale = max(1.0, pr)
    if abs(pl - pr) > 1e-12 * scale:
        raise ToleranceExceeded(f"Parseval mismatch {pl!r} vs {pr!r}")
    if abs(lhs - pl / 4) > 1e-12 * scale:
        raise ToleranceExceeded("direct and spectral left-hand sides disagree")
    if lhs > rhs + 1e-12 * max(1.0, rhs):
        raise InvariantViolation(f"new-pred inequality fails: {lhs!r} > {rhs!r}")
    return NewPredResult(lhs, rhs, pl, pr)


def parity_average_check(g_table):
    """(sum_s |E f(X,Y) - E f(X,p_s(X))|, 2^{n/2} sqrt(E f^2))."""
    t, n = _check_table(g_table)
    d = _shifts(t, n)
    return math.fsum(np.abs(d)), 2.0 ** (n / 2) * math.sqrt(math.fsum((t * t).ravel()) / t.size)
