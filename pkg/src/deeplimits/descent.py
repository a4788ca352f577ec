"""The three training procedures and thresholded accuracy.

``noisy_gd_run``: W <- W - rate_t * mean_batch [grad L]_A + N(0, sigma^2) per
edge, where [.]_A clips each per-sample, per-coordinate derivative to
[-A, A] before averaging. ``batch=None`` takes the exact expectation over an
enumerable data distribution; with junk labels that expectation also runs
over both label values.

``noisy_sgd_run``: one sample per step, w <- clip(w - rate * grad + delta,
-B, B), starting from the projected initial weights.

``perturbed_sgd_run``: the same step with B = inf and the noise taken from a
given matrix, one row per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidParameter, NonFinite
from .functions import JunkSource
from .netdag import evaluate_batch, loss_derivative, loss_value

EXACT_LIMIT = 20


def _finite_float(v):
    return "inf" if math.isinf(v) else repr(float(v))


def _read_float(v):
    return math.inf if v == "inf" else float(v)


@dataclass(frozen=True)
class GdConfig:
    steps: int
    rate: float | tuple
    batch: int | None = None
    clip: float = math.inf
    noise_std: float = 0.0
    loss: str = "squared"

    def __post_init__(self):
        if isinstance(self.rate, (list, tuple, np.ndarray)):
            object.__setattr__(self, "rate", tuple(float(r) for r in self.rate))
            if len(self.rate) != self.steps:
                raise InvalidParameter("rate schedule length must equal the step count")
            rates = self.rate
        else:
            object.__setattr__(self, "rate", float(self.rate))
            rates = (self.rate,)
        if self.steps < 1:
            raise InvalidParameter("need at least one step")
        if any(r < 0 or not math.isfinite(r) for r in rates):
            raise InvalidParameter("rates must be finite and nonnegative")
        if self.batch is not None and self.batch < 1:
            raise InvalidParameter("batch size must be positive or None")
        if not self.clip > 0:
            raise InvalidParameter("clip range must be positive")
        if not self.noise_std >= 0:
            raise InvalidParameter("noise std must be nonnegative")

    def rate_at(self, t):
        return self.rate[t] if isinstance(self.rate, tuple) else self.rate

    def to_dict(self):
        return {"steps": self.steps,
                "rate": list(self.rate) if isinstance(self.rate, tuple) else self.rate,
                "batch": self.batch, "clip": _finite_float(self.clip),
                "noise_std": self.noise_std, "loss": self.loss}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["clip"] = _read_float(d["clip"])
        return cls(**d)


@dataclass(frozen=True)
class Noise:
    """Per-edge, per-step noise: zero, gaussian(std), uniform(+-scale) or a matrix."""

    kind: str = "zero"
    scale: float = 0.0
    matrix: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("zero", "gaussian", "uniform", "matrix"):
            raise InvalidParameter(f"unknown noise kind {self.kind!r}")
        if self.kind == "matrix" and self.matrix is None:
            raise InvalidParameter("matrix noise needs a matrix")
        if self.scale < 0:
            raise InvalidParameter("noise scale must be nonnegative")

    def draw(self, rng, step, size):
        if self.kind == "zero":
            return np.zeros(size)
        if self.kind == "gaussian":
            return rng.normal(0.0, self.scale, size=size)
        if self.kind == "uniform":
            return rng.uniform(-self.scale, self.scale, size=size)
        row = np.asarray(self.matrix[step], dtype=np.float64)
        if row.shape != (size,):
            raise DimensionMismatch("noise row length differs from edge count")
        return row

    def to_dict(self):
        d = {"kind": self.kind, "scale": self.scale}
        if self.matrix is not None:
            d["matrix"] = np.asarray(self.matrix).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        m = d.get("matrix")
        return cls(d["kind"], d["scale"], None if m is None else np.array(m))


@dataclass(frozen=True)
class SgdConfig:
    steps: int
    rate: float
    bound: float = math.inf
    noise: Noise = Noise()
    loss: str = "squared"

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidParameter("step count must be nonnegative")
        if not self.rate > 0:
            raise InvalidParameter("rate must be positive")
        if not self.bound > 0:
            raise InvalidParameter("weight bound must be positive or inf")

    def to_dict(self):
        return {"steps": self.steps, "rate": self.rate, "bound": _finite_float(self.bound),
                "noise": self.noise.to_dict(), "loss": self.loss}

    @classmethod
    def from_dict(cls, d):
        return cls(d["steps"], d["rate"], _read_float(d["bound"]), Noise.from_dict(d["noise"]),
                   d["loss"])


@dataclass(frozen=True)
class PerturbedConfig:
    steps: int
    rate: float
    delta: np.ndarray = field(compare=False, repr=False)
    bound: float | np.ndarray = math.inf
    loss: str = "squared"

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64)
        if delta.ndim != 2 or delta.shape[0] != self.steps:
            raise DimensionMismatch("noise matrix must have one row per step")
        if np.any(np.abs(delta) > self.bound):
            raise InvalidParameter("a noise entry exceeds the declared bound")
        object.__setattr__(self, "delta", delta)


@dataclass(frozen=True)
class StepReport:
    step: int
    loss: float
    grad_norm: float
    clipped_norm: float
    clipped_fraction: float
    max_delta: float
    max_abs_grad: float

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _check_report(r):
    vals = (r.loss, r.grad_norm, r.clipped_norm, r.max_delta, r.max_abs_grad)
    if not all(math.isfinite(v) for v in vals):
        raise NonFinite(f"non-finite quantity at step {r.step}")
    return r


# ---------------------------------------------------------------- gd


def _full_batch(data, labels):
    """(X, label variants (B, K), weights (B, K)) for the exact expectation."""
    if not data.enumerable or (data.kind == "uniform-hypercube" and data.n > EXACT_LIMIT):
        raise InvalidParameter("exact expectation needs an enumerable data distribution")
    X, q = data.table()
    if isinstance(labels, JunkSource):
        Y = np.tile([1.0, -1.0], (X.shape[0], 1))
        W = np.repeat(q[:, None] / 2.0, 2, axis=1)
    else:
        Y = np.asarray(labels(X), dtype=np.float64)[:, None]
        W = q[:, None].copy()
    return X, Y, W


def _sampled_batch(data, labels, m, rng):
    if isinstance(labels, JunkSource):
        X = data.sample(rng, m)
        y = rng.choice((-1.0, 1.0), size=m)
    else:
        X = data.sample(rng, m)
        y = np.asarray(labels(X), dtype=np.float64)
    return X, y[:, None], np.full((m, 1), 1.0 / m)


CHUNK = 1024


def batch_gradient(net, act, X, Y, W, loss="squared", clip=math.inf, weights=None):
    """Weighted sum over samples and label variants of clipped per-sample gradients.

    The batch is processed in row chunks so the (rows x vertices) work arrays
    stay cache sized. Returns (gradient, clipped fraction, weighted loss,
    unclipped norm).
    """
    plan = net.plan()
    w = net.weights if weights is None else weights
    B = X.shape[0]
    g = np.zeros(w.size)
    raw = np.zeros(w.size)
    frac = 0.0
    lv = 0.0
    for a in range(0, B, CHUNK):
        b = min(B, a + CHUNK)
        Yv, pre, D = plan.forward(act, w, X[a:b], store_derivative=True, reuse=True)
        out = Yv[:, net.output_vertex]
        Dp = plan.backward(act, w, Yv, pre, np.ones(b - a), D, reuse=True)
        scale = loss_derivative(loss, out[:, None], Y[a:b])
        gc, fc = plan.accumulate(Yv, Dp, scale, W[a:b], clip)
        g += gc
        frac += fc * (b - a) / B
        raw += plan.accumulate(Yv, Dp, scale, W[a:b])[0] if fc > 0 else gc
        lv += float((W[a:b] * loss_value(loss, out[:, None], Y[a:b])).sum())
    if not np.isfinite(g).all():
        raise NonFinite("non-finite gradient")
    return g, frac, lv, float(np.linalg.norm(raw))


def noisy_gd_run(net, act, data, labels, cfg, rng, callback=None):
    """Noisy (clipped) gradient descent; returns (trained net, step reports).

    ``callback(t, weights)`` is called after every update.
    """
    w = np.array(net.weights)
    reports = []
    full = _full_batch(data, labels) if cfg.batch is None else None
    for t in range(cfg.steps):
        X, Y, W = full if full is not None else _sampled_batch(data, labels, cfg.batch, rng)
        g, frac, lv, raw_norm = batch_gradient(net, act, X, Y, W, cfg.loss, cfg.clip, w)
        rate = cfg.rate_at(t)
        z = rng.normal(0.0, cfg.noise_std, size=w.size) if cfg.noise_std > 0 else 0.0
        new = w - rate * g + z
        reports.append(_check_report(StepReport(t, lv, raw_norm, float(np.linalg.norm(g)), frac,
                                                float(np.abs(new - w).max(initial=0.0)),
                                                float(np.abs(g).max(initial=0.0)))))
        w = new
        if callback is not None:
            callback(t, w)
    if not np.isfinite(w).all():
        raise NonFinite("weights diverged")
    return net.with_weights(w), reports


# ---------------------------------------------------------------- sgd


def sample_stream(data, labels):
    """A draw function ``rng -> (x, y)`` for i.i.d. labelled samples."""
    def draw(rng):
        if isinstance(labels, JunkSource):
            X, y = labels.sample(rng, 1)
            return X[0], float(y[0])
        x = data.sample(rng, 1)
        return x[0], float(labels(x)[0])
    return draw


def sgd_step(net, act, x, y, rate, delta, bound=math.inf, loss="squared", weights=None):
    """One step of the sample-gradient update; returns (new weights, report dict)."""
    w = net.weights if weights is None else weights
    X = np.asarray(x, dtype=np.float64)[None, :]
    g, _, lv, _ = batch_gradient(net, act, X, np.array([[float(y)]]), np.ones((1, 1)), loss,
                                 math.inf, w)
    new = w - rate * g + delta
    if math.isfinite(bound):
        new = np.clip(new, -bound, bound)
    info = {"loss": lv, "grad": g}
    return new, info


def _sgd_loop(net, act, draw, steps, rate, bound, noise_fn, loss, rng, callback, w0):
    w = w0
    reports = []
    for i in range(steps):
        x, y = draw(rng)
        delta = noise_fn(i, w.size)
        new, info = sgd_step(net, act, x, y, rate, delta, bound, loss, w)
        g = info["grad"]
        gn = float(np.linalg.norm(g))
        reports.append(_check_report(StepReport(i, info["loss"], gn, gn, 0.0,
                                                float(np.abs(new - w).max(initial=0.0)),
                                                float(np.abs(g).max(initial=0.0)))))
        w = new
        if callback is not None:
            callback(i, w)
    if not np.isfinite(w).all():
        raise NonFinite("weights diverged")
    return net.with_weights(w), reports


def noisy_sgd_run(net, act, stream, cfg, rng, callback=None):
    """``stream(rng) -> (x, y)`` supplies one fresh sample per step."""
    w = np.array(net.weights)
    if math.isfinite(cfg.bound):
        w = np.clip(w, -cfg.bound, cfg.bound)
    return _sgd_loop(net, act, stream, cfg.steps, cfg.rate, cfg.bound,
                     lambda i, size: cfg.noise.draw(rng, i, size), cfg.loss, rng, callback, w)


def perturbed_sgd_run(net, act, samples, cfg, callback=None):
    samples = list(samples)
    if len(samples) != cfg.steps:
        raise DimensionMismatch("sample count must equal the step count")
    if cfg.delta.shape[1] != net.edge_count:
        raise DimensionMismatch("noise matrix width must equal the edge count")
    it = iter(samples)
    return _sgd_loop(net, act, lambda rng: next(it), cfg.steps, cfg.rate, math.inf,
                     lambda i, size: cfg.delta[i], cfg.loss, None, callback,
                     np.array(net.weights))


# ---------------------------------------------------------------- accuracy


def predict_sign(out):
    return np.where(np.asarray(out) >= 0, 1.0, -1.0)


def accuracy(net, act, data, labels, mode="exhaustive", rng=None, chunk=1 << 15):
    """Fraction of inputs where sign(output) (sign(0) = +1) matches the label."""
    if mode == "exhaustive":
        if data.kind == "uniform-hypercube":
            if data.n > 24:
                raise InvalidParameter("exhaustive accuracy needs n <= 24")
            # enumerate the cube in chunks rather than materialising it
            total = 0.0
            N = 2 ** data.n
            idx = np.arange(N, dtype=np.int64)
            for lo in range(0, N, chunk):
                part = idx[lo:lo + chunk]
                Xc = 2.0 * ((part[:, None] >> np.arange(data.n)) & 1) - 1.0
                hit = predict_sign(evaluate_batch(net, act, Xc)) == labels(Xc)
                total += hit.sum()
            return float(total / N)
        X, q = data.table()
        hit = predict_sign(evaluate_batch(net, act, X)) == labels(X)
        return float(q @ hit)
    if isinstance(mode, tuple) and mode[0] == "monte-carlo":
        N = int(mode[1])
        if N < 100 or rng is None:
            raise InvalidParameter("monte-carlo accuracy needs N >= 100 and an rng")
        X = data.sample(rng, N)
        return float((predict_sign(evaluate_batch(net, act, X)) == labels(X)).mean())
    raise InvalidParameter(f"unknown accuracy mode {mode!r}")
