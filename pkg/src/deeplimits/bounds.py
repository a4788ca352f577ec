"""Junk flow and the accuracy ceilings it implies for noisy gradient descent.

Junk flow is measured by running noisy GD with labels that are independent
fair signs and summing ``rate_t * ||mean clipped gradient||_2`` over steps.
The ceiling on the accuracy of noisy GD with noise sigma is

    min(1, 1/2 + JF * CP^e / sigma),

with e = 1/4 in general and e = 1/2 for parity families.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .descent import noisy_gd_run
from .errors import InvalidParameter, MissingField
from .functions import JunkSource


@dataclass(frozen=True)
class JunkFlowReport:
    jf: float
    std: float
    trial_values: tuple
    series: tuple
    cumulative: tuple
    loose: float
    trials: int

    def to_dict(self):
        d = asdict(self)
        for k in ("trial_values", "series", "cumulative"):
            d[k] = list(d[k])
        return d


def junk_flow_loose(rate, steps, edge_count, clip):
    """Each clipped coordinate is at most A, so every step adds at most rate*sqrt(|E|)*A."""
    if min(rate, steps, edge_count, clip) < 0:
        raise InvalidParameter("loose junk-flow bound needs nonnegative inputs")
    return rate * steps * math.sqrt(edge_count) * clip


def junk_flow_measure(net0, act, data, cfg, trials, rng):
    """Junk flow of ``cfg`` from ``net0``, averaged over independent trials.

    Trials differ in the GD noise and, for finite batches, in the junk
    batches; the per-step series is the trial mean.
    """
    if trials < 1:
        raise InvalidParameter("need at least one trial")
    junk = JunkSource(data.n)
    per_trial = []
    for _ in range(trials):
        _, reports = noisy_gd_run(net0, act, data, junk, cfg, rng)
        per_trial.append([cfg.rate_at(r.step) * r.clipped_norm for r in reports])
    terms = np.array(per_trial, dtype=np.float64).reshape(trials, cfg.steps)
    totals = [math.fsum(row) for row in terms]
    series = terms.mean(axis=0)
    loose = math.fsum(cfg.rate_at(t) for t in range(cfg.steps)) * math.sqrt(net0.edge_count) * cfg.clip
    return JunkFlowReport(
        jf=float(np.mean(totals)),
        std=float(np.std(totals, ddof=1)) if trials > 1 else 0.0,
        trial_values=tuple(totals),
        series=tuple(series.tolist()),
        cumulative=tuple(np.cumsum(series).tolist()),
        loose=float(loose),
        trials=trials)


@dataclass(frozen=True)
class BoundReport:
    sigma: float
    jf: float
    cp: float
    exponent: float
    ceiling: float
    floor: float
    vacuous: bool

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def accuracy_ceiling(sigma, jf, cp, exponent, family=None):
    """Accuracy ceiling for noisy GD; ``floor`` is the implied error floor 1 - ceiling."""
    if not sigma > 0:
        raise InvalidParameter("sigma must be positive")
    if not jf >= 0:
        raise InvalidParameter("junk flow must be nonnegative")
    if not 0 <= cp <= 1:
        raise InvalidParameter("cross-predictability must lie in [0, 1]")
    if exponent not in (0.25, 0.5):
        raise InvalidParameter("exponent must be 1/4 or 1/2")
    if exponent == 0.5 and family != "parity":
        raise InvalidParameter("exponent 1/2 is only valid for parity families")
    raw = 0.5 + jf / sigma * cp ** exponent
    ceiling = min(1.0, raw)
    return BoundReport(float(sigma), float(jf), float(cp), float(exponent), ceiling,
                       max(0.0, 1.0 - ceiling), raw >= 1.0)


@dataclass(frozen=True)
class Comparison:
    verdict: str
    margin: float
    combined_std_error: float
    bound: BoundReport

    def to_dict(self):
        d = asdict(self)
        d["bound"] = self.bound.to_dict()
        return d


_FIELDS = ("sigma", "jf", "cp", "exponent", "accuracy", "accuracy_std_error")


def compare_accuracy_to_bound(run):
    """CONSISTENT unless accuracy beats the ceiling by more than 3 combined std errors.

    ``run`` is a summary mapping or anything with a ``summary`` mapping.
    """
    s = getattr(run, "summary", run)
    missing = [k for k in _FIELDS if k not in s]
    if missing:
        raise MissingField(f"run summary lacks {', '.join(missing)}")
    bound = accuracy_ceiling(s["sigma"], s["jf"], s["cp"], s["exponent"], s.get("family"))
    # the ceiling inherits the spread of the junk-flow estimate unless it is clamped
    slope = 0.0 if bound.vacuous else s["cp"] ** s["exponent"] / s["sigma"]
    se = math.hypot(s["accuracy_std_error"], slope * s.get("jf_std_error", 0.0))
    margin = s["accuracy"] - bound.ceiling
    verdict = "VIOLATION" if margin > 3 * se else "CONSISTENT"
    return Comparison(verdict, float(margin), float(se), bound)
