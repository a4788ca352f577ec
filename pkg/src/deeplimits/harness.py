"""Named experiments, run records, plot data and the command line.

An experiment is a function ``(params, rngs) -> (series, summary)`` in
:data:`REGISTRY`; ``rngs`` holds one independent stream per trial, split from
the configured seed. Records serialize to canonical JSON, so re-running a
config gives the same bytes apart from the wall-clock field.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import click
import numpy as np

from . import __version__
from .bounds import accuracy_ceiling, compare_accuracy_to_bound, junk_flow_measure
from .circuits import gf2_parity_learner
from .crosspred import cp_inf_bruteforce, cp_inf_closed, cp_montecarlo
from .descent import (GdConfig, Noise, SgdConfig, accuracy, batch_gradient, noisy_gd_run,
                      noisy_sgd_run, predict_sign, sample_stream)
from .emulate import (MPrimeParams, MsParams, build_emulation_net, build_noisefree_plan,
                      emulate_learn, host_oracle, memorized_samples, ms_gadget_algebra,
                      predict, run_ms_gadget_harness)
from .errors import (DeepLimitsError, InvalidParameter, IoError, MissingField, NonFinite,
                     SchemaMismatch, UnknownExperiment)
from .functions import dots_dataset, make_distribution
from .netdag import ActivationSpec, NetBuilder, evaluate_batch, layered_net
from .rng import make_rng, spawn
from .sla import (SlaSpec, bounded_update_sgd_run, quadratic_bound_check,
                  distinguishability_report)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------- records


@dataclass
class ExperimentConfig:
    name: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    trials: int = 1
    out_dir: str | None = None

    def __post_init__(self):
        if self.name not in REGISTRY:
            raise UnknownExperiment(f"no experiment named {self.name!r}")
        if self.trials < 1:
            raise InvalidParameter("need at least one trial")
        unknown = set(self.params) - set(REGISTRY[self.name].defaults)
        if unknown:
            raise InvalidParameter(f"unknown parameters for {self.name}: {sorted(unknown)}")

    def resolved(self):
        return {**REGISTRY[self.name].defaults, **self.params}

    def to_dict(self):
        return {"name": self.name, "params": self.resolved(), "seed": self.seed,
                "trials": self.trials, "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["name"], dict(d["params"]), int(d["seed"]), int(d["trials"]),
                       d.get("out_dir"))
        except KeyError as exc:
            raise MissingField(f"config lacks {exc.args[0]}") from exc


@dataclass
class RunRecord:
    """``series`` maps a name to ``{"x": [...], "y": [...], "y_stderr": [...] | None}``."""

    config: dict
    series: dict
    summary: dict
    wall_clock: float = 0.0
    version: str = __version__
    schema: int = SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA_VERSION:
            raise SchemaMismatch(f"record schema {d.get('schema')!r}, "
                                 f"this version reads {SCHEMA_VERSION}")
        try:
            return cls(d["config"], d["series"], d["summary"], d["wall_clock"], d["version"],
                       d["schema"])
        except KeyError as exc:
            raise SchemaMismatch(f"record lacks {exc.args[0]}") from exc

    def canonical(self, timing=False):
        d = self.to_dict()
        if not timing:
            d.pop("wall_clock")
        return json.dumps(d, sort_keys=True, allow_nan=False, separators=(",", ":"))


def _plain(v):
    """numpy scalars/arrays and tuples to JSON types."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def _check_finite(v, path="record"):
    if isinstance(v, dict):
        for k, x in v.items():
            _check_finite(x, f"{path}.{k}")
    elif isinstance(v, list):
        for i, x in enumerate(v):
            _check_finite(x, f"{path}[{i}]")
    elif isinstance(v, float) and not math.isfinite(v):
        raise NonFinite(f"{path} is {v!r}")


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(d, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def record_filename(record):
    c = record.config
    return f"{c['name']}-seed{c['seed']}.json"


def persist(record, directory):
    """Write the record as JSON (atomically); returns the path."""
    d = _plain(record.to_dict())
    _check_finite(d)
    path = os.path.join(directory, record_filename(record))
    _atomic_write(path, json.dumps(d, sort_keys=True, indent=1, allow_nan=False) + "\n")
    return path


def load(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    try:
        d = json.loads(text)
    except ValueError as exc:
        raise SchemaMismatch(f"{path}: not a run record ({exc})") from exc
    if not isinstance(d, dict):
        raise SchemaMismatch(f"{path}: not a run record")
    return RunRecord.from_dict(d)


def emit_plot_data(record, directory):
    """One CSV per series with columns x, y[, y_stderr]; returns (paths, warnings)."""
    paths, warnings = [], []
    if not record.series:
        warnings.append(f"{record.config.get('name')}: record has no series")
    for name, s in sorted(record.series.items()):
        if not s["x"]:
            warnings.append(f"series {name} is empty")
            continue
        err = s.get("y_stderr")
        rows = zip(s["x"], s["y"], err) if err is not None else zip(s["x"], s["y"])
        path = os.path.join(directory, f"{name}.csv")
        lines = [["x", "y", "y_stderr"] if err is not None else ["x", "y"]]
        lines += [[repr(v) if isinstance(v, float) else v for v in row] for row in rows]
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(lines)
        _atomic_write(path, buf.getvalue())
        paths.append(path)
    return paths, warnings


def _series(x, y, err=None):
    return {"x": _plain(list(x)), "y": _plain(list(y)),
            "y_stderr": None if err is None else _plain(list(err))}


def _mean_se(vals):
    a = np.asarray(vals, dtype=np.float64)
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(a.mean()), se


# ---------------------------------------------------------------- registry


@dataclass(frozen=True)
class Experiment:
    name: str
    run: object
    defaults: dict
    description: str


REGISTRY = {}


def experiment(name, description, **defaults):
    def deco(fn):
        REGISTRY[name] = Experiment(name, fn, defaults, description)
        return fn
    return deco


def _fan_out(fn, rngs, workers):
    """Run ``fn(i, rng)`` per trial; results come back in trial order."""
    if workers <= 1:
        return [fn(i, r) for i, r in enumerate(rngs)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, range(len(rngs)), rngs))


def run_experiment(name, config=None, workers=1, **params):
    """Run a registered experiment; ``config`` is an ExperimentConfig or keyword params."""
    if config is None:
        trials = params.pop("trials", 1)
        seed = params.pop("seed", 0)
        config = ExperimentConfig(name, params, seed, trials)
    elif config.name != name:
        raise InvalidParameter("config name differs from the requested experiment")
    exp = REGISTRY[name]
    p = config.resolved()
    t0 = time.perf_counter()
    rngs = spawn(config.seed, config.trials)
    series, summary = exp.run(p, rngs, workers)
    rec = RunRecord(config.to_dict(), _plain(series), _plain(summary),
                    time.perf_counter() - t0)
    _check_finite(_plain(rec.to_dict()))
    if config.out_dir:
        persist(rec, config.out_dir)
        emit_plot_data(rec, os.path.join(config.out_dir, f"{name}-seed{config.seed}"))
    return rec


# ---------------------------------------------------------------- nets


def _mlp(widths, rng):
    """Kaiming-uniform rectifier MLP with a linear output; n = 0 gets a bias-only unit."""
    if widths[0] == 0:
        nb = NetBuilder(0)
        h, out = nb.add_vertex(), nb.add_vertex()
        nb.add_edge(nb.constant, h, 1.0)
        nb.add_edge(h, out, 1.0)
        return nb.build(out)
    return layered_net(widths, rng, init="kaiming-uniform")


def monomial_feature_net(n, degree, rng):
    """All monomials of degree 1..degree as cos(pi x) units, then a linear output.

    The unit for a support S has weight -1/2 from each x_i in S and bias |S|/2,
    so its input counts the -1 coordinates and cos(pi .) returns prod_{i in S} x_i;
    the slope is exactly 0 there, so GD leaves the first layer in place.
    """
    nb = NetBuilder(n)
    out = nb.add_vertex()
    supports = [S for k in range(1, degree + 1) for S in itertools.combinations(range(n), k)]
    bound = 1.0 / math.sqrt(len(supports) + 1)
    for S in supports:
        u = nb.add_vertex()
        for i in S:
            nb.add_edge(nb.inputs[i], u, -0.5)
        nb.add_edge(nb.constant, u, len(S) / 2)
        nb.add_edge(u, out, float(rng.uniform(-bound, bound)))
    nb.add_edge(nb.constant, out, float(rng.uniform(-bound, bound)))
    return nb.build(out), len(supports)


RELU_LINEAR = ActivationSpec.rectifier(output_identity=True)


# ---------------------------------------------------------------- experiments


def _gd_config(p):
    return GdConfig(steps=p["steps"], rate=p["rate"], clip=p["clip"], noise_std=p["sigma"])


def _parity_gd_trial(p, rng):
    n = p["n"]
    dist = make_distribution("uniform-parities", n)
    f = dist.sample(rng)
    net0 = _mlp([n] + [p["width"]] * p["depth"] + [1], rng)
    cfg = _gd_config(p)
    trained, reps = noisy_gd_run(net0, RELU_LINEAR, dist.data, f, cfg, rng)
    acc = accuracy(trained, RELU_LINEAR, dist.data, f)
    jf = junk_flow_measure(net0, RELU_LINEAR, dist.data, cfg, p["jf_trials"], rng)
    return {"accuracy": acc, "jf": jf.jf, "jf_std": jf.std, "loss": [r.loss for r in reps],
            "jf_cumulative": list(jf.cumulative)}


def _gd_summary(p, trials):
    n = p["n"]
    accs = [t["accuracy"] for t in trials]
    jfs = [t["jf"] for t in trials]
    acc, acc_se = _mean_se(accs)
    jf, jf_se = _mean_se(jfs)
    cp = 2.0 ** -n
    s = {"n": n, "accuracy": acc, "accuracy_std_error": acc_se, "accuracies": accs,
         "jf": jf, "jf_std_error": jf_se, "jf_values": jfs, "cp": cp, "sigma": p["sigma"],
         "exponent": 0.5, "family": "parity"}
    cmp = compare_accuracy_to_bound(s)
    per = [compare_accuracy_to_bound({**s, "accuracy": a, "accuracy_std_error": 0.0, "jf": j,
                                      "jf_std_error": t["jf_std"]})
           for a, j, t in zip(accs, jfs, trials)]
    s.update(ceiling=cmp.bound.ceiling, vacuous=cmp.bound.vacuous, verdict=cmp.verdict,
             margin=cmp.margin, combined_std_error=cmp.combined_std_error,
             per_trial_verdicts=[c.verdict for c in per],
             max_excess=max(c.margin for c in per))
    return s


@experiment("parity-gd-fail", "full-batch noisy GD on a uniform random parity",
            n=14, width=64, depth=2, sigma=1e-3, clip=10.0, steps=500, rate=0.1, jf_trials=1)
def _exp_parity_gd(p, rngs, workers):
    trials = _fan_out(lambda i, r: _parity_gd_trial(p, r), rngs, workers)
    losses = np.array([t["loss"] for t in trials])
    jfc = np.array([t["jf_cumulative"] for t in trials])
    steps = range(p["steps"])
    series = {"loss": _series(steps, losses.mean(0),
                              losses.std(0, ddof=1) / math.sqrt(len(trials))
                              if len(trials) > 1 else None),
              "junk_flow": _series(steps, jfc.mean(0))}
    return series, _gd_summary(p, trials)


@experiment("bound-vs-accuracy", "GD accuracy and the junk-flow ceiling across n",
            ns=(4, 6, 8, 10), width=64, depth=2, sigma=1e-3, clip=10.0, steps=200, rate=0.1,
            jf_trials=1)
def _exp_bound_vs_accuracy(p, rngs, workers):
    rows = []
    for n in p["ns"]:
        q = {**p, "n": n}
        trials = _fan_out(lambda i, r: _parity_gd_trial(q, make_rng(r.integers(2 ** 63))),
                          rngs, workers)
        rows.append(_gd_summary(q, trials))
    ns = list(p["ns"])
    series = {"accuracy": _series(ns, [r["accuracy"] for r in rows],
                                  [r["accuracy_std_error"] for r in rows]),
              "ceiling": _series(ns, [r["ceiling"] for r in rows])}
    summary = {"rows": rows, "all_consistent": all(r["verdict"] == "CONSISTENT" for r in rows)}
    return series, summary


@experiment("monomial-scan", "full-batch noisy GD on random degree-k monomials",
            n=12, ks=(1, 2, 6), feature_degree=2, sigma=1e-3, clip=10.0, steps=500, rate=0.1)
def _exp_monomial(p, rngs, workers):
    n = p["n"]
    act = ActivationSpec.cosine_table(output_identity=True)
    cfg = _gd_config(p)
    rows = {}
    for k in p["ks"]:
        dist = make_distribution("degree-k-monomials", n, k)

        def trial(i, r):
            r = make_rng(r.integers(2 ** 63))
            f = dist.sample(r)
            net0, _ = monomial_feature_net(n, p["feature_degree"], r)
            trained, _ = noisy_gd_run(net0, act, dist.data, f, cfg, r)
            return accuracy(trained, act, dist.data, f)

        accs = _fan_out(trial, rngs, workers)
        m, se = _mean_se(accs)
        rows[str(k)] = {"accuracy": m, "accuracy_std_error": se, "accuracies": accs,
                        "cp": cp_inf_closed(dist).value}
    ks = list(p["ks"])
    series = {"accuracy_by_k": _series(ks, [rows[str(k)]["accuracy"] for k in ks],
                                       [rows[str(k)]["accuracy_std_error"] for k in ks])}
    return series, {"n": n, "features": len(list(itertools.chain.from_iterable(
        itertools.combinations(range(n), d) for d in range(1, p["feature_degree"] + 1)))),
        "by_k": rows}


def train_epochs(net, act, X, Y, epochs, rate, batch, loss, rng, callback=None):
    """Minibatch SGD over a fixed training set, reshuffled every epoch."""
    w = np.array(net.weights)
    m = X.shape[0]
    for e in range(epochs):
        order = rng.permutation(m)
        for a in range(0, m, batch):
            idx = order[a:a + batch]
            W = np.full((idx.size, 1), 1.0 / idx.size)
            g, _, _, _ = batch_gradient(net, act, X[idx], Y[idx, None], W, loss, math.inf, w)
            w = w - rate * g
        if not np.isfinite(w).all():
            raise NonFinite(f"weights diverged in epoch {e}")
        if callback is not None:
            callback(e, w)
    return net.with_weights(w)


@experiment("dots-mlp", "3x128 rectifier MLP with logistic loss on dot-parity images",
            k=13, train=1000, test=1000, width=128, depth=3, epochs=80, rate=0.1, batch=32)
def _exp_dots(p, rngs, workers):
    def trial(i, r):
        Xtr, ytr = dots_dataset(p["k"], p["train"], r)
        Xte, yte = dots_dataset(p["k"], p["test"], r)
        net0 = _mlp([p["k"] ** 2] + [p["width"]] * p["depth"] + [1], r)
        hist = {"train_error": [], "test_error": [], "train_loss": []}

        def cb(e, w):
            otr = evaluate_batch(net0, RELU_LINEAR, Xtr, weights=w)
            ote = evaluate_batch(net0, RELU_LINEAR, Xte, weights=w)
            hist["train_error"].append(float(np.mean(predict_sign(otr) != ytr)))
            hist["test_error"].append(float(np.mean(predict_sign(ote) != yte)))
            hist["train_loss"].append(float(np.mean(np.logaddexp(0.0, -ytr * otr))))

        train_epochs(net0, RELU_LINEAR, Xtr, ytr, p["epochs"], p["rate"], p["batch"],
                     "logistic", r, cb)
        return hist

    hists = _fan_out(trial, rngs, workers)
    epochs = range(1, p["epochs"] + 1)
    series = {}
    for key in ("train_error", "test_error", "train_loss"):
        a = np.array([h[key] for h in hists])
        series[key] = _series(epochs, a.mean(0), a.std(0, ddof=1) / math.sqrt(len(hists))
                              if len(hists) > 1 else None)
    final_tr = [h["train_error"][-1] for h in hists]
    final_te = [h["test_error"][-1] for h in hists]
    ok = [a < 0.05 and 0.45 <= b <= 0.55 for a, b in zip(final_tr, final_te)]
    return series, {"final_train_error": final_tr, "final_test_error": final_te,
                    "seeds_in_band": int(sum(ok)), "trials": len(hists)}


def _bit_parity(mask, x):
    return int(sum(x[i] for i in range(len(x)) if mask >> i & 1) % 2)


@experiment("parity-sgd-emulate", "SGD on the compiled emulation net running the GF(2) learner",
            n=3, t_n=8, noise="desk", mode="gate", preset="desk")
def _exp_emulate(p, rngs, workers):
    n, t_n = p["n"], p["t_n"]
    L = gf2_parity_learner(n, t_n)
    presets = {"desk": MPrimeParams.desk, "exact": MPrimeParams.exact}
    if p["preset"] not in presets:
        raise InvalidParameter(f"unknown preset {p['preset']!r}")
    em = build_emulation_net(n, t_n, L, params=presets[p["preset"]](), mode=p["mode"])
    cube = list(itertools.product((0, 1), repeat=n))

    def trial(i, r):
        # labels are XOR over a uniform support, the {0,1} view of a +-1 parity
        mask = int(r.integers(2 ** n))
        samples = []
        for _ in range(t_n):
            x = tuple(int(v) for v in r.integers(0, 2, n))
            samples.append(((x, int(r.integers(2))), _bit_parity(mask, x)))
        noise = None if p["noise"] == "none" else p["noise"]
        trained, tr = emulate_learn(em, samples, noise=noise, rng=r)
        b, guess = host_oracle(L, samples)
        rs = [int(v) for v in r.integers(0, 2, len(cube))]
        outs = [predict(trained, x, rr) for x, rr in zip(cube, rs)]
        host = [guess(x, rr) for x, rr in zip(cube, rs)]
        within = all(abs(o - (2 * h - 1)) < 0.5 for o, h in zip(outs, host))
        bits = [int(o > 0) for o in outs]
        acc = float(np.mean([bt == _bit_parity(mask, x) for bt, x in zip(bits, cube)]))
        mem = memorized_samples(trained)
        rank = L.rank(b)
        net_rows = {x for x, _ in mem if any(x)}
        return {"mask": mask, "accuracy": acc, "within_half": within,
                "host_spans": rank == n, "net_spans": _gf2_rank(net_rows, n) == n,
                "outputs": outs, "max_output_dev": max(abs(o - 0.5) for o in tr.outputs),
                "max_dead_zone_ratio": tr.max_dead_zone_ratio,
                "min_subnet_preactivation": tr.min_subnet_preactivation}

    res = _fan_out(trial, rngs, workers)
    spans = [t["host_spans"] for t in res]
    summary = {
        "trials": len(res),
        "within_half_all": all(t["within_half"] for t in res),
        "spanning_fraction": float(np.mean(spans)),
        "spanning_agreement": all(t["host_spans"] == t["net_spans"] for t in res),
        "accuracy_one_when_spanning": all(t["accuracy"] == 1.0 for t in res if t["host_spans"]),
        "accuracies": [t["accuracy"] for t in res],
        "max_output_dev": max(t["max_output_dev"] for t in res),
        "max_dead_zone_ratio": max(t["max_dead_zone_ratio"] for t in res),
        "min_subnet_preactivation": min(t["min_subnet_preactivation"] for t in res),
        "vertices": em.net.vertex_count, "edges": em.net.edge_count,
    }
    series = {"accuracy": _series(range(len(res)), summary["accuracies"])}
    return series, summary


def _gf2_rank(rows, n):
    basis = []
    for v in rows:
        v = sum(b << i for i, b in enumerate(v)) if not isinstance(v, int) else v
        for bvec in basis:
            v = min(v, v ^ bvec)
        if v:
            basis.append(v)
    return len(basis)


@experiment("ms-gadget", "scripted runs of one noise-free memory gadget",
            m_prime=1e80, steps=10, strict=True)
def _exp_ms_gadget(p, rngs, workers):
    params = MsParams(p["m_prime"])
    alg = ms_gadget_algebra(params)

    def trial(i, r):
        controls, labels, expected = [], [], []
        sign, flips = 1.0, 0
        for _ in range(p["steps"]):
            c = [(0, 2), (2, 0), (2, 2)][int(r.integers(3))]
            out = -1.0 if c == (2, 0) else 1.0
            wrong = bool(r.integers(2))
            controls.append(c)
            labels.append(-out if wrong else out)
            if wrong and c != (2, 2):
                sign, flips = -sign, flips + 1
            expected.append(sign)
        try:
            snaps = run_ms_gadget_harness(params, controls, labels, strict=p["strict"])
        except DeepLimitsError as exc:
            return {"ok": False, "error": str(exc), "flips": flips}
        got = [math.copysign(1.0, s["after"][s["w01"]]) for s in snaps]
        return {"ok": got == expected, "error": None, "flips": flips}

    res = _fan_out(trial, rngs, workers)
    summary = {"gamma_agree": alg["gamma_agree"], "contribution_matches": alg["contribution_matches"],
               "runs_ok": int(sum(t["ok"] for t in res)), "trials": len(res),
               "errors": [t["error"] for t in res if t["error"]],
               "flips": [t["flips"] for t in res]}
    return {}, summary


def _random_rule(n, rng):
    size = int(rng.integers(2, 6))
    table = rng.integers(0, size, size=2 ** (n + 1))

    def rule(z, hist):
        x, y = z
        idx = sum((1 << i) for i, v in enumerate(x) if v > 0) * 2 + (1 if y > 0 else 0)
        return int(table[idx])

    return SlaSpec(n, tuple(range(size)), rule, "random-table")


@experiment("sla-tv", "trace distinguishability and bounded-update SGD on parities",
            n_exact=4, T_max=4, rules=100, n_sgd=12, k=3, bits=16, width=64, steps=2000,
            rate=0.05)
def _exp_sla(p, rngs, workers):
    copy_tv = {}
    for n in range(1, p["n_exact"] + 1):
        spec = SlaSpec(n, (-1, 1), lambda z, hist: int(z[1]), "copy-label")
        for T in range(1, p["T_max"] + 1):
            copy_tv[f"{n},{T}"] = distinguishability_report(spec, n, T).average_tv
    rule_rng = make_rng(rngs[0].integers(2 ** 63))
    checks = [quadratic_bound_check(_random_rule(p["n_exact"], rule_rng), p["n_exact"])
              for _ in range(p["rules"])]
    n = p["n_sgd"]
    dist = make_distribution("uniform-parities", n)

    def trial(i, r):
        f = dist.sample(r)
        net0 = _mlp([n, p["width"], 1], r)
        cfg = SgdConfig(steps=p["steps"], rate=p["rate"])
        trained, _ = bounded_update_sgd_run(net0, RELU_LINEAR, sample_stream(dist.data, f),
                                            p["k"], "top-k", p["bits"], cfg, r)
        return accuracy(trained, RELU_LINEAR, dist.data, f)

    accs = _fan_out(trial, rngs, workers)
    m, se = _mean_se(accs)
    summary = {"copy_label_tv": copy_tv, "copy_label_max_tv": max(copy_tv.values()),
               "quadratic_lhs": [c[0] for c in checks], "quadratic_rhs": checks[0][1],
               "quadratic_violations": int(sum(c[0] > c[1] for c in checks)),
               "bounded_sgd_accuracy": m, "bounded_sgd_std_error": se,
               "bounded_sgd_accuracies": accs}
    return {"bounded_sgd_accuracy": _series(range(len(accs)), accs)}, summary


@experiment("perturbed-sgd-parity", "noisy SGD with bounded weights on uniform parities",
            n=12, width=64, steps=2000, rate=0.05, bound=1.0, noise_std=0.01)
def _exp_perturbed_sgd(p, rngs, workers):
    n = p["n"]
    dist = make_distribution("uniform-parities", n)

    def trial(i, r):
        f = dist.sample(r)
        net0 = _mlp([n, p["width"], 1], r)
        cfg = SgdConfig(steps=p["steps"], rate=p["rate"], bound=p["bound"],
                        noise=Noise("gaussian", p["noise_std"]))
        trained, _ = noisy_sgd_run(net0, RELU_LINEAR, sample_stream(dist.data, f), cfg, r)
        return accuracy(trained, RELU_LINEAR, dist.data, f)

    accs = _fan_out(trial, rngs, workers)
    m, se = _mean_se(accs)
    return ({"accuracy": _series(range(len(accs)), accs)},
            {"accuracy": m, "accuracy_std_error": se, "accuracies": accs})


# ---------------------------------------------------------------- CLI


def _emit(obj, fmt):
    obj = _plain(obj)
    if fmt == "json":
        click.echo(json.dumps(obj, indent=1, sort_keys=True))
        return
    rows = obj if isinstance(obj, list) else [obj]
    keys = sorted({k for r in rows for k in r})
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([json.dumps(r[k]) if isinstance(r.get(k), (dict, list)) else r.get(k, "")
                    for k in keys])


def _guard(fn):
    def wrapper(*a, **kw):
        try:
            return fn(*a, **kw)
        except DeepLimitsError as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(exc.exit_code)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


FORMAT = click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json")
SEED = click.option("--seed", type=int, default=0, show_default=True)


@click.group()
@click.version_option(__version__)
def main():
    """Gradient-descent limits on parities and the SGD emulation compiler."""


@main.command()
@click.option("--kind", type=click.Choice(["uniform-parities", "degree-k-monomials"]),
              default="uniform-parities")
@click.option("--n", type=int, required=True)
@click.option("--k", type=int, default=None)
@click.option("--method", type=click.Choice(["closed", "brute", "montecarlo"]), default="closed")
@click.option("--inner", type=int, default=100)
@click.option("--outer", type=int, default=100)
@SEED
@FORMAT
@_guard
def cp(kind, n, k, method, inner, outer, seed, fmt):
    """Cross-predictability of a function distribution."""
    dist = make_distribution(kind, n, k)
    if method == "closed":
        out = {"cp": cp_inf_closed(dist).value}
    elif method == "brute":
        out = {"cp": cp_inf_bruteforce(dist).value}
    else:
        est = cp_montecarlo(dist, inner, outer, make_rng(seed))
        out = {"cp": est.value, "std_error": est.std_error, "raw": est.raw}
    _emit({"kind": kind, "n": n, "k": k, "method": method, **out}, fmt)


def _train_opts(fn):
    for opt in reversed([
            click.option("--n", type=int, default=10, show_default=True),
            click.option("--steps", type=int, default=200, show_default=True),
            click.option("--rate", type=float, default=0.1, show_default=True),
            click.option("--batch", type=int, default=None, help="GD batch (default: full)"),
            click.option("--noise-std", type=float, default=1e-3, show_default=True),
            click.option("--clip", type=float, default=10.0, show_default=True),
            click.option("--weight-bound", type=float, default=math.inf),
            click.option("--width", type=int, default=64, show_default=True),
            click.option("--trials", type=int, default=1, show_default=True)]):
        fn = opt(fn)
    return fn


@main.command()
@click.argument("algorithm", type=click.Choice(["gd", "sgd", "perturbed"]))
@_train_opts
@SEED
@FORMAT
@_guard
def train(algorithm, n, steps, rate, batch, noise_std, clip, weight_bound, width, trials,
          seed, fmt):
    """Train a one-hidden-layer net on a uniform random parity and report accuracy."""
    dist = make_distribution("uniform-parities", n)
    rows = []
    for t, r in enumerate(spawn(seed, trials)):
        f = dist.sample(r)
        net0 = _mlp([n, width, 1], r)
        if algorithm == "gd":
            cfg = GdConfig(steps, rate, batch, clip, noise_std)
            trained, reps = noisy_gd_run(net0, RELU_LINEAR, dist.data, f, cfg, r)
        else:
            kind = "gaussian" if algorithm == "sgd" else "uniform"
            cfg = SgdConfig(steps, rate, weight_bound, Noise(kind, noise_std))
            trained, reps = noisy_sgd_run(net0, RELU_LINEAR, sample_stream(dist.data, f), cfg, r)
        rows.append({"trial": t, "accuracy": accuracy(trained, RELU_LINEAR, dist.data, f),
                     "final_loss": reps[-1].loss})
    _emit(rows, fmt)


@main.command()
@_train_opts
@click.option("--jf-trials", type=int, default=3, show_default=True)
@SEED
@FORMAT
@_guard
def bound(n, steps, rate, batch, noise_std, clip, weight_bound, width, trials, jf_trials,
          seed, fmt):
    """Measured junk flow and the accuracy ceiling it gives for uniform parities."""
    dist = make_distribution("uniform-parities", n)
    r = make_rng(seed)
    net0 = _mlp([n, width, 1], r)
    cfg = GdConfig(steps, rate, batch, clip, noise_std)
    jf = junk_flow_measure(net0, RELU_LINEAR, dist.data, cfg, jf_trials, r)
    b = accuracy_ceiling(noise_std, jf.jf, 2.0 ** -n, 0.5, "parity")
    _emit({"n": n, "jf": jf.jf, "jf_std": jf.std, "loose": jf.loose, **b.to_dict()}, fmt)


@main.command()
@click.option("--n", type=int, default=3, show_default=True)
@click.option("--steps", "T", type=int, default=2, show_default=True)
@click.option("--include-empty", is_flag=True)
@FORMAT
@_guard
def sla(n, T, include_empty, fmt):
    """Average trace TV of the label-copying rule between null and parity sources."""
    spec = SlaSpec(n, (-1, 1), lambda z, hist: int(z[1]), "copy-label")
    rep = distinguishability_report(spec, n, T, include_empty)
    _emit({"rule": rep.rule, "n": n, "T": T, "average_tv": rep.average_tv, "cp": rep.cp,
           "reference": rep.reference, "single_step_lhs": rep.single_step_lhs,
           "single_step_rhs": rep.single_step_rhs}, fmt)


@main.command()
@click.argument("action", type=click.Choice(["build", "algebra", "learn"]))
@click.option("--n", type=int, default=3, show_default=True)
@click.option("--steps", "t_n", type=int, default=8, show_default=True)
@click.option("--mode", type=click.Choice(["gate", "virtual"]), default="gate")
@click.option("--preset", type=click.Choice(["desk", "exact"]), default="desk")
@click.option("--out", "out", type=click.Path(), default=None)
@SEED
@FORMAT
@_guard
def emulate(action, n, t_n, mode, preset, out, seed, fmt):
    """Build the emulation net, print gadget algebra, or train it on a random parity."""
    params = MPrimeParams.desk() if preset == "desk" else MPrimeParams.exact()
    if action == "algebra":
        _emit({"noise_tolerant": params.algebra(), "pre_set_residual": params.pre_set_residual(),
               "noise_free": build_noisefree_plan(n, gf2_parity_learner(n, max(n, t_n)))}, fmt)
        return
    L = gf2_parity_learner(n, t_n)
    em = build_emulation_net(n, t_n, L, params=params, mode=mode)
    if action == "build":
        if out:
            _atomic_write(out, em.to_json())
        _emit({"vertices": em.net.vertex_count, "edges": em.net.edge_count,
               "gadgets": len(em.roles["gadgets"]), "mode": mode,
               "subnet_vertices": len(em.roles["computation"])}, fmt)
        return
    rec = run_experiment("parity-sgd-emulate", ExperimentConfig(
        "parity-sgd-emulate", {"n": n, "t_n": t_n, "mode": mode, "preset": preset}, seed, 1))
    _emit(rec.summary, fmt)


@main.group(name="experiment")
def experiment_group():
    """Registered experiments."""


@experiment_group.command(name="list")
def experiment_list():
    for name, e in sorted(REGISTRY.items()):
        click.echo(f"{name}\t{e.description}")


@experiment_group.command(name="run")
@click.argument("name")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trials", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--param", "-p", multiple=True, help="key=value (JSON value), repeatable")
@click.option("--workers", type=int, default=1, show_default=True)
@FORMAT
@_guard
def experiment_run(name, seed, trials, out_dir, param, workers, fmt):
    """Run NAME and print its summary (the record is written under --out)."""
    params = {}
    for kv in param:
        if "=" not in kv:
            raise InvalidParameter(f"--param expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        try:
            params[k] = json.loads(v)
        except ValueError:
            params[k] = v
    if name not in REGISTRY:
        raise UnknownExperiment(f"no experiment named {name!r}")
    rec = run_experiment(name, ExperimentConfig(name, params, seed, trials, out_dir), workers)
    _emit(rec.summary, fmt)


if __name__ == "__main__":
    main()
