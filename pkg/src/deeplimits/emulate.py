"""Nets whose SGD training runs a given learning algorithm.

Three pieces, assembled by :func:`build_emulation_net`:

* computation subnets: one vertex per gate, every pre-activation at least 3/2
  in magnitude, so the activation is flat there and no gradient reaches them;
* memory gadgets: ``M_s`` (noise free, 12 vertices, a bit stored in a sign)
  and ``M'`` (9 vertices, a trit stored in the chain weights, set once);
* output-control vertices that hold the output at 1/2 while the net learns,
  so every gadget write happens whatever the label.

Constants of the form 2^a 3^b s^c are assembled from their exponents: the
integer part of the base-2 exponent goes through ``ldexp`` and only the
fractional part through a power, which keeps, for instance, 2^(716/3) to a
couple of ulps (``2 ** (716 / 3)`` is off by ~1e-14 relative).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .circuits import Circuit, CircuitBuilder, circuit_eval
from .descent import PerturbedConfig, sgd_step
from .errors import (BudgetExceeded, DimensionMismatch, EncodingDegenerate, InvalidParameter,
                     InvariantViolation, IoError, RangeViolation, SchemaMismatch,
                     ToleranceExceeded, WiringError)
from .netdag import ActivationSpec, NetBuilder, net_from_dict, net_to_dict

LOG2_3 = math.log2(3.0)
SQRT3 = math.sqrt(3.0)
CBRT4 = float(np.cbrt(4.0))


def _exp2(x):
    k = math.floor(x)
    return math.ldexp(2.0 ** (x - k), k)


# ---------------------------------------------------------------- M_s

# log2 of ceil(2^-243 3^-1641/2 (18 sqrt 3)^364) = log2(2^121 3^(179/2))
M_PRIME_MIN_LOG2 = 121 + 89.5 * LOG2_3

# (source, target, base-3 exponent of the s multiplier) for the chain edges,
# and the exponent of each edge weight in the path contribution to v6
_MS_CHAIN = [("v0", "v1", 2.5, 243), ("v1", "v2", 2.0, 81), ("v2", "v3", 1.5, 27),
             ("v3", "v4", 1.0, 9), ("v4", "v5", 0.5, 3), ("v5", "v6", 0.0, 1)]
_MS_PRIMED = [("v2", "v3'", 1.5, 27), ("v3'", "v4'", 1.0, 9), ("v4'", "v5'", 0.5, 3)]


@dataclass(frozen=True)
class MsParams:
    """Scale of the noise-free gadget, fixed by the number of flipping units m'.

    ``s^364 = 2^-243 3^-1641/2 / m'``. With ``fidelity`` the gadget's
    condition s < 1/(18 sqrt 3) is enforced (up to rounding in the last place,
    since the smallest admissible m' puts s exactly on the bound).
    """

    m_prime: float
    fidelity: bool = True

    def __post_init__(self):
        if not self.m_prime > 0 or not math.isfinite(self.m_prime):
            raise InvalidParameter("m' must be positive and finite")
        if self.fidelity and self.log2_m_prime < M_PRIME_MIN_LOG2 - 1e-9:
            raise InvalidParameter("s >= 1/(18 sqrt 3): m' below the admissible minimum")
        if abs(self.gamma / self.gamma_alt - 1) > 1e-10:
            raise ToleranceExceeded("the two closed forms of the learning rate disagree")

    @classmethod
    def minimal(cls, m=0):
        floor = math.ceil(_exp2(M_PRIME_MIN_LOG2))
        return cls(float(max(int(m), floor)))

    @property
    def log2_m_prime(self):
        return math.log2(self.m_prime)

    @property
    def log10_m_prime(self):
        return math.log10(self.m_prime)

    @property
    def log2_s(self):
        return (-243 - 1641 / 2 * LOG2_3 - self.log2_m_prime) / 364

    @property
    def s(self):
        return _exp2(self.log2_s)

    @property
    def s_prime(self):
        """|output of v1|: the magnitude the stored bit is read at."""
        return (18 * SQRT3 * self.s) ** 3

    @property
    def log2_gamma(self):
        return -244 - 1643 / 2 * LOG2_3 - 362 * self.log2_s

    @property
    def gamma(self):
        return _exp2(self.log2_gamma)

    @property
    def gamma_alt(self):
        return self.m_prime * self.s ** 2 / 6

    @property
    def log2_contribution(self):
        return 243 + 1641 / 2 * LOG2_3 + 364 * self.log2_s

    def weight(self, b3, c=1):
        """3^b3 * s^c."""
        return _exp2(b3 * LOG2_3 + c * self.log2_s)

    @property
    def control_weight(self):
        return -_exp2(26 + 91 * LOG2_3 + 40 * self.log2_s)


def ms_gadget_algebra(params):
    """Path contribution and the flip factor of every edge on a flipping path.

    On a wrong-output step dL/d(input of v6) = 2 * 2 * f'(1) = 12; an edge
    whose weight w enters the contribution c with exponent k receives the
    update -gamma * 12 * c * k / w, so its factor is 1 - gamma 12 c k / w^2.
    """
    lg, lc = params.log2_gamma, params.log2_contribution
    factors = {}
    primed = _MS_CHAIN[:2] + _MS_PRIMED + [("v5'", "v6", 0.0, 1)]
    for path in (_MS_CHAIN, primed):
        for src, dst, b3, k in path:
            lw = b3 * LOG2_3 + params.log2_s
            factors[f"{src}->{dst}"] = 1 - _exp2(lg + math.log2(12 * k) + lc - 2 * lw)
    contribution = _exp2(lc)
    return {
        "contribution": contribution,
        "contribution_times_m_prime": contribution * params.m_prime,
        "contribution_matches": abs(contribution * params.m_prime - 1) <= 1e-12,
        "gamma": params.gamma,
        "gamma_alt": params.gamma_alt,
        "gamma_agree": abs(params.gamma / params.gamma_alt - 1) <= 1e-10,
        "flip_factors": factors,
        "flip_rate_check": {e: abs(f + 1) <= 1e-9 for e, f in factors.items()},
        "log10_m_prime": params.log10_m_prime,
    }


def ms_harness_net(params):
    """One M_s copy with v_c, v'_c as input vertices and a ballast edge into v6.

    The ballast edge (constant -> v6) stands in for the other m' - 1
    gadgets: the harness sets it before every step so that v6 receives
    exactly the intended +-1, and restores it afterwards.
    """
    nb = NetBuilder(2)
    vc, vc2 = nb.inputs
    names = ["v0", "v1", "v2", "v3", "v4", "v5", "v3'", "v4'", "v5'", "v6"]
    v = {k: nb.add_vertex() for k in names}
    v["vc"], v["vc'"] = vc, vc2
    nb.add_edge(nb.constant, v["v0"], 2.0)
    gadget = []
    for src, dst, b3, _ in _MS_CHAIN + _MS_PRIMED:
        gadget.append(nb.add_edge(v[src], v[dst], params.weight(b3)))
    gadget.append(nb.add_edge(v["v5'"], v["v6"], -params.s))
    gadget.append(nb.add_edge(vc, v["v4"], params.control_weight))
    gadget.append(nb.add_edge(vc2, v["v4'"], params.control_weight))
    ballast = nb.add_edge(nb.constant, v["v6"], 0.0)
    net = nb.build(output=v["v6"])
    return net, {"vertices": v, "gadget_edges": gadget, "ballast": ballast, "w01": gadget[0]}


def run_ms_gadget_harness(params, controls, labels, outputs=None, steps=None, act=None,
                          strict=True):
    """Drive one M_s copy through a script of control values and labels.

    ``controls[t] = (v_c, v'_c)`` with values in {0, 2}, not both 0. The net
    output is +1 when v_c = 0, -1 when v'_c = 0, and ``outputs[t]`` (default
    +1) when both are 2. Returns one snapshot per step; raises
    ToleranceExceeded if the v0 -> v1 weight does anything but flip on a
    wrong-output step with an active control, or stay bit-identical otherwise
    (``strict=False`` records the factor and carries on).

    The flip is a repelling fixed point: a relative error d in the path
    contribution becomes about (2 * 364 - 3) d after one flip, so in 64-bit
    floats the factor leaves 1e-9 of -1 on the third flip of a script.
    """
    act = ActivationSpec.cubic_saturating() if act is None else act
    steps = len(controls) if steps is None else steps
    if len(controls) < steps or len(labels) < steps:
        raise DimensionMismatch("script shorter than the step count")
    net, roles = ms_harness_net(params)
    plan = net.plan()
    out_v, ballast, e01 = net.output_vertex, roles["ballast"], roles["w01"]
    w = np.array(net.weights)
    snaps = []
    for t in range(steps):
        vc, vc2 = (float(c) for c in controls[t])
        if vc not in (0.0, 2.0) or vc2 not in (0.0, 2.0) or vc == vc2 == 0.0:
            raise InvalidParameter(f"step {t}: controls must be in {{0, 2}} and not both 0")
        if vc == 0.0:
            out = 1.0
        elif vc2 == 0.0:
            out = -1.0
        else:
            out = 1.0 if outputs is None else float(outputs[t])
        label = float(labels[t])
        x = np.array([vc, vc2])
        w[ballast] = 0.0
        _, pre = plan.forward(act, w, x[None, :])
        w[ballast] = out - pre[0, out_v]
        before = w.copy()
        new, _ = sgd_step(net, act, x, label, params.gamma, 0.0, weights=w)
        wrong = label != out
        active = not (vc == 2.0 and vc2 == 2.0)
        ratio = new[e01] / before[e01]
        flipped = bool(wrong and active)
        if strict and flipped and abs(ratio + 1) > 1e-9:
            raise ToleranceExceeded(f"step {t}: v0->v1 factor {float(ratio)!r}, expected -1")
        if strict and not flipped and new[e01] != before[e01]:
            raise ToleranceExceeded(f"step {t}: v0->v1 weight moved without a flip")
        snaps.append({"step": t, "out": out, "label": label, "controls": (vc, vc2),
                      "before": before, "after": new.copy(), "flipped": flipped,
                      "factor": float(ratio), "w01": e01, "gadget_edges": list(roles["gadget_edges"])})
        w = new
    return snaps


# ---------------------------------------------------------------- M'


@dataclass(frozen=True)
class MPrimeParams:
    """Constants of the noise-tolerant gadget and of the net around it.

    ``exact()`` uses the original dead zone and output tolerance; ``desk()``
    widens the dead zone (see :meth:`desk`) and the output tolerance to what
    64-bit arithmetic can meet.
    """

    preset: str
    dead_zone_radius: float
    lower_cubic_bound: float
    eps_prime: float
    noise_relative: float
    gamma: float = math.ldexp(CBRT4, 238) * 3.0 ** 24
    chain: tuple = (0.25, SQRT3 / 12, 1 / 12, SQRT3 / 36, 1 / 36)
    reader: float = 128.0
    control: tuple = (-math.ldexp(1 / 3 ** 9, -81), -math.ldexp(1 / 3 ** 9, -41))
    thresholds: tuple = (math.ldexp(1 / (3 * SQRT3), -21), math.ldexp(1 / (3 * SQRT3), -15))
    low_band: tuple = (math.ldexp(1 / (3 * SQRT3), -25), math.ldexp(1 / (3 * SQRT3), -23))
    high_band: tuple = (math.ldexp(1 / (3 * SQRT3), -13), math.ldexp(1 / (3 * SQRT3), -11))
    oc_weight: float = CBRT4 / 4
    oc_correction: float = math.ldexp(1 / 3 ** 29, -243)
    final_oc_weight: float = 0.49

    @classmethod
    def exact(cls):
        return cls("exact", math.ldexp(1 / 3 ** 9, -121), math.ldexp(1 / 3 ** 9, -120),
                   math.ldexp(1 / 3 ** 11, -123), 0.0)

    @classmethod
    def desk(cls):
        """Dead zone 2^-82 3^-9, cubic from 2^-81 3^-9, output tolerance 2^-40.

        After a write the chain weights are twice their old values only to a
        few ulps, and v4 then cancels to ~1e-30 instead of 0. That residual
        must fall in the dead zone while the write-step input 2^-80 3^-9 stays
        on the cubic branch; these bounds leave a factor ~2 on each side.
        """
        return cls("desk", math.ldexp(1 / 3 ** 9, -82), math.ldexp(1 / 3 ** 9, -81),
                   2.0 ** -40, 1e-18)

    def activation(self):
        return ActivationSpec.dead_zone_cubic(self.dead_zone_radius, self.lower_cubic_bound)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def pre_set_residual(self):
        """v4 input of an untouched gadget with v_c = 2, v'_c = 0, in 64-bit floats."""
        w = self.chain
        y = 1.0
        for k in range(3):
            z = w[k] * y
            y = z * z * z
        return w[3] * y + self.control[0] * 2.0

    def algebra(self):
        """Write-step factors of the five chain edges, from exponents.

        The contribution of v4 -> v5 is 2^-242 3^-29; dL/d(input of the
        output) is -3 cbrt(2)/2 for label +1 and 3 times that, negated, for
        label -1. Edge k enters with exponent 3^(4-k) and has weight
        3^(-k/2)/4.
        """
        lg = 716 / 3 + 24 * LOG2_3
        lc = -242 - 29 * LOG2_3
        ld = math.log2(1.5) + 1 / 3
        plus, minus = [], []
        for k in range(5):
            lw = -k / 2 * LOG2_3 - 2
            rel = _exp2(lg + ld + lc + (4 - k) * LOG2_3 - 2 * lw)
            plus.append(1 + rel)
            minus.append(1 - 3 * rel)
        return {"factor_plus": plus, "factor_minus": minus, "contribution": _exp2(lc)}


# ---------------------------------------------------------------- computation subnet


@dataclass
class ComputationSubnet:
    adapters: dict
    gates: dict
    outputs: tuple
    vertices: list


def _live_gates(circuit):
    live = set()
    stack = [o for o in circuit.outputs]
    while stack:
        w = stack.pop()
        if w in live:
            continue
        live.add(w)
        if w >= circuit.inputs:
            stack.extend(circuit.gates[w - circuit.inputs][1])
    return live


def build_computation_subnet(nb, circuit, taps, encodings):
    """Add a gate-level copy of ``circuit`` reading the vertices ``taps``.

    ``encodings`` is one ``(y0, y1)`` pair for all taps or one per tap: a tap
    below y0 reads as 0, above y1 as 1. Every input gets an adapter vertex
    (weight 4/(y1 - y0), constant weight -2(y1 + y0)/(y1 - y0)); gates use
    NOT: -1; AND: 1, 1 and -2 from the constant; OR: 1, 1 and +2. All outputs
    are +-2. Only gates that reach an output are built.
    """
    if len(taps) != circuit.inputs:
        raise DimensionMismatch(f"circuit has {circuit.inputs} inputs, got {len(taps)} taps")
    if len(encodings) == 2 and all(isinstance(e, (int, float, np.floating)) for e in encodings):
        encodings = [tuple(encodings)] * circuit.inputs
    if len(encodings) != circuit.inputs:
        raise DimensionMismatch("one encoding per tap expected")
    for y0, y1 in encodings:
        if not y1 > y0:
            raise EncodingDegenerate(f"encoding ({y0}, {y1}) is not increasing")
    live = _live_gates(circuit)
    wire = {}
    adapters, gates = {}, {}
    for i in sorted(w for w in live if w < circuit.inputs):
        y0, y1 = encodings[i]
        v = nb.add_vertex()
        nb.add_edge(taps[i], v, 4.0 / (y1 - y0))
        bias = -2.0 * (y1 + y0) / (y1 - y0)
        if bias != 0.0:
            nb.add_edge(nb.constant, v, bias)
        wire[i] = adapters[i] = v
    for g, (kind, ops) in enumerate(circuit.gates):
        w = circuit.inputs + g
        if w not in live:
            continue
        v = nb.add_vertex()
        weights = {}
        for o in ops:
            weights[wire[o]] = weights.get(wire[o], 0.0) + (-1.0 if kind == "NOT" else 1.0)
        if kind != "NOT":
            weights[nb.constant] = -2.0 if kind == "AND" else 2.0
        for s, a in weights.items():
            nb.add_edge(s, v, a)
        wire[w] = gates[w] = v
    outputs = tuple(wire[o] for o in circuit.outputs)
    return ComputationSubnet(adapters, gates, outputs, sorted(wire.values()))


# ---------------------------------------------------------------- the emulation net


def _gkey(g):
    return f"{g[0]},{g[1]},{g[2]}"


def emulation_step_circuit(n, t_n, learner):
    """The circuit the computation subnet runs on every step.

    Inputs: x (n bits), r, then for every gadget (t, i, z) in
    lexicographic order its "set" bit (v2 in the high band), then the same
    gadgets' "label" bits (v_r = +2). Outputs, keyed in ``layout['outputs']``:
    ``("c", g)`` and ``("c'", g)`` drive the gadget controls, ``("oc", t)``
    the output controls of the learning steps and ``("oc_a", t_n)``,
    ``("oc_b", t_n)`` the two half-weight drives of the final one.

    The current step is the smallest t with no gadget of step >= t set. On a
    learning step t the gadgets (t, i, x_i) are written. On step t_n the
    stored samples are replayed through t_n copies of the learner's memory
    update and its prediction is computed on (x, r).
    """
    if learner.n != n:
        raise InvalidParameter("learner input size differs from n")
    gadgets = [(t, i, z) for t in range(t_n) for i in range(n) for z in (0, 1)]
    G = len(gadgets)
    b = CircuitBuilder(n + 1 + 2 * G)
    x, r = b.inputs[:n], b.inputs[n]
    N = dict(zip(gadgets, b.inputs[n + 1:n + 1 + G]))
    R = dict(zip(gadgets, b.inputs[n + 1 + G:]))
    any_t = [b.reduce(b.OR, [N[(t, i, z)] for i in range(n) for z in (0, 1)], b.ZERO)
             for t in range(t_n)]
    suffix = [b.ZERO] * (t_n + 1)
    for t in reversed(range(t_n)):
        suffix[t] = b.OR(any_t[t], suffix[t + 1])
    cur = [b.AND(b.NOT(suffix[t]), b.ONE if t == 0 else suffix[t - 1]) for t in range(t_n + 1)]
    keys, outs = [], []
    for g in gadgets:
        t, i, z = g
        lit = x[i] if z else b.NOT(x[i])
        setting = b.AND(cur[t], lit)
        keys += [("c", g), ("c'", g)]
        outs += [b.NOT(b.OR(setting, N[g])), N[g]]
    for t in range(t_n):
        keys.append(("oc", t))
        outs.append(cur[t])
    mem = [b.ZERO] * learner.memory_bits
    for t in range(t_n):
        xs = [N[(t, i, 1)] for i in range(n)]
        ys = b.reduce(b.OR, [b.AND(N[(t, i, z)], R[(t, i, z)]) for i in range(n) for z in (0, 1)],
                      b.ZERO)
        mem = b.embed(learner.circuit_g, xs + [ys] + mem)
    h = b.embed(learner.circuit_h, list(x) + [r] + mem)[0]
    last = cur[t_n]
    keys += [("oc_a", t_n), ("oc_b", t_n)]
    outs += [b.OR(b.NOT(last), h), b.AND(last, h)]
    layout = {"gadgets": gadgets, "outputs": keys}
    return b.build(outs), layout


@dataclass
class EmulationNet:
    net: object
    params: MPrimeParams
    roles: dict
    n: int
    t_n: int
    mode: str
    learner: object = field(repr=False)
    circuit: Circuit = field(repr=False)
    layout: dict = field(repr=False)

    @property
    def act(self):
        return self.params.activation()

    def with_weights(self, w):
        return dataclasses.replace(self, net=self.net.with_weights(w))

    def gadget_keys(self):
        return list(self.roles["gadgets"])

    def audit(self):
        """Check the counts and fixed weights of the construction; raises WiringError."""
        p, net, R = self.params, self.net, self.roles
        w = net.weights
        edges = {(s, t): k for k, (s, t) in enumerate(zip(net.src.tolist(), net.dst.tolist()))}
        c = net.constant_vertex
        if len(R["gadgets"]) != 2 * self.n * self.t_n:
            raise WiringError("gadget count differs from 2 n t_n")
        if len(R["v_oc"]) != self.t_n + 1:
            raise WiringError("output-control count differs from t_n + 1")
        seen = set()
        for key, g in R["gadgets"].items():
            vs = [g[k] for k in ("v1", "v2", "v3", "v4", "vr", "vc", "vc2")]
            if seen & set(vs) or len(set(vs)) != 7:
                raise WiringError(f"gadget {key} shares vertices")
            seen |= set(vs)
            chain = [(c, g["v1"]), (g["v1"], g["v2"]), (g["v2"], g["v3"]), (g["v3"], g["v4"]),
                     (g["v4"], net.output_vertex)]
            for k, (pair, want) in enumerate(zip(chain, p.chain)):
                if edges.get(pair) != g["edges"]["chain"][k] or w[edges[pair]] != want:
                    raise WiringError(f"gadget {key}: chain edge {k} miswired")
            fixed = [((g["v1"], g["vr"]), p.reader), ((g["vc"], g["v4"]), p.control[0]),
                     ((g["vc2"], g["v4"]), p.control[1]), ((c, g["vc"]), 1.0),
                     ((c, g["vc2"]), 1.0)]
            for pair, want in fixed:
                if pair not in edges or w[edges[pair]] != want:
                    raise WiringError(f"gadget {key}: edge {pair} miswired")
        oc_w = p.oc_weight - p.oc_correction * self.n
        for t, v in enumerate(R["v_oc"]):
            e = edges.get((v, net.output_vertex))
            if e is None or e != R["oc_out_edges"][t]:
                raise WiringError(f"v_oc[{t}] has no output edge")
            want = oc_w if t < self.t_n else p.final_oc_weight
            if w[e] != want:
                raise WiringError(f"v_oc[{t}] output weight {w[e]!r}, expected {want!r}")
            has_const = (c, v) in edges
            if has_const != (t < self.t_n) or (has_const and w[edges[(c, v)]] != 1.0):
                raise WiringError(f"v_oc[{t}] constant edge miswired")

    def to_json(self):
        return json.dumps({"format": "deeplimits.emulation", "version": 1,
                           "n": self.n, "t_n": self.t_n, "mode": self.mode,
                           "params": self.params.to_dict(), "roles": self.roles,
                           "net": net_to_dict(self.net)})

    @classmethod
    def from_json(cls, text, learner):
        try:
            d = json.loads(text)
        except ValueError as exc:
            raise SchemaMismatch(f"not an emulation document: {exc}") from exc
        if d.get("format") != "deeplimits.emulation" or d.get("version") != 1:
            raise SchemaMismatch("not an emulation document of version 1")
        circuit, layout = emulation_step_circuit(d["n"], d["t_n"], learner)
        em = cls(net_from_dict(d["net"]), MPrimeParams.from_dict(d["params"]), d["roles"],
                 d["n"], d["t_n"], d["mode"], learner, circuit, layout)
        em.audit()
        return em


def build_emulation_net(n, t_n, learner, params=None, mode="gate", budget=2000):
    """The noise-tolerant emulation net for ``t_n`` samples of ``n`` bits.

    Inputs are x (n coordinates) then r. ``mode='gate'`` compiles the step
    circuit into the net; ``mode='virtual'`` adds one input vertex per
    circuit output instead, which :func:`emulate_learn` fills from a host
    evaluation of the same circuit on the same taps.
    """
    if n < 1 or t_n < 1:
        raise InvalidParameter("need n >= 1 and t_n >= 1")
    if 2 * n * t_n > budget:
        raise BudgetExceeded(f"{2 * n * t_n} gadgets exceed the budget of {budget}")
    if mode not in ("gate", "virtual"):
        raise InvalidParameter(f"unknown mode {mode!r}")
    p = MPrimeParams.desk() if params is None else params
    circuit, layout = emulation_step_circuit(n, t_n, learner)
    nb = NetBuilder(n + 1)
    c = nb.constant
    out = nb.add_vertex()
    gadgets = {}
    for g in layout["gadgets"]:
        v = {k: nb.add_vertex() for k in ("v1", "v2", "v3", "v4", "vr", "vc", "vc2")}
        seq = [c, v["v1"], v["v2"], v["v3"], v["v4"], out]
        chain = [nb.add_edge(a, b_, wt) for a, b_, wt in zip(seq, seq[1:], p.chain)]
        e = {"chain": chain,
             "reader": nb.add_edge(v["v1"], v["vr"], p.reader),
             "control": nb.add_edge(v["vc"], v["v4"], p.control[0]),
             "control2": nb.add_edge(v["vc2"], v["v4"], p.control[1]),
             "const_c": nb.add_edge(c, v["vc"], 1.0),
             "const_c2": nb.add_edge(c, v["vc2"], 1.0)}
        gadgets[_gkey(g)] = {**v, "edges": e}
    v_oc, oc_out, oc_const = [], [], []
    for t in range(t_n + 1):
        u = nb.add_vertex()
        v_oc.append(u)
        if t < t_n:
            oc_const.append(nb.add_edge(c, u, 1.0))
            oc_out.append(nb.add_edge(u, out, p.oc_weight - p.oc_correction * n))
        else:
            oc_out.append(nb.add_edge(u, out, p.final_oc_weight))
    G = layout["gadgets"]
    taps = (list(nb.inputs[:n + 1]) + [gadgets[_gkey(g)]["v2"] for g in G]
            + [gadgets[_gkey(g)]["vr"] for g in G])
    encs = [(-1.0, 1.0)] * (n + 1) + [p.thresholds] * len(G) + [(-1.0, 1.0)] * len(G)
    if mode == "gate":
        sub = build_computation_subnet(nb, circuit, taps, encs)
        sources = list(sub.outputs)
        computation, adapters, drive_inputs = sub.vertices, sorted(sub.adapters.values()), []
        tapped = {taps[i] for i in sub.adapters}
    else:
        sources = [nb.add_input() for _ in circuit.outputs]
        computation, adapters, drive_inputs = [], [], list(sources)
        tapped = set()
    tethers = []
    for g in G:
        gv = gadgets[_gkey(g)]
        if gv["vr"] not in tapped:
            # an unread reader still needs a path to the output; a zero-weight
            # edge into its own v_c adds nothing and gets no gradient there
            tethers.append(nb.add_edge(gv["vr"], gv["vc"], 0.0))
    drive = {}
    targets = {}
    for key, src in zip(layout["outputs"], sources):
        kind, arg = key
        if kind == "c":
            tgt = gadgets[_gkey(arg)]["vc"]
        elif kind == "c'":
            tgt = gadgets[_gkey(arg)]["vc2"]
        else:
            tgt = v_oc[arg]
        targets.setdefault((src, tgt), []).append(key)
    for (src, tgt), ks in targets.items():
        e = nb.add_edge(src, tgt, 0.5 * len(ks))
        for k in ks:
            drive[k] = e
    for key, gv in gadgets.items():
        g = tuple(int(v) for v in key.split(","))
        gv["edges"]["drive_c"] = drive[("c", g)]
        gv["edges"]["drive_c2"] = drive[("c'", g)]
    roles = {
        "gadgets": gadgets, "v_oc": v_oc, "oc_out_edges": oc_out, "oc_const_edges": oc_const,
        "oc_drive_edges": sorted({drive[k] for k in layout["outputs"] if k[0].startswith("oc")}),
        "computation": computation, "adapters": adapters, "drive_inputs": drive_inputs,
        "tethers": tethers, "output": out,
        "inputs": {"x": list(nb.inputs[:n]), "r": nb.inputs[n]},
    }
    em = EmulationNet(nb.build(output=out), p, roles, n, t_n, mode, learner, circuit, layout)
    em.audit()
    return em


# ---------------------------------------------------------------- learning


def desk_noise(emnet, steps, rng, relative=None):
    """Per-step, per-edge noise uniform in +-relative * |initial weight|."""
    rel = emnet.params.noise_relative if relative is None else relative
    w = np.abs(np.asarray(emnet.net.weights))
    return rng.uniform(-1.0, 1.0, size=(steps, w.size)) * (rel * w)


def construction_noise_bound(n, t_n):
    """The per-step absolute noise bound 1/(n^2 t_n) for the exact constants."""
    return 1.0 / (n * n * t_n)


def construction_noise_admissible(n):
    """Whether the exact-constant analysis covers the bound 1/(n^2 t_n): it needs n > 2^67 3^6."""
    return math.log2(n) > 67 + 6 * LOG2_3


class Event(NamedTuple):
    step: int
    gadget: str
    event: str
    value: float


@dataclass
class Transcript:
    events: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    set_steps: dict = field(default_factory=dict)
    max_frozen_gradient: float = 0.0
    min_subnet_preactivation: float = math.inf
    max_dead_zone_ratio: float = 0.0

    def to_csv(self, path):
        try:
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["step", "gadget", "event", "value"])
                for e in self.events:
                    wr.writerow([e.step, e.gadget, e.event, repr(e.value)])
        except OSError as exc:
            raise IoError(str(exc)) from exc


def _input_vector(emnet, x, r):
    if len(x) != emnet.n:
        raise DimensionMismatch(f"expected {emnet.n} input bits")
    return np.array([2.0 * int(v) - 1 for v in x] + [2.0 * int(r) - 1])


def _read_bit(value, enc, key, step):
    y0, y1 = enc
    if value < y0:
        return 0
    if value > y1:
        return 1
    raise RangeViolation(f"readout {value!r} between the bands", gadget=key, step=step)


def _tap_bits(emnet, Y, xin, step):
    p = emnet.params
    G = emnet.layout["gadgets"]
    bits = [int(v > 0) for v in xin[:emnet.n + 1]]
    gs = emnet.roles["gadgets"]
    bits += [_read_bit(Y[gs[_gkey(g)]["v2"]], p.thresholds, _gkey(g), step) for g in G]
    bits += [_read_bit(Y[gs[_gkey(g)]["vr"]], (-1.0, 1.0), _gkey(g), step) for g in G]
    return np.array(bits, dtype=np.uint8)


def _full_input(emnet, xin, w, step):
    """Input vector including the host-computed drives in virtual mode."""
    if emnet.mode == "gate":
        return xin
    k = len(emnet.roles["drive_inputs"])
    probe = np.concatenate([xin, np.zeros(k)])
    Y, _ = emnet.net.plan().forward(emnet.act, w, probe[None, :])
    bits = _tap_bits(emnet, Y[0], xin, step)
    drives = 4.0 * circuit_eval(emnet.circuit, bits).astype(np.float64) - 2.0
    return np.concatenate([xin, drives])


def _check_readouts(emnet, Y, step, set_steps, tr):
    p = emnet.params
    for key, g in emnet.roles["gadgets"].items():
        done = set_steps.get(key)
        v2, vr = float(Y[g["v2"]]), float(Y[g["vr"]])
        lo, hi = p.high_band if done is not None else p.low_band
        if not lo <= v2 <= hi:
            raise RangeViolation(f"v2 = {v2!r} outside its band", gadget=key, step=step)
        want = 2.0 if done is None or done[1] > 0 else -2.0
        if vr != want:
            raise RangeViolation(f"v_r = {vr!r}, expected {want}", gadget=key, step=step)
        tr.events.append(Event(step, key, "v2", v2))
        tr.events.append(Event(step, key, "vr", vr))


def _check_flat(emnet, pre, step, writing, tr):
    p = emnet.params
    for key, g in emnet.roles["gadgets"].items():
        if key in writing:
            continue
        a = abs(float(pre[g["v4"]]))
        tr.max_dead_zone_ratio = max(tr.max_dead_zone_ratio, a / p.dead_zone_radius)
        if a > p.dead_zone_radius:
            raise RangeViolation(f"v4 pre-activation {a!r} outside the dead zone",
                                 gadget=key, step=step)
    comp = emnet.roles["computation"]
    if comp:
        m = float(np.abs(pre[comp]).min())
        tr.min_subnet_preactivation = min(tr.min_subnet_preactivation, m)
        if m < 1.5:
            raise InvariantViolation(f"step {step}: a subnet vertex left the flat zone ({m!r})")


def emulate_learn(emnet, samples, noise="desk", rng=None):
    """Train on ``t_n`` samples ``((x bits, r bit), label bit)`` with perturbed SGD.

    The net sees (2x - 1, 2r - 1) and the label 2y - 1, at the gadget's rate.
    ``noise`` is None (no perturbation), ``"desk"`` (relative preset, needs
    ``rng``) or an explicit (t_n, edges) matrix. Every step checks the
    readout bands, the output tolerance, the dead-zone cancellations, the
    flat zones of the subnet, that only the written gadgets' chains and the
    active output-control edge have nonzero gradient, and the x2 / x(-2)
    chain factors.
    """
    samples = list(samples)
    T = len(samples)
    if T != emnet.t_n:
        raise DimensionMismatch(f"expected {emnet.t_n} samples, got {T}")
    E = emnet.net.edge_count
    if noise is None:
        delta = np.zeros((T, E))
    elif isinstance(noise, str):
        if noise != "desk" or rng is None:
            raise InvalidParameter("noise must be None, 'desk' (with rng) or a matrix")
        delta = desk_noise(emnet, T, rng)
    else:
        delta = np.asarray(noise, dtype=np.float64)
    PerturbedConfig(T, emnet.params.gamma, delta)  # shape check
    if delta.shape[1] != E:
        raise DimensionMismatch("noise matrix width must equal the edge count")
    p, act, net, R = emnet.params, emnet.act, emnet.net, emnet.roles
    plan = net.plan()
    w = np.array(net.weights)
    tr = Transcript()
    set_steps = {}
    for t, ((x, r), y) in enumerate(samples):
        xin = _full_input(emnet, _input_vector(emnet, x, r), w, t)
        Y, pre = plan.forward(act, w, xin[None, :])
        Y, pre = Y[0], pre[0]
        _check_readouts(emnet, Y, t, set_steps, tr)
        out = float(Y[net.output_vertex])
        tr.outputs.append(out)
        tr.events.append(Event(t, "", "output", out))
        if abs(out - 0.5) > p.eps_prime:
            raise RangeViolation(f"output {out!r} outside 1/2 +- {p.eps_prime}", step=t)
        writing = {_gkey((t, i, int(x[i]))) for i in range(emnet.n)}
        _check_flat(emnet, pre, t, writing, tr)
        label = 2.0 * int(y) - 1
        new, info = sgd_step(net, act, xin, label, p.gamma, delta[t], weights=w)
        grad = info["grad"]
        moving = np.zeros(E, dtype=bool)
        for key in writing:
            moving[R["gadgets"][key]["edges"]["chain"]] = True
        moving[R["oc_out_edges"][t]] = True
        frozen = float(np.abs(grad[~moving]).max(initial=0.0))
        tr.max_frozen_gradient = max(tr.max_frozen_gradient, frozen)
        if frozen != 0.0:
            k = int(np.flatnonzero((grad != 0) & ~moving)[0])
            raise InvariantViolation(f"step {t}: nonzero gradient on frozen edge {k}")
        for key in sorted(writing):
            chain = R["gadgets"][key]["edges"]["chain"]
            f = new[chain] / w[chain]
            if np.any(np.abs(f / (2.0 * label) - 1) > 1e-6):
                raise ToleranceExceeded(f"step {t}: gadget {key} chain factors {f}, "
                                        f"expected {2 * label}")
            tr.events.append(Event(t, key, "set", label))
            tr.events.append(Event(t, key, "chain", float(f[0])))
            set_steps[key] = (t, label)
        w = new
    tr.set_steps = dict(set_steps)
    return emnet.with_weights(w), tr


def predict(emnet, x, r=0):
    """Net output on (x, r) at the prediction step; readouts must be in a band."""
    w = emnet.net.weights
    xin = _full_input(emnet, _input_vector(emnet, x, r), w, emnet.t_n)
    Y, pre = emnet.net.plan().forward(emnet.act, w, xin[None, :])
    _tap_bits(emnet, Y[0], xin, emnet.t_n)
    comp = emnet.roles["computation"]
    if comp and float(np.abs(pre[0, comp]).min()) < 1.5:
        raise InvariantViolation("a subnet vertex left the flat zone at prediction")
    return float(Y[0, emnet.net.output_vertex])


def memorized_samples(emnet):
    """(x*, y*) per learning step as read back from the gadgets."""
    xin = np.full(emnet.n + 1, -1.0)
    w = emnet.net.weights
    xin = _full_input(emnet, xin, w, emnet.t_n)
    Y, _ = emnet.net.plan().forward(emnet.act, w, xin[None, :])
    bits = _tap_bits(emnet, Y[0], xin, emnet.t_n)
    G = emnet.layout["gadgets"]
    N = dict(zip(G, bits[emnet.n + 1:emnet.n + 1 + len(G)]))
    Rb = dict(zip(G, bits[emnet.n + 1 + len(G):]))
    out = []
    for t in range(emnet.t_n):
        xs = tuple(int(N[(t, i, 1)]) for i in range(emnet.n))
        ys = int(any(N[(t, i, z)] and Rb[(t, i, z)] for i in range(emnet.n) for z in (0, 1)))
        out.append((xs, ys))
    return out


def host_oracle(learner, samples):
    """Run the learner on the host over every sample; returns (memory, predictor)."""
    b = learner.initial_memory()
    for (x, _), y in samples:
        b = learner.host_g(list(x), int(y), b)
    return b, lambda x, r=0: int(learner.host_h(list(x), int(r), b))


# ---------------------------------------------------------------- noise-free plan


def guess_wrapper(A):
    """A'(b, x, y, r, r') = b if y == r' else A(b, x, y, r)."""
    def step(b, x, y, r, r2):
        return b if int(y) == int(r2) else A(b, x, y, r)
    return step


def run_guess_wrapper(A, b0, stream):
    """Fold A' over ``(x, y, r, r')`` tuples; returns (memory, learning-step indices)."""
    Aw = guess_wrapper(A)
    b = b0
    steps = []
    for k, (x, y, r, r2) in enumerate(stream):
        if int(y) != int(r2):
            steps.append(k)
        b = Aw(b, x, y, r, r2)
    return b, steps


def build_noisefree_plan(n, learner, m_prime=None):
    """Layout and algebra of the noise-free (M_s based) emulation; nothing is instantiated.

    Memory units: the learner's m bits plus m' - m extra units flipped to
    make every step flip exactly m' units, so the output is +-1. m' is at
    least 2^121 3^(179/2) ~ 1.35e79, far past anything that can be built.
    """
    m = learner.memory_bits
    params = MsParams.minimal(m) if m_prime is None else MsParams(float(max(m, m_prime)))
    return {
        "n": n,
        "inputs": {"x": n, "r": 1, "r_guess": 1},
        "memory_bits": m,
        "m_prime": params.m_prime,
        "log10_m_prime": params.log10_m_prime,
        "log10_m_prime_min": M_PRIME_MIN_LOG2 * math.log10(2),
        "extra_units_log10": math.log10(params.m_prime - m) if params.m_prime > m else None,
        "s": params.s,
        "s_prime": params.s_prime,
        "gamma": params.gamma,
        "gadget_roles": {"memory": list(range(m)), "extra": "m' - m flip-balancing units"},
        "wrapper": "A'(b,x,y,r,r') = b if y == r' else A(b,x,y,r); output is 2 r' - 1 while learning",
        "gate_counts": dict(learner.gate_counts),
        "algebra": ms_gadget_algebra(params),
    }
