"""Boolean circuits over AND, OR (arity 2) and NOT, and a GF(2) learner built from them.

Wires 0..n-1 are the inputs; gate i drives wire n + i and may only read
wires below its own.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, InvalidParameter, SchemaMismatch, TooLarge, WiringError

ARITY = {"AND": 2, "OR": 2, "NOT": 1}


@dataclass(frozen=True)
class Circuit:
    inputs: int
    gates: tuple
    outputs: tuple

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple((k, tuple(int(o) for o in ops))
                                                for k, ops in self.gates))
        object.__setattr__(self, "outputs", tuple(int(o) for o in self.outputs))
        for i, (kind, ops) in enumerate(self.gates):
            if kind not in ARITY:
                raise WiringError(f"gate {i}: unknown kind {kind!r}")
            if len(ops) != ARITY[kind]:
                raise WiringError(f"gate {i}: {kind} takes {ARITY[kind]} operands")
            if any(o < 0 or o >= self.inputs + i for o in ops):
                raise WiringError(f"gate {i}: operand does not precede the gate")
        width = self.inputs + len(self.gates)
        if any(o < 0 or o >= width for o in self.outputs):
            raise WiringError("output index out of range")

    @property
    def width(self):
        return self.inputs + len(self.gates)

    def to_json(self):
        return json.dumps({"inputs": self.inputs,
                           "gates": [[k, list(ops)] for k, ops in self.gates],
                           "outputs": list(self.outputs)})

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
            return cls(d["inputs"], tuple((k, tuple(o)) for k, o in d["gates"]),
                       tuple(d["outputs"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"not a circuit document: {exc}") from exc

    def netlist(self):
        lines = [f"inputs {self.inputs}"]
        for i, (kind, ops) in enumerate(self.gates):
            lines.append(f"w{self.inputs + i} = {kind}({', '.join(f'w{o}' for o in ops)})")
        lines.append("out " + " ".join(f"w{o}" for o in self.outputs))
        return "\n".join(lines) + "\n"


def circuit_eval(c, bits):
    """Evaluate on one bit vector or a (batch, inputs) array; returns uint8 outputs."""
    X = np.asarray(bits)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != c.inputs:
        raise DimensionMismatch(f"circuit takes {c.inputs} inputs, got {X.shape[1]}")
    vals = np.empty((c.width, X.shape[0]), dtype=bool)
    vals[:c.inputs] = X.T.astype(bool)
    for i, (kind, ops) in enumerate(c.gates):
        w = c.inputs + i
        if kind == "NOT":
            np.logical_not(vals[ops[0]], out=vals[w])
        elif kind == "AND":
            np.logical_and(vals[ops[0]], vals[ops[1]], out=vals[w])
        else:
            np.logical_or(vals[ops[0]], vals[ops[1]], out=vals[w])
    out = vals[list(c.outputs)].T.astype(np.uint8)
    return out[0] if single else out


class CircuitBuilder:
    """Gate builder with constant folding and structural hashing.

    Wires are ints; ``ONE`` and ``ZERO`` are symbolic constants that never
    reach the built circuit except as outputs (then realised as x0 OR NOT x0
    and x0 AND NOT x0).
    """

    ONE = -1
    ZERO = -2

    def __init__(self, n):
        self.n = n
        self.inputs = list(range(n))
        self._gates = []
        self._seen = {}

    def _gate(self, kind, ops):
        if kind != "NOT":
            ops = tuple(sorted(ops))
        key = (kind, ops)
        w = self._seen.get(key)
        if w is None:
            w = self.n + len(self._gates)
            self._gates.append(key)
            self._seen[key] = w
        return w

    def NOT(self, a):
        if a == self.ONE:
            return self.ZERO
        if a == self.ZERO:
            return self.ONE
        if a >= self.n:
            kind, ops = self._gates[a - self.n]
            if kind == "NOT":
                return ops[0]
        return self._gate("NOT", (a,))

    def _complements(self, a, b):
        for u, v in ((a, b), (b, a)):
            if u >= self.n and self._gates[u - self.n] == ("NOT", (v,)):
                return True
        return False

    def AND(self, a, b):
        if a == self.ZERO or b == self.ZERO:
            return self.ZERO
        if a == self.ONE:
            return b
        if b == self.ONE or a == b:
            return a
        if self._complements(a, b):
            return self.ZERO
        return self._gate("AND", (a, b))

    def OR(self, a, b):
        if a == self.ONE or b == self.ONE:
            return self.ONE
        if a == self.ZERO:
            return b
        if b == self.ZERO or a == b:
            return a
        if self._complements(a, b):
            return self.ONE
        return self._gate("OR", (a, b))

    def XOR(self, a, b):
        return self.AND(self.OR(a, b), self.NOT(self.AND(a, b)))

    def MUX(self, sel, a, b):
        """a if sel else b."""
        return self.OR(self.AND(sel, a), self.AND(self.NOT(sel), b))

    def reduce(self, op, wires, empty):
        """Balanced tree of ``op`` over ``wires``."""
        wires = list(wires)
        if not wires:
            return empty
        while len(wires) > 1:
            nxt = [op(wires[i], wires[i + 1]) for i in range(0, len(wires) - 1, 2)]
            if len(wires) % 2:
                nxt.append(wires[-1])
            wires = nxt
        return wires[0]

    def embed(self, circuit, wires):
        """Replay ``circuit`` on the given input wires; returns its output wires."""
        if len(wires) != circuit.inputs:
            raise DimensionMismatch(f"circuit takes {circuit.inputs} inputs, got {len(wires)}")
        m = list(wires)
        ops = {"NOT": self.NOT, "AND": self.AND, "OR": self.OR}
        for kind, args in circuit.gates:
            m.append(ops[kind](*(m[a] for a in args)))
        return [m[o] for o in circuit.outputs]

    def build(self, outputs):
        outs = []
        for o in outputs:
            if o in (self.ONE, self.ZERO):
                if self.n == 0:
                    raise InvalidParameter("constant outputs need at least one input")
                notx = self._gate("NOT", (0,))
                o = self._gate("OR" if o == self.ONE else "AND", (0, notx))
            outs.append(o)
        return Circuit(self.n, tuple(self._gates), tuple(outs))


def synth_from_table(table):
    """Sum-of-products circuit for a truth table.

    ``table`` has 2^k rows (row index = sum of input bit i times 2^i) and one
    column per output.
    """
    t = np.asarray(table)
    if t.ndim == 1:
        t = t[:, None]
    rows = t.shape[0]
    k = rows.bit_length() - 1
    if rows & (rows - 1) or rows == 0:
        raise InvalidParameter("table length must be a power of two")
    if k > 8:
        raise TooLarge("table synthesis supports at most 8 inputs")
    if k == 0:
        raise InvalidParameter("table needs at least one input")
    b = CircuitBuilder(k)
    outs = []
    for col in t.T:
        ones = np.flatnonzero(col)
        if ones.size == rows:
            outs.append(b.ONE)
            continue
        terms = []
        for r in ones:
            lits = [i if r >> i & 1 else b.NOT(i) for i in range(k)]
            terms.append(b.reduce(b.AND, lits, b.ONE))
        outs.append(b.reduce(b.OR, terms, b.ZERO))
    return b.build(outs)


# ---------------------------------------------------------------- GF(2) learner


@dataclass
class LearnerStepSpec:
    """Memory layout: row j occupies bits [j*(n+2), (j+1)*(n+2)) as
    (x_0..x_{n-1}, y, valid). The valid flags form a unary counter.

    ``host_h(x, r, b)`` predicts a bit (``r`` is the guess used outside the
    span); ``host_g(x, y, b)`` returns the next memory. The circuits take
    inputs (x, r or y, b) in that order.
    """

    n: int
    t_n: int
    memory_bits: int
    host_h: Callable
    host_g: Callable
    circuit_h: Circuit
    circuit_g: Circuit
    gate_counts: dict = field(default_factory=dict)

    def initial_memory(self):
        return [0] * self.memory_bits

    def rows(self, b):
        w = self.n + 2
        out = []
        for j in range(self.t_n):
            seg = b[j * w:(j + 1) * w]
            if seg[-1]:
                out.append((sum(int(v) << i for i, v in enumerate(seg[:self.n])), int(seg[self.n])))
        return out

    def _reduce(self, x, b):
        """Residual of x against the memorized rows and the XOR of the labels used."""
        basis = []
        for rx, ry in self.rows(b):
            for bx, by in basis:
                if rx ^ bx < rx:
                    rx, ry = rx ^ bx, ry ^ by
            if rx:
                basis.append((rx, ry))
                basis.sort(reverse=True)
        v = sum(int(t) << i for i, t in enumerate(x))
        acc = 0
        for bx, by in basis:
            if v ^ bx < v:
                v, acc = v ^ bx, acc ^ by
        return v, acc

    def in_span(self, x, b):
        return self._reduce(x, b)[0] == 0

    def rank(self, b):
        return len(self.rows(b))


def _host_h(L, x, r, b):
    res, pred = L._reduce(x, b)
    return pred if res == 0 else int(r)


def _host_g(L, x, y, b):
    b = [int(v) for v in b]
    res, _ = L._reduce(x, b)
    if res == 0:
        return b
    w = L.n + 2
    for j in range(L.t_n):
        if not b[j * w + w - 1]:
            b[j * w:(j + 1) * w] = [int(v) for v in x] + [int(y), 1]
            break
    return b


def _elimination(bld, n, t_n, xw, mem):
    """Oblivious Gauss-Jordan over the memorized rows with the query appended.

    Returns (query residual x-part wires, query label-part wire). Column c
    takes as pivot the first not-yet-used valid row with bit c set and clears
    bit c from every other row, query included.
    """
    w = n + 2
    rows = []
    for j in range(t_n):
        seg = mem[j * w:(j + 1) * w]
        valid = seg[-1]
        rows.append([bld.AND(valid, v) for v in seg[:n + 1]])
    query = list(xw) + [bld.ZERO]
    used = [bld.ZERO] * t_n
    for c in range(n):
        taken = bld.ZERO
        sel = []
        for j in range(t_n):
            cand = bld.AND(rows[j][c], bld.NOT(used[j]))
            s = bld.AND(cand, bld.NOT(taken))
            sel.append(s)
            taken = bld.OR(taken, cand)
        pivot = [bld.reduce(bld.OR, [bld.AND(sel[j], rows[j][k]) for j in range(t_n)], bld.ZERO)
                 for k in range(n + 1)]
        for j in range(t_n):
            hit = bld.AND(rows[j][c], bld.NOT(sel[j]))
            rows[j] = [bld.XOR(rows[j][k], bld.AND(hit, pivot[k])) for k in range(n + 1)]
            used[j] = bld.OR(used[j], sel[j])
        qhit = query[c]
        query = [bld.XOR(query[k], bld.AND(qhit, pivot[k])) for k in range(n + 1)]
    return query[:n], query[n]


def gf2_parity_learner(n, t_n):
    """Memorize-then-solve parity learner with host and gate-level forms."""
    if n < 1 or t_n < n:
        raise InvalidParameter("need n >= 1 and t_n >= n")
    m = t_n * (n + 2)
    spec = LearnerStepSpec(n, t_n, m, None, None, None, None)
    spec.host_h = lambda x, r, b: _host_h(spec, x, r, b)
    spec.host_g = lambda x, y, b: _host_g(spec, x, y, b)

    bh = CircuitBuilder(n + 1 + m)
    x, r, mem = bh.inputs[:n], bh.inputs[n], bh.inputs[n + 1:]
    res, pred = _elimination(bh, n, t_n, x, mem)
    inspan = bh.NOT(bh.reduce(bh.OR, res, bh.ZERO))
    spec.circuit_h = bh.build([bh.MUX(inspan, pred, r)])

    bg = CircuitBuilder(n + 1 + m)
    x, y, mem = bg.inputs[:n], bg.inputs[n], bg.inputs[n + 1:]
    res, _ = _elimination(bg, n, t_n, x, mem)
    store = bg.reduce(bg.OR, res, bg.ZERO)
    w = n + 2
    outs = []
    earlier_free = bg.ZERO
    for j in range(t_n):
        seg = mem[j * w:(j + 1) * w]
        valid = seg[-1]
        free = bg.NOT(valid)
        write = bg.AND(store, bg.AND(free, bg.NOT(earlier_free)))
        earlier_free = bg.OR(earlier_free, free)
        new = list(x) + [y]
        outs += [bg.MUX(write, new[k], seg[k]) for k in range(n + 1)]
        outs.append(bg.OR(valid, write))
    spec.circuit_g = bg.build(outs)
    spec.gate_counts = {"h": len(spec.circuit_h.gates), "g": len(spec.circuit_g.gates)}
    return spec
