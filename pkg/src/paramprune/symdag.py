"""Hash-consed expression DAGs of the dynamics functions and their operation counts.

The numeric dynamics code is traced by running it on numpy object arrays whose
entries are :class:`Expr` handles. Arithmetic with plain numbers is partially
evaluated while tracing (``x * 0 -> 0``, ``x * 1 -> x``, ``x + 0 -> x``), so the traced
graph holds only nodes that depend on inputs or parameters. :func:`simplify`
then folds constants and removes trivial operations; :func:`op_count` counts the
distinct additions, multiplications, divisions and sin/cos evaluations reachable
from the outputs. Negation is free.
"""

from __future__ import annotations

import json
import math
import numbers
from dataclasses import dataclass

import numpy as np

from .mbmodel import MultibodyModel
from .tree import kinematic_tree, rnea

COMMUTATIVE = ("add", "mul")
FUNCS = ("sin", "cos")


class ExprDag:
    """Node table. Node ``i`` only refers to nodes with smaller ids."""

    def __init__(self):
        self.ops: list = []
        self.args: list = []
        self.vals: list = []  # constant value, input name or parameter label
        self._index: dict = {}
        self.outputs: dict = {}

    def __len__(self):
        return len(self.ops)

    def _intern(self, op, args=(), val=None):
        if op in COMMUTATIVE:
            args = tuple(sorted(args))
        key = (op, args, val)
        i = self._index.get(key)
        if i is None:
            i = len(self.ops)
            self.ops.append(op)
            self.args.append(args)
            self.vals.append(val)
            self._index[key] = i
        return i

    # raw constructors: hash-consing only
    def const(self, v):
        v = float(v)
        return self._intern("const", (), 0.0 if v == 0 else v)

    def input(self, name):
        return self._intern("input", (), str(name))

    def param(self, label):
        return self._intern("param", (), str(label))

    def node(self, op, *args):
        return self._intern(op, tuple(int(a) for a in args))

    def expr(self, i) -> "Expr":
        return Expr(self, i)

    def set_output(self, name, value):
        if isinstance(value, Expr):
            if value.dag is not self:
                raise ValueError("expression belongs to another DAG")
            self.outputs[name] = value.id
        else:
            self.outputs[name] = self.const(value)

    # --- queries --------------------------------------------------------------------
    def reachable(self, roots=None):
        roots = self.outputs.values() if roots is None else roots
        seen = np.zeros(len(self.ops), dtype=bool)
        stack = list(roots)
        while stack:
            i = stack.pop()
            if seen[i]:
                continue
            seen[i] = True
            stack.extend(self.args[i])
        return np.flatnonzero(seen)

    def param_labels(self):
        return sorted({self.vals[i] for i in self.reachable() if self.ops[i] == "param"})

    def input_names(self):
        return sorted({self.vals[i] for i in self.reachable() if self.ops[i] == "input"})

    def evaluate(self, inputs: dict, params: dict = None) -> dict:
        """Numeric values of all outputs; inputs and params may be arrays (broadcast)."""
        params = params or {}
        val = {}
        for i in self.reachable():
            op, a = self.ops[i], self.args[i]
            if op == "const":
                v = self.vals[i]
            elif op == "input":
                v = np.asarray(inputs[self.vals[i]], dtype=float)
            elif op == "param":
                v = np.asarray(params[self.vals[i]], dtype=float)
            elif op == "add":
                v = val[a[0]] + val[a[1]]
            elif op == "mul":
                v = val[a[0]] * val[a[1]]
            elif op == "neg":
                v = -val[a[0]]
            elif op == "div":
                v = val[a[0]] / val[a[1]]
            elif op == "sin":
                v = np.sin(val[a[0]])
            elif op == "cos":
                v = np.cos(val[a[0]])
            else:
                raise ValueError(f"unknown op {op}")
            val[i] = v
        return {name: val[i] for name, i in self.outputs.items()}

    def to_dict(self) -> dict:
        live = self.reachable()
        remap = {int(old): new for new, old in enumerate(live)}
        nodes = []
        for old in live:
            op = self.ops[old]
            entry = {"id": remap[int(old)], "op": op}
            if op in ("const", "input", "param"):
                entry["value"] = self.vals[old]
            else:
                entry["args"] = [remap[a] for a in self.args[old]]
            nodes.append(entry)
        return {"nodes": nodes, "outputs": {k: remap[v] for k, v in self.outputs.items()}}

    @classmethod
    def from_dict(cls, d) -> "ExprDag":
        dag = cls()
        ids = {}
        for n in sorted(d["nodes"], key=lambda e: e["id"]):
            op = n["op"]
            if op == "const":
                ids[n["id"]] = dag.const(n["value"])
            elif op == "input":
                ids[n["id"]] = dag.input(n["value"])
            elif op == "param":
                ids[n["id"]] = dag.param(n["value"])
            else:
                ids[n["id"]] = dag.node(op, *(ids[a] for a in n["args"]))
        dag.outputs = {k: ids[v] for k, v in d["outputs"].items()}
        return dag

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _is_number(x):
    return isinstance(x, numbers.Number) and not isinstance(x, bool)


class Expr:
    """Handle to a DAG node supporting arithmetic with numbers and other handles."""

    __slots__ = ("dag", "id")
    __array_priority__ = 1000

    def __init__(self, dag: ExprDag, i: int):
        self.dag = dag
        self.id = i

    def _lift(self, other):
        if isinstance(other, Expr):
            if other.dag is not self.dag:
                raise ValueError("expressions from different DAGs")
            return other.id
        return self.dag.const(other)

    def __add__(self, other):
        if _is_number(other) and other == 0:
            return self
        return Expr(self.dag, self.dag.node("add", self.id, self._lift(other)))

    __radd__ = __add__

    def __neg__(self):
        return Expr(self.dag, self.dag.node("neg", self.id))

    def __sub__(self, other):
        if _is_number(other):
            return self if other == 0 else self + (-float(other))
        return self + (-other)

    def __rsub__(self, other):
        neg = -self
        return neg if other == 0 else neg + other

    def __mul__(self, other):
        if _is_number(other):
            if other == 0:
                return 0.0
            if other == 1:
                return self
            if other == -1:
                return -self
        return Expr(self.dag, self.dag.node("mul", self.id, self._lift(other)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_number(other):
            if other == 1:
                return self
            return self * (1.0 / float(other))
        return Expr(self.dag, self.dag.node("div", self.id, self._lift(other)))

    def __rtruediv__(self, other):
        if _is_number(other) and other == 0:
            return 0.0
        return Expr(self.dag, self.dag.node("div", self._lift(other), self.id))

    def __pos__(self):
        return self

    def sin(self):
        return Expr(self.dag, self.dag.node("sin", self.id))

    def cos(self):
        return Expr(self.dag, self.dag.node("cos", self.id))

    def __repr__(self):
        return f"Expr({self.dag.ops[self.id]}#{self.id})"


# --- simplification ---------------------------------------------------------------------

class _Builder:
    """Smart constructors applying the rewrite rules into a fresh table."""

    def __init__(self):
        self.dag = ExprDag()

    def is_const(self, i):
        return self.dag.ops[i] == "const"

    def cval(self, i):
        return self.dag.vals[i]

    def const(self, v):
        return self.dag.const(v)

    def neg(self, a):
        d = self.dag
        if d.ops[a] == "const":
            return self.const(-d.vals[a])
        if d.ops[a] == "neg":
            return d.args[a][0]
        return d.node("neg", a)

    def _strip(self, a):
        """(sign, magnitude id) with negations pulled out."""
        if self.dag.ops[a] == "neg":
            return -1, self.dag.args[a][0]
        if self.dag.ops[a] == "const" and self.cval(a) < 0:
            return -1, self.const(-self.cval(a))
        return 1, a

    def add(self, a, b):
        d = self.dag
        if self.is_const(a) and self.is_const(b):
            return self.const(self.cval(a) + self.cval(b))
        if self.is_const(a) and self.cval(a) == 0:
            return b
        if self.is_const(b) and self.cval(b) == 0:
            return a
        sa, ma = self._strip(a)
        sb, mb = self._strip(b)
        if ma == mb and sa != sb:
            return self.const(0.0)
        if sa < 0 and sb < 0:
            return self.neg(d.node("add", ma, mb))
        return d.node("add", a, b)

    def mul(self, a, b):
        d = self.dag
        if self.is_const(a) and self.is_const(b):
            return self.const(self.cval(a) * self.cval(b))
        for x, y in ((a, b), (b, a)):
            if self.is_const(x):
                v = self.cval(x)
                if v == 0:
                    return self.const(0.0)
                if v == 1:
                    return y
                if v == -1:
                    return self.neg(y)
        sa, ma = self._strip(a)
        sb, mb = self._strip(b)
        out = d.node("mul", ma, mb)
        return out if sa * sb > 0 else self.neg(out)

    def div(self, a, b):
        d = self.dag
        if self.is_const(a) and self.is_const(b) and self.cval(b) != 0:
            return self.const(self.cval(a) / self.cval(b))
        if self.is_const(a) and self.cval(a) == 0:
            return self.const(0.0)
        if self.is_const(b) and self.cval(b) == 1:
            return a
        sa, ma = self._strip(a)
        sb, mb = self._strip(b)
        out = d.node("div", ma, mb)
        return out if sa * sb > 0 else self.neg(out)

    def func(self, op, a):
        d = self.dag
        if self.is_const(a):
            return self.const(math.sin(self.cval(a)) if op == "sin" else math.cos(self.cval(a)))
        if d.ops[a] == "neg":
            inner = d.args[a][0]
            return self.neg(d.node("sin", inner)) if op == "sin" else d.node("cos", inner)
        return d.node(op, a)


def _rebuild(dag: ExprDag, leaf) -> ExprDag:
    """Bottom-up pass over the live nodes through the smart constructors.

    ``leaf(op, val, builder)`` maps const/input/param nodes to new ids.
    """
    b = _Builder()
    new = {}
    for i in dag.reachable():
        op, a = dag.ops[i], dag.args[i]
        if op in ("const", "input", "param"):
            new[i] = leaf(op, dag.vals[i], b)
        elif op == "add":
            new[i] = b.add(new[a[0]], new[a[1]])
        elif op == "mul":
            new[i] = b.mul(new[a[0]], new[a[1]])
        elif op == "neg":
            new[i] = b.neg(new[a[0]])
        elif op == "div":
            new[i] = b.div(new[a[0]], new[a[1]])
        else:
            new[i] = b.func(op, new[a[0]])
    b.dag.outputs = {k: new[v] for k, v in dag.outputs.items()}
    return _compact(b.dag)


def _compact(dag: ExprDag) -> ExprDag:
    """Copy keeping only live nodes, in id order."""
    out = ExprDag()
    new = {}
    for i in dag.reachable():
        op, a = dag.ops[i], dag.args[i]
        if op == "const":
            new[i] = out.const(dag.vals[i])
        elif op == "input":
            new[i] = out.input(dag.vals[i])
        elif op == "param":
            new[i] = out.param(dag.vals[i])
        else:
            new[i] = out.node(op, *(new[x] for x in a))
    out.outputs = {k: new[v] for k, v in dag.outputs.items()}
    return out


def _default_leaf(op, val, b):
    if op == "const":
        return b.const(val)
    if op == "input":
        return b.dag.input(val)
    return b.dag.param(val)


def simplify(dag: ExprDag, max_passes: int = 10) -> ExprDag:
    """Constant folding and trivial-operation removal, repeated to a fixed point."""
    cur = _rebuild(dag, _default_leaf)
    for _ in range(max_passes):
        nxt = _rebuild(cur, _default_leaf)
        if len(nxt) == len(cur) and structurally_equal(nxt, cur):
            return nxt
        cur = nxt
    return cur


def substitute_params(dag: ExprDag, values: dict, simplify_result: bool = False) -> ExprDag:
    """Replace parameters by constants; labels not in ``values`` stay symbolic."""
    known = set(dag.param_labels())
    unknown = set(values) - known
    if unknown:
        raise KeyError(f"unknown parameter labels: {sorted(unknown)}")
    values = {k: float(v) for k, v in values.items()}

    def leaf(op, val, b):
        if op == "param" and val in values:
            return b.const(values[val])
        return _default_leaf(op, val, b)

    if simplify_result:
        return simplify(_rebuild(dag, leaf))
    # substitution without rewriting other nodes
    out = ExprDag()
    new = {}
    for i in dag.reachable():
        op, a = dag.ops[i], dag.args[i]
        if op == "param" and dag.vals[i] in values:
            new[i] = out.const(values[dag.vals[i]])
        elif op == "const":
            new[i] = out.const(dag.vals[i])
        elif op == "input":
            new[i] = out.input(dag.vals[i])
        elif op == "param":
            new[i] = out.param(dag.vals[i])
        else:
            new[i] = out.node(op, *(new[x] for x in a))
    out.outputs = {k: new[v] for k, v in dag.outputs.items()}
    return out


def eliminate_params(dag: ExprDag, keep) -> ExprDag:
    """Zero every parameter not in ``keep`` and simplify."""
    keep = set(keep)
    zeros = {lab: 0.0 for lab in dag.param_labels() if lab not in keep}
    return substitute_params(dag, zeros, simplify_result=True)


def structurally_equal(d1: ExprDag, d2: ExprDag) -> bool:
    """True when both DAGs compute structurally identical outputs."""
    if set(d1.outputs) != set(d2.outputs):
        return False
    table = {}

    def canon(dag):
        ids = {}
        for i in dag.reachable():
            op = dag.ops[i]
            if op in ("const", "input", "param"):
                key = (op, dag.vals[i])
            else:
                ch = [ids[a] for a in dag.args[i]]
                if op in COMMUTATIVE:
                    ch.sort()
                key = (op, tuple(ch))
            ids[i] = table.setdefault(key, len(table))
        return {k: ids[v] for k, v in dag.outputs.items()}

    return canon(d1) == canon(d2)


@dataclass(frozen=True)
class OpCount:
    adds: int = 0
    muls: int = 0
    funcs: int = 0
    divs: int = 0

    @property
    def total(self) -> int:
        return self.adds + self.muls + self.funcs + self.divs

    def to_dict(self) -> dict:
        return {"adds": self.adds, "muls": self.muls, "funcs": self.funcs, "divs": self.divs,
                "total": self.total}


def op_count(dag: ExprDag) -> OpCount:
    counts = {"add": 0, "mul": 0, "div": 0, "sin": 0, "cos": 0}
    for i in dag.reachable():
        op = dag.ops[i]
        if op in counts:
            counts[op] += 1
    return OpCount(counts["add"], counts["mul"], counts["sin"] + counts["cos"], counts["div"])


def emit_source(dag: ExprDag) -> str:
    """Straight-line listing, one assignment per live node."""
    sym = {"add": "+", "mul": "*", "div": "/"}
    lines = []
    for i in dag.reachable():
        op, a, v = dag.ops[i], dag.args[i], dag.vals[i]
        if op == "const":
            rhs = repr(v)
        elif op == "input":
            rhs = f"input[{v!r}]"
        elif op == "param":
            rhs = f"param[{v!r}]"
        elif op in sym:
            rhs = f"t{a[0]} {sym[op]} t{a[1]}"
        elif op == "neg":
            rhs = f"-t{a[0]}"
        else:
            rhs = f"{op}(t{a[0]})"
        lines.append(f"t{i} = {rhs}")
    for name, i in dag.outputs.items():
        lines.append(f"{name} = t{i}")
    return "\n".join(lines) + "\n"


# --- tracing ------------------------------------------------------------------------------

def _symbols(dag, prefix, n):
    return np.array([dag.expr(dag.input(f"{prefix}{i + 1}")) for i in range(n)], dtype=object)


def _param_slots(dag, model: MultibodyModel):
    from .dynamics import active_parameter_indices

    slots = np.zeros(model.n_slots, dtype=object)
    labels = model.slot_labels
    for i in active_parameter_indices(model):
        slots[i] = dag.expr(dag.param(labels[i]))
    return slots


def _coord_prefix(model):
    return "q" if model.is_closed_loop else "z"


def trace_idm(model: MultibodyModel) -> ExprDag:
    """Inverse dynamics ``tau = d(q, dq, ddq, phi)`` of the spanning tree.

    For closed loops this is the full-coordinate function; the projection onto
    independent coordinates stays numeric.
    """
    tree = kinematic_tree(model)
    dag = ExprDag()
    p = _coord_prefix(model)
    n = tree.n_q
    q, dq, ddq = _symbols(dag, p, n), _symbols(dag, "d" + p, n), _symbols(dag, "dd" + p, n)
    tau = rnea(tree, q, dq, ddq, _param_slots(dag, model), np.asarray(model.gravity, dtype=float))
    for i in range(n):
        dag.set_output(f"tau[{i}]", tau[i])
    return dag


def trace_ddm(model: MultibodyModel) -> ExprDag:
    """Joint ``[M | delta]`` outputs sharing sub-expressions."""
    tree = kinematic_tree(model)
    dag = ExprDag()
    p = _coord_prefix(model)
    n = tree.n_q
    q, dq = _symbols(dag, p, n), _symbols(dag, "d" + p, n)
    slots = _param_slots(dag, model)
    zero = np.zeros(n, dtype=object)
    zero[:] = 0.0
    delta = rnea(tree, q, dq, zero, slots, np.asarray(model.gravity, dtype=float))
    for i in range(n):
        dag.set_output(f"delta[{i}]", delta[i])
    for j in range(n):
        e = zero.copy()
        e[j] = 1.0
        col = rnea(tree, q, zero, e, slots, None)
        for i in range(n):
            dag.set_output(f"M[{i}][{j}]", col[i])
    return dag


def trace(model: MultibodyModel, kind: str) -> ExprDag:
    if kind == "idm":
        return trace_idm(model)
    if kind == "ddm":
        return trace_ddm(model)
    raise ValueError(f"unknown function kind {kind!r}")


class OpCounter:
    """Op counts of reduced models, reusing the simplified full-model DAGs."""

    def __init__(self, model: MultibodyModel):
        self.model = model
        self.full = {k: simplify(trace(model, k)) for k in ("idm", "ddm")}
        self._cache = {}

    def full_count(self, kind) -> OpCount:
        return op_count(self.full[kind])

    def count(self, kind, keep_labels) -> OpCount:
        key = (kind, frozenset(keep_labels))
        if key not in self._cache:
            self._cache[key] = op_count(eliminate_params(self.full[kind], keep_labels))
        return self._cache[key]
