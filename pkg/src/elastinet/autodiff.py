"""Reverse-mode expression graphs over float64 arrays.

A :class:`Tape` records nodes in creation order, which is always a valid
topological order. Node values are numpy arrays; a node over a batch of
collocation points holds one entry per point, and rows never interact, so
the derivative of ``sum(output)`` with respect to the input matrix is the
per-point input derivative.

Derivatives with respect to inputs are built *symbolically*: the reverse
sweep of :func:`input_derivative` appends ordinary nodes to the same tape.
A loss that contains such derivatives is therefore a plain graph, and one
numeric reverse sweep (:func:`parameter_gradient`) gives exact gradients
through the derivative-of-derivative paths.

Subgradient conventions at kinks: ``relu'(0) = 0``, ``sign' = 0``,
``|x|'(0) = 0``, ``sqrt'(0) = 0``, ``inv(0) = 0`` and at a tie
``max(a, b)`` splits the adjoint evenly between its operands.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class UnboundVariableError(AutodiffError, KeyError):
    def __init__(self, name: str):
        super().__init__(f"unbound variable {name!r}")
        self.name = name


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, node_id: int, op: str, detail: str = ""):
        msg = f"non-finite value at node {node_id} ({op})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.node_id = node_id
        self.op = op


def _arr(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _safe_inv(a: np.ndarray) -> np.ndarray:
    a = _arr(a)
    out = np.zeros_like(a)
    np.divide(1.0, a, out=out, where=a != 0)
    return out


def _embed(g, ref, j):
    out = np.zeros(np.shape(ref))
    out[..., j] = g
    return out


def _place(g, ref, i):
    out = np.zeros(np.shape(ref))
    out[i] = g
    return out


def _swap(a):
    return np.swapaxes(a, -1, -2)


class Node:
    __slots__ = ("tape", "id", "op", "args", "attr", "name")

    def __init__(self, tape: "Tape", nid: int, op: str, args: tuple, attr, name=None):
        self.tape = tape
        self.id = nid
        self.op = op
        self.args = args
        self.attr = attr
        self.name = name

    @property
    def value(self):
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple:
        v = self.value
        return () if v is None else np.shape(v)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.id}, {self.op}{label})"

    # arithmetic sugar; python numbers become constants on the same tape
    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            return mul(self, inv(other))
        return mul(self, self.tape.constant(1.0 / other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(frozen=True)
class _Op:
    forward: Callable
    # numeric vector-Jacobian product: (g, attr, out, *arg_values) -> tuple
    vjp: Callable
    # symbolic vector-Jacobian product: (g_node, node) -> tuple of Node|None
    svjp: Callable


_OPS: dict[str, _Op] = {}


def _register(name, forward, vjp, svjp):
    _OPS[name] = _Op(forward, vjp, svjp)


class Tape:
    """Ordered node store with a variable registry.

    Nodes get values eagerly when all their operands have values, so a tape
    can be used define-by-run; :func:`evaluate` recomputes everything from new
    variable bindings.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list = []
        self.variables: dict[str, Node] = {}
        self._consts: dict[float, Node] = {}
        self._plans: dict = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, op: str, args: tuple, attr=None, value=None, name=None) -> Node:
        node = Node(self, len(self.nodes), op, args, attr, name)
        if value is None and op not in ("variable", "constant"):
            vals = [self.values[a.id] for a in args]
            if all(v is not None for v in vals):
                with np.errstate(divide="raise", over="raise", invalid="raise"):
                    try:
                        value = _OPS[op].forward(attr, *vals)
                    except FloatingPointError as exc:
                        raise NonFiniteError(node.id, op, str(exc)) from None
        self.nodes.append(node)
        self.values.append(value)
        return node

    def variable(self, name: str, value=None) -> Node:
        if name in self.variables:
            raise AutodiffError(f"variable {name!r} already defined")
        node = self._push("variable", (), None, None if value is None else _arr(value), name)
        self.variables[name] = node
        return node

    def constant(self, value) -> Node:
        v = _arr(value)
        if v.ndim == 0:
            key = float(v)
            if key not in self._consts:
                self._consts[key] = self._push("constant", (), None, v)
            return self._consts[key]
        return self._push("constant", (), None, v)

    def one(self) -> Node:
        return self.constant(1.0)


def _tape_of(*nodes) -> Tape:
    for n in nodes:
        if isinstance(n, Node):
            return n.tape
    raise AutodiffError("no node operand")


def _same_tape(*nodes):
    tape = _tape_of(*nodes)
    for n in nodes:
        if isinstance(n, Node) and n.tape is not tape:
            raise AutodiffError("operands live on different tapes")
    return tape


def _lift(tape, x):
    return x if isinstance(x, Node) else tape.constant(x)


def _binary(op, a, b) -> Node:
    tape = _same_tape(a, b)
    return tape._push(op, (_lift(tape, a), _lift(tape, b)))


def _unary(op, a, attr=None) -> Node:
    return a.tape._push(op, (a,), attr)


def _maybe_sum_like(g: Node, operand: Node, node: Node) -> Node:
    # shapes are compared on the values present at graph-build time
    if operand.shape == node.shape:
        return g
    return sum_like(g, operand)


# --- builders -------------------------------------------------------------

def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def maximum(a, b):
    return _binary("max", a, b)


def neg(a):
    return _unary("neg", a)


def tanh(a):
    return _unary("tanh", a)


def relu(a):
    return _unary("relu", a)


def power(a, p: float):
    p = float(p)
    if p == 1.0:
        return a
    return _unary("power", a, p)


def sqrt(a):
    return _unary("sqrt", a)


def sign(a):
    return _unary("sign", a)


def absolute(a):
    return _unary("abs", a)


def inv(a):
    """``1/a`` with the convention ``inv(0) = 0``."""
    return _unary("inv", a)


def matmul(a, b):
    return _binary("matmul", a, b)


def transpose(a):
    if a.op == "transpose":
        return a.args[0]
    return _unary("transpose", a)


def column(a, j: int):
    return _unary("column", a, int(j))


def embed(g, ref, j: int):
    tape = _same_tape(g, ref)
    return tape._push("embed", (g, ref), int(j))


def select(a, i: int):
    """``a[i]`` along the leading axis."""
    return _unary("select", a, int(i))


def place(g, ref, i: int):
    """Zeros shaped like ``ref`` with ``g`` written at leading index ``i``."""
    tape = _same_tape(g, ref)
    return tape._push("place", (g, ref), int(i))


def tile(a, k: int):
    """``k`` stacked copies of ``a`` along a new leading axis."""
    return _unary("tile", a, int(k))


def total(a):
    return _unary("sum", a)


def mean(a):
    return _unary("mean", a)


def broadcast_like(a, ref):
    return _binary("broadcast_like", a, ref)


def spread(a, ref):
    return _binary("spread", a, ref)


def sum_like(a, ref):
    return _binary("sum_like", a, ref)


# --- op table -------------------------------------------------------------

def _svjp_add(g, n):
    a, b = n.args
    return _maybe_sum_like(g, a, n), _maybe_sum_like(g, b, n)


def _svjp_sub(g, n):
    a, b = n.args
    return _maybe_sum_like(g, a, n), _maybe_sum_like(neg(g), b, n)


def _svjp_mul(g, n):
    a, b = n.args
    return _maybe_sum_like(mul(g, b), a, n), _maybe_sum_like(mul(g, a), b, n)


def _svjp_max(g, n):
    a, b = n.args
    tape = n.tape
    half = tape.constant(0.5)
    d = sign(sub(a, b))
    wa = mul(half, add(tape.one(), d))
    wb = mul(half, sub(tape.one(), d))
    return _maybe_sum_like(mul(g, wa), a, n), _maybe_sum_like(mul(g, wb), b, n)


def _svjp_tanh(g, n):
    one = n.tape.one()
    return (mul(g, sub(one, mul(n, n))),)


def _svjp_power(g, n):
    (a,) = n.args
    p = n.attr
    return (mul(g, mul(n.tape.constant(p), power(a, p - 1.0))),)


def _svjp_sqrt(g, n):
    return (mul(g, mul(n.tape.constant(0.5), inv(n))),)


def _svjp_inv(g, n):
    return (neg(mul(g, mul(n, n))),)


def _svjp_matmul(g, n):
    a, b = n.args
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _svjp_spread(g, n):
    a, _ = n.args
    if a.shape != ():
        raise AutodiffError("symbolic derivative of spread needs a scalar operand")
    return mean(g), None


_register("variable", None, None, None)
_register("constant", None, None, None)
_register(
    "add",
    lambda _, a, b: a + b,
    lambda g, _, y, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))),
    _svjp_add,
)
_register(
    "sub",
    lambda _, a, b: a - b,
    lambda g, _, y, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(-g, np.shape(b))),
    _svjp_sub,
)
_register(
    "mul",
    lambda _, a, b: a * b,
    lambda g, _, y, a, b: (_unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))),
    _svjp_mul,
)
_register("neg", lambda _, a: -a, lambda g, _, y, a: (-g,), lambda g, n: (neg(g),))
_register("tanh", lambda _, a: np.tanh(a), lambda g, _, y, a: (g * (1.0 - y * y),), _svjp_tanh)
_register(
    "relu",
    lambda _, a: np.maximum(a, 0.0),
    lambda g, _, y, a: (g * (a > 0),),
    lambda g, n: (mul(g, relu(sign(n.args[0]))),),
)
_register(
    "power",
    lambda p, a: np.power(a, p),
    lambda g, p, y, a: (g * (p * np.power(a, p - 1.0)),),
    _svjp_power,
)
_register(
    "sqrt",
    lambda _, a: np.sqrt(a),
    lambda g, _, y, a: (g * (0.5 * _safe_inv(y)),),
    _svjp_sqrt,
)
_register("sign", lambda _, a: np.sign(a), lambda g, _, y, a: (None,), lambda g, n: (None,))
_register(
    "abs",
    lambda _, a: np.abs(a),
    lambda g, _, y, a: (g * np.sign(a),),
    lambda g, n: (mul(g, sign(n.args[0])),),
)
_register(
    "max",
    lambda _, a, b: np.maximum(a, b),
    lambda g, _, y, a, b: (
        _unbroadcast(g * (0.5 * (1.0 + np.sign(a - b))), np.shape(a)),
        _unbroadcast(g * (0.5 * (1.0 - np.sign(a - b))), np.shape(b)),
    ),
    _svjp_max,
)
_register("inv", lambda _, a: _safe_inv(a), lambda g, _, y, a: (-g * y * y,), _svjp_inv)
_register(
    "matmul",
    lambda _, a, b: a @ b,
    lambda g, _, y, a, b: (_unbroadcast(g @ _swap(b), np.shape(a)), _unbroadcast(_swap(a) @ g, np.shape(b))),
    _svjp_matmul,
)
_register(
    "transpose",
    lambda _, a: _swap(a),
    lambda g, _, y, a: (_swap(g),),
    lambda g, n: (transpose(g),),
)
_register(
    "column",
    lambda j, a: a[..., j],
    lambda g, j, y, a: (_embed(g, a, j),),
    lambda g, n: (embed(g, n.args[0], n.attr),),
)
_register(
    "embed",
    lambda j, g, ref: _embed(g, ref, j),
    lambda gg, j, y, g, ref: (gg[..., j], None),
    lambda gg, n: (column(gg, n.attr), None),
)
_register(
    "select",
    lambda i, a: a[i],
    lambda g, i, y, a: (_place(g, a, i),),
    lambda g, n: (place(g, n.args[0], n.attr),),
)
_register(
    "place",
    lambda i, g, ref: _place(g, ref, i),
    lambda gg, i, y, g, ref: (gg[i], None),
    lambda gg, n: (select(gg, n.attr), None),
)
_register(
    "tile",
    lambda k, a: np.broadcast_to(a, (k,) + np.shape(a)),
    lambda g, k, y, a: (np.sum(g, axis=0),),
    lambda g, n: (sum_like(g, n.args[0]),),
)
_register(
    "sum",
    lambda _, a: np.sum(a),
    lambda g, _, y, a: (np.broadcast_to(g, np.shape(a)),),
    lambda g, n: (broadcast_like(g, n.args[0]),),
)
_register(
    "mean",
    lambda _, a: np.mean(a),
    lambda g, _, y, a: (np.broadcast_to(g / np.size(a), np.shape(a)),),
    lambda g, n: (spread(g, n.args[0]),),
)
_register(
    "broadcast_like",
    lambda _, a, ref: np.broadcast_to(a, np.shape(ref)),
    lambda g, _, y, a, ref: (_unbroadcast(g, np.shape(a)), None),
    lambda g, n: (sum_like(g, n.args[0]), None),
)
_register(
    "spread",
    lambda _, a, ref: np.broadcast_to(a / np.size(ref), np.shape(ref)),
    lambda g, _, y, a, ref: (_unbroadcast(g, np.shape(a)) / np.size(ref), None),
    _svjp_spread,
)
_register(
    "sum_like",
    lambda _, a, ref: _unbroadcast(a, np.shape(ref)),
    lambda g, _, y, a, ref: (np.broadcast_to(g, np.shape(a)), None),
    lambda g, n: (broadcast_like(g, n.args[0]), None),
)

OP_KINDS = tuple(k for k in _OPS)


# --- graph queries ----------------------------------------------------------

def _ancestors(tape: Tape, roots: Sequence[Node]) -> np.ndarray:
    mark = np.zeros(len(tape.nodes), dtype=bool)
    for r in roots:
        mark[r.id] = True
    for node in reversed(tape.nodes[: max(r.id for r in roots) + 1]):
        if mark[node.id]:
            for a in node.args:
                mark[a.id] = True
    return mark


def _descendants(tape: Tape, sources: Sequence[Node], limit: int) -> np.ndarray:
    mark = np.zeros(len(tape.nodes), dtype=bool)
    for s in sources:
        mark[s.id] = True
    start = min(s.id for s in sources)
    for node in tape.nodes[start : limit + 1]:
        if not mark[node.id] and any(mark[a.id] for a in node.args):
            mark[node.id] = True
    return mark


# --- public operations ------------------------------------------------------

def evaluate(tape: Tape, bindings: Mapping[str, object] | None = None, outputs=None):
    """Recompute every node from ``bindings`` (falling back to stored values).

    Returns the values of ``outputs`` (a node, a sequence or a mapping of
    nodes) or ``None`` when no outputs are requested.
    """
    bindings = bindings or {}
    for name in bindings:
        if name not in tape.variables:
            raise UnboundVariableError(name)
    vals = tape.values
    for name, node in tape.variables.items():
        if name in bindings:
            v = _arr(bindings[name])
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(node.id, "variable", f"binding {name!r}")
            vals[node.id] = v
        elif vals[node.id] is None:
            raise UnboundVariableError(name)
    plan = tape._plans.get(("fwd", len(tape.nodes)))
    if plan is None:
        plan = [
            (n.id, _OPS[n.op].forward, n.attr, tuple(a.id for a in n.args))
            for n in tape.nodes
            if n.op not in ("variable", "constant")
        ]
        tape._plans = {k: v for k, v in tape._plans.items() if k[0] != "fwd"}
        tape._plans[("fwd", len(tape.nodes))] = plan
    nid = -1
    try:
        with np.errstate(divide="raise", over="raise", invalid="raise"):
            for nid, fn, attr, args in plan:
                if len(args) == 1:
                    vals[nid] = fn(attr, vals[args[0]])
                else:
                    vals[nid] = fn(attr, vals[args[0]], vals[args[1]])
    except FloatingPointError as exc:
        raise NonFiniteError(nid, tape.nodes[nid].op, str(exc)) from None
    return _collect(outputs)


def _collect(outputs):
    if outputs is None:
        return None
    if isinstance(outputs, Node):
        return outputs.value
    if isinstance(outputs, Mapping):
        return {k: v.value for k, v in outputs.items()}
    return [o.value for o in outputs]


def input_derivative(tape: Tape, output: Node, wrt: Node, bindings=None) -> Node:
    """Derivative of ``output`` with respect to the variable ``wrt``, as a graph.

    For batched nodes this is the gradient of ``sum(output)``, i.e. the
    per-point derivative when points do not interact. The returned node is
    an ordinary tape node and can be differentiated again.
    """
    if not isinstance(wrt, Node) or wrt.op != "variable":
        raise AutodiffError("wrt must be a variable node")
    return partial_derivative(tape, output, wrt, bindings)


def partial_derivative(tape: Tape, output: Node, wrt: Node, bindings=None) -> Node:
    """Like :func:`input_derivative`, but ``wrt`` may be an intermediate node.

    The intermediate node is treated as an independent input; stacked
    networks use this to get one input derivative per network from a tiled
    copy of the input.
    """
    if not isinstance(wrt, Node) or wrt.op == "constant":
        raise AutodiffError("wrt must be a variable or intermediate node")
    if output.tape is not tape or wrt.tape is not tape:
        raise AutodiffError("nodes do not belong to this tape")
    if bindings is not None:
        evaluate(tape, bindings)
    up = _ancestors(tape, [output])
    if not up[wrt.id]:
        raise AutodiffError(f"output node {output.id} does not depend on {wrt.name or wrt.id!r}")
    down = _descendants(tape, [wrt], output.id)
    active = up & down

    adj: dict[int, Node] = {output.id: broadcast_like(tape.one(), output)}
    for nid in range(output.id, wrt.id, -1):
        g = adj.pop(nid, None)
        if g is None or not active[nid]:
            continue
        node = tape.nodes[nid]
        contribs = _OPS[node.op].svjp(g, node)
        for arg, c in zip(node.args, contribs):
            if c is None or not active[arg.id]:
                continue
            prev = adj.get(arg.id)
            adj[arg.id] = c if prev is None else add(prev, c)
    return adj[wrt.id]


def _grad_plan(tape: Tape, loss: Node, params: tuple):
    key = ("bwd", loss.id, params, len(tape.nodes))
    plan = tape._plans.get(key)
    if plan is not None:
        return plan
    pnodes = [tape.variables[p] for p in params]
    up = _ancestors(tape, [loss])
    down = _descendants(tape, pnodes, loss.id)
    active = up & down
    steps = []
    for nid in range(loss.id, -1, -1):
        node = tape.nodes[nid]
        if not active[nid] or node.op == "variable":
            continue
        mask = tuple(bool(active[a.id]) for a in node.args)
        steps.append((nid, _OPS[node.op].vjp, node.attr, tuple(a.id for a in node.args), mask))
    tape._plans[key] = steps
    return steps


def parameter_gradient(tape: Tape, loss: Node, params: Sequence[str], bindings=None) -> dict:
    """Gradient of the scalar ``loss`` with respect to each named variable."""
    if bindings is not None:
        evaluate(tape, bindings)
    if loss.value is None:
        raise AutodiffError("loss has no value; evaluate the tape first")
    if np.shape(loss.value) != ():
        raise AutodiffError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    for p in params:
        if p not in tape.variables:
            raise UnboundVariableError(p)
    params = tuple(params)
    vals = tape.values
    adj: dict[int, np.ndarray] = {loss.id: np.float64(1.0)}
    try:
        with np.errstate(divide="raise", over="raise", invalid="raise"):
            for nid, vjp, attr, args, mask in _grad_plan(tape, loss, params):
                g = adj.pop(nid, None)
                if g is None:
                    continue
                contribs = vjp(g, attr, vals[nid], *[vals[a] for a in args])
                for aid, use, c in zip(args, mask, contribs):
                    if not use or c is None:
                        continue
                    prev = adj.get(aid)
                    adj[aid] = c if prev is None else prev + c
    except FloatingPointError as exc:
        raise NonFiniteError(nid, tape.nodes[nid].op, f"reverse sweep: {exc}") from None
    out = {}
    for p in params:
        node = tape.variables[p]
        g = adj.get(node.id)
        out[p] = np.zeros(np.shape(vals[node.id])) if g is None else np.array(g, dtype=np.float64).reshape(np.shape(vals[node.id]))
    return out
