"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written in terms of the same differentiable ops used in
the forward pass, so ``grad(..., as_graph=True)`` returns tensors that are
themselves graph nodes and can be differentiated again. This is what lets an
outer meta-gradient flow through unrolled inner-loop parameter updates.

Node identity is a monotone integer, so creation order is a valid topological
order for every graph built here.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "TensorError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "GradError",
    "forward_op",
    "grad",
    "leaf",
    "const",
    "concat",
    "stack_rows",
    "finite_diff_check",
    "OP_KINDS",
]

_node_ids = itertools.count()
_graph_stack: list["Graph"] = []


class TensorError(Exception):
    """Base class for errors raised by the tensor engine."""


class ShapeError(TensorError, ValueError):
    def __init__(self, kind: str, shapes: Sequence[tuple], detail: str = ""):
        self.kind = kind
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{kind}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class GradError(TensorError, ValueError):
    pass


class Tensor:
    """Dense float64 array that may be a node of a computation graph.

    Constants carry ``node_id = None``. Leaves created with ``requires_grad``
    and outputs of ops with at least one node input get a fresh id.
    """

    __slots__ = ("value", "node_id", "op", "inputs", "meta")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.array(value, dtype=np.float64)
        self.node_id = next(_node_ids) if requires_grad else None
        self.op = None
        self.inputs: tuple = ()
        self.meta: dict = {}

    @classmethod
    def _wrap(cls, value: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.value = value
        t.node_id = None
        t.op = None
        t.inputs = ()
        t.meta = {}
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.value)

    def __repr__(self) -> str:
        tag = f"node={self.node_id}" if self.node_id is not None else "const"
        return f"Tensor(shape={self.shape}, {tag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.value)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return forward_op("add", [self, other])

    def __radd__(self, other):
        return forward_op("add", [other, self])

    def __sub__(self, other):
        return forward_op("subtract", [self, other])

    def __rsub__(self, other):
        return forward_op("subtract", [other, self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return forward_op("scale", [self], factor=float(other))
        return forward_op("multiply", [self, other])

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return forward_op("scale", [self], factor=float(other))
        return forward_op("multiply", [other, self])

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return forward_op("scale", [self], factor=1.0 / float(other))
        return forward_op("divide", [self, other])

    def __rtruediv__(self, other):
        return forward_op("divide", [other, self])

    def __neg__(self):
        return forward_op("scale", [self], factor=-1.0)

    def __pow__(self, power: float):
        return forward_op("power", [self], exponent=float(power))

    def __matmul__(self, other):
        return forward_op("matmul", [self, other])

    def __getitem__(self, key):
        return forward_op("getitem", [self], key=key)

    @property
    def T(self):
        return forward_op("transpose", [self])

    def sum(self, axis=None, keepdims=False):
        return forward_op("reduce_sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return forward_op("reduce_mean", [self], axis=axis, keepdims=keepdims)

    def var(self, axis=None, keepdims=False):
        return forward_op("reduce_var", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", [self], shape=tuple(shape))

    def broadcast_to(self, shape):
        return forward_op("broadcast", [self], shape=tuple(shape))

    def relu(self):
        return forward_op("relu", [self])

    def exp(self):
        return forward_op("exp", [self])

    def log(self):
        return forward_op("log", [self])

    def sigmoid(self):
        return forward_op("sigmoid", [self])

    def softplus(self):
        return forward_op("softplus", [self])

    def softmax(self, axis=-1):
        return forward_op("softmax", [self], axis=axis)

    def log_softmax(self, axis=-1):
        return forward_op("log_softmax", [self], axis=axis)

    def cross_entropy(self, labels):
        return forward_op("cross_entropy", [self], labels=np.asarray(labels, dtype=np.int64))

    def gather_rows(self, index):
        return forward_op("gather_rows", [self], index=np.asarray(index, dtype=np.int64))


def leaf(value) -> Tensor:
    """A differentiable input (graph leaf)."""
    return Tensor(value, requires_grad=True)


def const(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# graph records and replay


@dataclass
class OpRecord:
    kind: str
    input_ids: tuple
    output_id: int
    meta: dict
    inputs: tuple = field(repr=False)
    output: Tensor = field(repr=False)


class Graph:
    """Ordered log of op applications, usable as a recording context.

    >>> with Graph() as g:
    ...     y = (leaf([1.0, 2.0]) * 3.0).sum()
    >>> len(g.records)
    2
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def node_ids(self) -> set:
        ids = set()
        for rec in self.records:
            ids.add(rec.output_id)
            ids.update(i for i in rec.input_ids if i is not None)
        return ids

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from its leaves, in record order."""
        fresh: dict[int, np.ndarray] = {}
        out = []
        for rec in self.records:
            vals = []
            for t in rec.inputs:
                if t.node_id is not None and t.node_id in fresh:
                    vals.append(fresh[t.node_id])
                else:
                    vals.append(t.value)
            v = _OPS[rec.kind].forward(*vals, **rec.meta)
            if rec.output_id is not None:
                fresh[rec.output_id] = v
            out.append(v)
        return out


# ---------------------------------------------------------------------------
# op table


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    vjp: Callable
    check: Callable | None = None


_OPS: dict[str, OpDef] = {}


def _register(kind, forward, vjp, check=None):
    _OPS[kind] = OpDef(forward, vjp, check)


def forward_op(kind: str, inputs: Sequence, graph: Graph | None = None, **meta) -> Tensor:
    """Apply op ``kind`` eagerly and link the result into the graph."""
    try:
        op = _OPS[kind]
    except KeyError:
        raise TensorError(f"unknown op kind {kind!r}") from None
    ins = tuple(x if isinstance(x, Tensor) else _as_tensor(x) for x in inputs)
    vals = [t.value for t in ins]
    if op.check is not None:
        op.check(kind, vals, meta)
    try:
        value = op.forward(*vals, **meta)
    except ValueError as exc:
        raise ShapeError(kind, [v.shape for v in vals], str(exc)) from None
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{kind}: produced non-finite values")
    out = Tensor._wrap(value)
    for t in ins:
        if t.node_id is not None:
            out.node_id = next(_node_ids)
            out.op = kind
            out.inputs = ins
            out.meta = meta
            break
    target = graph if graph is not None else (_graph_stack[-1] if _graph_stack else None)
    if target is not None:
        target.records.append(
            OpRecord(kind, tuple(t.node_id for t in ins), out.node_id, meta, ins, out)
        )
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    return forward_op("sum_to", [g], shape=shape)


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _keep_shape(in_shape, axis):
    axes = _norm_axes(axis, len(in_shape))
    return tuple(1 if i in axes else s for i, s in enumerate(in_shape))


def _count(in_shape, axis):
    axes = _norm_axes(axis, len(in_shape))
    n = 1
    for a in axes:
        n *= in_shape[a]
    return n


# elementwise arithmetic
_register(
    "add",
    lambda a, b: a + b,
    lambda g, ins, out: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
)
_register(
    "subtract",
    lambda a, b: a - b,
    lambda g, ins, out: (_unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)),
)
_register(
    "multiply",
    lambda a, b: a * b,
    lambda g, ins, out: (
        _unbroadcast(g * ins[1], ins[0].shape),
        _unbroadcast(g * ins[0], ins[1].shape),
    ),
)
_register(
    "divide",
    lambda a, b: a / b,
    lambda g, ins, out: (
        _unbroadcast(g / ins[1], ins[0].shape),
        _unbroadcast(-(g * out) / ins[1], ins[1].shape),
    ),
)
_register(
    "scale",
    lambda a, factor: a * factor,
    lambda g, ins, out, factor: (g * factor,),
)
_register(
    "power",
    lambda a, exponent: np.power(a, exponent),
    lambda g, ins, out, exponent: (g * (ins[0] ** (exponent - 1.0)) * exponent,),
)


def _matmul_check(kind, vals, meta):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(kind, [a.shape, b.shape], "expected (n,k) @ (k,m)")


_register(
    "matmul",
    lambda a, b: a @ b,
    lambda g, ins, out: (g @ ins[1].T, ins[0].T @ g),
    _matmul_check,
)


def _transpose_check(kind, vals, meta):
    if vals[0].ndim != 2:
        raise ShapeError(kind, [vals[0].shape], "expected a matrix")


_register(
    "transpose",
    lambda a: a.T,
    lambda g, ins, out: (g.T,),
    _transpose_check,
)

# pointwise nonlinearities
_register(
    "relu",
    lambda a: np.maximum(a, 0.0),
    # subgradient at exactly 0 is 0
    lambda g, ins, out: (g * Tensor._wrap((ins[0].value > 0).astype(np.float64)),),
)
_register("exp", np.exp, lambda g, ins, out: (g * out,))


def _log_check(kind, vals, meta):
    if np.any(vals[0] <= 0):
        raise DomainError(f"{kind}: non-positive input (min {vals[0].min()!r})")


_register("log", np.log, lambda g, ins, out: (g / ins[0],), _log_check)


def _sigmoid(a):
    return np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))), np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))


_register("sigmoid", _sigmoid, lambda g, ins, out: (g * out * (1.0 - out),))
_register(
    "softplus",
    lambda a: np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a))),
    lambda g, ins, out: (g * ins[0].sigmoid(),),
)


def _softmax(a, axis):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(a, axis):
    shifted = a - a.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


_register(
    "softmax",
    _softmax,
    lambda g, ins, out, axis: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
)
_register(
    "log_softmax",
    _log_softmax,
    lambda g, ins, out, axis: (g - ins[0].softmax(axis) * g.sum(axis=axis, keepdims=True),),
)


def _cross_entropy(a, labels):
    return -_log_softmax(a, 1)[np.arange(len(labels)), labels]


def _cross_entropy_vjp(g, ins, out, labels):
    onehot = Tensor._wrap(np.eye(ins[0].shape[1])[labels])
    return (g.reshape(len(labels), 1) * (ins[0].softmax(1) - onehot),)


def _cross_entropy_check(kind, vals, meta):
    a, labels = vals[0], meta["labels"]
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise ShapeError(kind, [a.shape, labels.shape], "expected (n, C) logits and n labels")
    if labels.size and (labels.min() < 0 or labels.max() >= a.shape[1]):
        raise ShapeError(kind, [a.shape, labels.shape], "label out of range")


# per-row negative log-softmax picked at the integer label
_register("cross_entropy", _cross_entropy, _cross_entropy_vjp, _cross_entropy_check)


# reductions
def _reduce_vjp_expand(g: Tensor, in_shape, axis, keepdims) -> Tensor:
    if not keepdims:
        g = g.reshape(_keep_shape(in_shape, axis))
    return g.broadcast_to(in_shape)


_register(
    "reduce_sum",
    lambda a, axis, keepdims: a.sum(axis=axis, keepdims=keepdims),
    lambda g, ins, out, axis, keepdims: (_reduce_vjp_expand(g, ins[0].shape, axis, keepdims),),
)
_register(
    "reduce_mean",
    lambda a, axis, keepdims: a.mean(axis=axis, keepdims=keepdims),
    lambda g, ins, out, axis, keepdims: (
        _reduce_vjp_expand(g, ins[0].shape, axis, keepdims) * (1.0 / _count(ins[0].shape, axis)),
    ),
)


def _var_vjp(g, ins, out, axis, keepdims):
    x = ins[0]
    n = _count(x.shape, axis)
    dev = x - x.mean(axis=axis, keepdims=True)
    return (_reduce_vjp_expand(g, x.shape, axis, keepdims) * dev * (2.0 / n),)


# population variance: divides by N, so a single element gives exactly 0
_register("reduce_var", lambda a, axis, keepdims: a.var(axis=axis, keepdims=keepdims), _var_vjp)


def _broadcast_to_check(kind, vals, meta):
    try:
        np.broadcast_to(vals[0], meta["shape"])
    except ValueError:
        raise ShapeError(kind, [vals[0].shape, meta["shape"]]) from None


_register(
    "broadcast",
    lambda a, shape: np.broadcast_to(a, shape).copy(),
    lambda g, ins, out, shape: (_unbroadcast(g, ins[0].shape),),
    _broadcast_to_check,
)
_register(
    "sum_to",
    _sum_to,
    lambda g, ins, out, shape: (g.broadcast_to(ins[0].shape),),
)


def _reshape_check(kind, vals, meta):
    if int(np.prod(meta["shape"], dtype=np.int64)) != vals[0].size:
        raise ShapeError(kind, [vals[0].shape, meta["shape"]])


_register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda g, ins, out, shape: (g.reshape(ins[0].shape),),
    _reshape_check,
)


# indexing
def _gather_check(kind, vals, meta):
    a, idx = vals[0], meta["index"]
    if a.ndim < 1 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
        raise ShapeError(kind, [a.shape, idx.shape], "row index out of range")


def _scatter_rows(a, index, n_rows):
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, index, a)
    return out


_register(
    "gather_rows",
    lambda a, index: a[index],
    lambda g, ins, out, index: (
        forward_op("scatter_rows", [g], index=index, n_rows=ins[0].shape[0]),
    ),
    _gather_check,
)
_register(
    "scatter_rows",
    _scatter_rows,
    lambda g, ins, out, index, n_rows: (g.gather_rows(index),),
)


def _getitem_check(kind, vals, meta):
    try:
        vals[0][meta["key"]]
    except (IndexError, TypeError) as exc:
        raise ShapeError(kind, [vals[0].shape], str(exc)) from None


def _index_put(a, key, shape):
    out = np.zeros(shape)
    out[key] = a
    return out


_register(
    "getitem",
    lambda a, key: np.array(a[key], dtype=np.float64),
    lambda g, ins, out, key: (forward_op("index_put", [g], key=key, shape=ins[0].shape),),
    _getitem_check,
)
_register(
    "index_put",
    _index_put,
    lambda g, ins, out, key, shape: (g[key],),
)


def _concat_check(kind, vals, meta):
    axis = meta["axis"]
    try:
        np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(kind, [v.shape for v in vals]) from None


def _concat_vjp(g, ins, out, axis):
    grads = []
    start = 0
    ax = axis % g.ndim
    for t in ins:
        stop = start + t.shape[ax]
        key = tuple(slice(start, stop) if i == ax else slice(None) for i in range(g.ndim))
        grads.append(g[key])
        start = stop
    return tuple(grads)


_register("concatenate", lambda *a, axis: np.concatenate(a, axis=axis), _concat_vjp, _concat_check)

OP_KINDS = tuple(sorted(_OPS))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return forward_op("concatenate", list(tensors), axis=axis)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    rows = [_as_tensor(t) for t in tensors]
    return concat([r.reshape(1, r.size) for r in rows], axis=0)


# ---------------------------------------------------------------------------
# reverse pass


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    as_graph: bool = False,
    graph: Graph | None = None,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``as_graph`` the returned tensors are graph nodes wired to the forward
    computation, so they can be differentiated again. Otherwise the reverse
    pass runs on detached values and returns constants.

    Inputs that ``output`` does not depend on receive zeros.
    """
    if output.size != 1:
        raise GradError(f"output must be scalar, got shape {output.shape}")
    for w in wrt:
        if not isinstance(w, Tensor) or w.node_id is None:
            raise GradError("every wrt tensor must be a graph node (constants have no gradient)")
        if graph is not None and w.node_id not in graph.node_ids():
            raise GradError(f"tensor node {w.node_id} is not part of the given graph")
    wanted = {w.node_id for w in wrt}
    found: dict[int, Tensor] = {}
    if output.node_id is None:
        return [Tensor._wrap(np.zeros(w.shape)) for w in wrt]

    nodes: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        for p in t.inputs:
            if p.node_id is not None and p.node_id not in nodes:
                stack.append(p)

    adjoint: dict[int, Tensor] = {output.node_id: Tensor._wrap(np.ones(output.shape))}
    for nid in sorted(nodes, reverse=True):
        g = adjoint.pop(nid, None)
        if g is None:
            continue
        if nid in wanted:
            found[nid] = g
        node = nodes[nid]
        if node.op is None:
            continue
        if as_graph:
            ins, out = node.inputs, node
        else:
            ins = tuple(Tensor._wrap(t.value) for t in node.inputs)
            out = Tensor._wrap(node.value)
        contribs = _OPS[node.op].vjp(g, ins, out, **node.meta)
        for src, gi in zip(node.inputs, contribs):
            if src.node_id is None or gi is None:
                continue
            prev = adjoint.get(src.node_id)
            adjoint[src.node_id] = gi if prev is None else prev + gi
    return [found.get(w.node_id, Tensor._wrap(np.zeros(w.shape))) for w in wrt]


def finite_diff_check(
    fn: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max relative error between ``grad`` and central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step!r}")
    base = [np.array(p, dtype=np.float64) for p in params]
    leaves = [leaf(p) for p in base]
    out = fn(leaves)
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("function value is not finite")
    analytic = [g.value for g in grad(out, leaves)]

    def evaluate(vals):
        y = fn([const(v) for v in vals]).item()
        if not np.isfinite(y):
            raise NonFiniteError("function value is not finite")
        return y

    worst = 0.0
    for i, p in enumerate(base):
        for j in np.ndindex(p.shape):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[i][j] += step
            minus[i][j] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
            a = analytic[i][j]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
