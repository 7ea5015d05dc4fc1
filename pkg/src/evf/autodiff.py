"""
Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Graph` records operations eagerly: each call computes its value and appends a
:class:`Node` (op kind, input node ids, attributes, value) in topological order. The
recorded graph can be re-executed with rebound leaves (`Graph.forward`), possibly at
another precision, and differentiated (`Graph.backward`).

The module also holds the stochastic-layer primitives (reparameterization, diagonal
Gaussian KL), the parameter store, Adam, and the `EVFP` checkpoint format.
"""

import io
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple

import numpy as np
from construct import (
    Array,
    Bytes,
    Const,
    ConstructError,
    Int8ul,
    Int16ul,
    Int32ul,
    PascalString,
    Struct,
    this,
)
from scipy.special import expit

from .utils import atomic_write

logger = logging.getLogger("evf.autodiff")
logger.addHandler(logging.NullHandler())

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

LEAF_KINDS = ("param", "input", "constant")


class AutodiffError(ValueError):
    """Base error of the autodiff module."""


class ShapeError(AutodiffError):
    """Operand shapes do not fit the operation."""


class NonFiniteError(AutodiffError):
    """A value or gradient became NaN or infinite."""


class CheckpointFormatError(AutodiffError):
    """Malformed checkpoint file. `offset` is the byte offset of the bad record."""

    def __init__(self, message, offset):
        super().__init__("%s (at byte offset %d)" % (message, offset))
        self.offset = offset


class _Op(NamedTuple):
    forward: Callable
    vjp: Callable


_OPS = {}


def defop(name, forward, vjp):
    """
    Register a primitive.

    `forward(*values, **attrs)` returns the output value, `vjp(g, out, *values, **attrs)`
    returns one gradient per input (None for inputs that get no gradient).
    """
    _OPS[name] = _Op(forward, vjp)


def _broadcast_shape(a, b):
    # equal shapes, a scalar, or a trailing-suffix bias
    if a == b:
        return a
    if len(a) == 0 or len(b) == 0:
        return a if len(a) > len(b) else b
    if len(a) > len(b) and a[-len(b):] == b:
        return a
    if len(b) > len(a) and b[-len(a):] == a:
        return b
    raise ShapeError("cannot broadcast shapes %s and %s" % (a, b))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _elementwise(fn):
    def forward(a, b):
        _broadcast_shape(a.shape, b.shape)
        return fn(a, b)

    return forward


defop(
    "add",
    _elementwise(np.add),
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
)
defop(
    "sub",
    _elementwise(np.subtract),
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
)
defop(
    "mul",
    _elementwise(np.multiply),
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
)


def _matmul(a, b):
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul of %s by %s" % (a.shape, b.shape))
    return a @ b


def _matmul_vjp(g, out, a, b):
    ga = g @ b.T
    gb = np.outer(a, g) if a.ndim == 1 else a.T @ g
    return ga, gb


defop("matmul", _matmul, _matmul_vjp)


def _concat(*values):
    lead = {v.shape[:-1] for v in values}
    if len(lead) != 1:
        raise ShapeError("concat of %s" % [v.shape for v in values])
    return np.concatenate(values, axis=-1)


def _concat_vjp(g, out, *values):
    bounds = np.cumsum([v.shape[-1] for v in values])[:-1]
    return tuple(np.split(g, bounds, axis=-1))


defop("concat", _concat, _concat_vjp)


def _slice(x, start, stop):
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError("slice [%d:%d] of last axis %d" % (start, stop, x.shape[-1]))
    return x[..., start:stop]


def _slice_vjp(g, out, x, start, stop):
    gx = np.zeros_like(x)
    gx[..., start:stop] = g
    return (gx,)


defop("slice", _slice, _slice_vjp)

defop("sigmoid", expit, lambda g, out, x: (g * out * (1 - out),))
defop("tanh", np.tanh, lambda g, out, x: (g * (1 - out * out),))
defop("relu", lambda x: np.maximum(x, 0), lambda g, out, x: (g * (x > 0),))
defop("softplus", lambda x: np.logaddexp(0, x), lambda g, out, x: (g * expit(x),))
defop("exp", np.exp, lambda g, out, x: (g * out,))
defop("log", np.log, lambda g, out, x: (g / x,))
defop("square", np.square, lambda g, out, x: (2 * g * x,))
defop("scale", lambda x, k: x * k, lambda g, out, x, k: (g * k,))
defop(
    "clip",
    lambda x, lo, hi: np.clip(x, lo, hi),
    lambda g, out, x, lo, hi: (g * ((x >= lo) & (x <= hi)),),
)


def _expand(g, x, axis):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


defop(
    "sum",
    lambda x, axis: np.sum(x, axis=axis),
    lambda g, out, x, axis: (_expand(g, x, axis),),
)
def _mean(x, axis):
    # sorted, accumulated in float64: independent of the order of the elements
    return np.mean(np.sort(x, axis=axis), axis=axis, dtype=np.float64)


defop(
    "mean",
    _mean,
    lambda g, out, x, axis: (_expand(g, x, axis) * (out.size / x.size),),
)


def _stack(*values):
    if len({v.shape for v in values}) != 1:
        raise ShapeError("stack of %s" % [v.shape for v in values])
    return np.stack(values)


defop("stack", _stack, lambda g, out, *values: tuple(g[i] for i in range(len(values))))


def _broadcast(x, shape):
    try:
        _broadcast_shape(tuple(shape), x.shape)
    except ShapeError:
        raise ShapeError("cannot broadcast %s to %s" % (x.shape, tuple(shape))) from None
    return np.broadcast_to(x, shape).copy()


defop("broadcast", _broadcast, lambda g, out, x, shape: (_unbroadcast(g, x.shape),))


@dataclass(eq=False)
class Node:
    """One recorded value. Leaves have `op` in `LEAF_KINDS`."""

    # let `ndarray <op> Node` dispatch to the reflected Node operators
    __array_ufunc__ = None

    graph: "Graph" = field(repr=False)
    id: int
    op: str
    inputs: tuple
    attrs: dict
    value: np.ndarray = field(repr=False)
    name: str = None
    source: Any = field(default=None, repr=False)

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.op in LEAF_KINDS

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.scale(self, -1.0)


class Graph:
    """
    Eager tape of operations over numpy arrays.

    Parameters
    ----------
    dtype: numpy dtype
        precision of values, float32 by default (float64 for test oracles).

    Examples
    --------
    >>> g = Graph()
    >>> w = g.param("w", [1.0, 2.0])
    >>> loss = g.sum(g.square(w))
    >>> g.backward(loss)["w"]
    array([2., 4.], dtype=float32)
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self._named = {}
        self._outputs = {}

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return "<Graph: %d nodes, %d named leaves, %s>" % (
            len(self.nodes), len(self._named), self.dtype)

    # leaves

    def _leaf(self, kind, value, name=None):
        if name is not None and (name in self._named or name in self._outputs):
            raise AutodiffError("duplicate leaf name '%s'" % name)
        nid = len(self.nodes)
        array = self._cast(value, nid, kind)
        node = Node(self, nid, kind, (), {}, array, name=name, source=value)
        self.nodes.append(node)
        if name is not None:
            self._named[name] = nid
        return node

    def param(self, name, value):
        """trainable leaf, differentiated by `backward`"""
        return self._leaf("param", value, name)

    def input(self, name, value):
        """named non-trainable leaf, rebindable through `forward(inputs=...)`"""
        return self._leaf("input", value, name)

    def constant(self, value):
        return self._leaf("constant", value)

    def leaf(self, name):
        try:
            return self.nodes[self._named[name]]
        except KeyError:
            raise AutodiffError("no leaf named '%s'" % name) from None

    def params(self):
        return {n.name: n for n in self.nodes if n.op == "param"}

    def mark(self, name, node):
        """name an output node so `forward` returns its value"""
        if name in self._named:
            raise AutodiffError("output name '%s' already names a leaf" % name)
        self._outputs[name] = node.id
        return node

    def _cast(self, value, nid, op):
        array = np.asarray(value, dtype=self.dtype)
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("node %d (%s) has non-finite values" % (nid, op))
        return array

    def _as_node(self, x):
        if isinstance(x, Node):
            if x.graph is not self:
                raise AutodiffError("node %d belongs to another graph" % x.id)
            return x
        return self.constant(x)

    # operations

    def _execute(self, nid, op, values, attrs):
        try:
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                out = _OPS[op].forward(*values, **attrs)
        except ShapeError as e:
            raise ShapeError("node %d (%s): %s" % (nid, op, e)) from None
        out = np.asarray(out, dtype=self.dtype)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("node %d (%s) produced non-finite values" % (nid, op))
        return out

    def apply(self, op, *inputs, **attrs):
        """record `op` on `inputs` and return the new node"""
        if op not in _OPS:
            raise AutodiffError("unknown op '%s'" % op)
        inputs = [self._as_node(x) for x in inputs]
        nid = len(self.nodes)
        value = self._execute(nid, op, [x.value for x in inputs], attrs)
        node = Node(self, nid, op, tuple(x.id for x in inputs), attrs, value)
        self.nodes.append(node)
        return node

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def concat(self, *xs):
        """concatenate along the last axis"""
        return self.apply("concat", *xs)

    def stack(self, *xs):
        """stack equally shaped nodes along a new first axis"""
        return self.apply("stack", *xs)

    def slice(self, x, start, stop):
        """`x[..., start:stop]`"""
        return self.apply("slice", x, start=int(start), stop=int(stop))

    def sigmoid(self, x):
        return self.apply("sigmoid", x)

    def tanh(self, x):
        return self.apply("tanh", x)

    def relu(self, x):
        return self.apply("relu", x)

    def softplus(self, x):
        return self.apply("softplus", x)

    def exp(self, x):
        return self.apply("exp", x)

    def log(self, x):
        return self.apply("log", x)

    def square(self, x):
        return self.apply("square", x)

    def scale(self, x, k):
        return self.apply("scale", x, k=float(k))

    def clip(self, x, lo, hi):
        return self.apply("clip", x, lo=float(lo), hi=float(hi))

    def sum(self, x, axis=None):
        return self.apply("sum", x, axis=axis)

    def mean(self, x, axis=None):
        return self.apply("mean", x, axis=axis)

    def broadcast(self, x, shape):
        return self.apply("broadcast", x, shape=tuple(int(s) for s in shape))

    def dense(self, x, w, b):
        return self.matmul(x, w) + b

    # passes

    def forward(self, inputs=None, dtype=None):
        """
        Re-execute every node.

        Parameters
        ----------
        inputs: dict or None
            `{leaf name: array}` values for this pass; other leaves keep their recorded
            source value.
        dtype: numpy dtype or None
            new precision of the graph (kept for later passes).

        Returns
        -------
        dict
            `{name: value}` for every named leaf and marked output.
        """
        inputs = inputs or {}
        unknown = set(inputs) - set(self._named)
        if unknown:
            raise AutodiffError("unknown leaves: %s" % sorted(unknown))
        if dtype is not None:
            self.dtype = np.dtype(dtype)
        for node in self.nodes:
            if node.is_leaf:
                source = inputs.get(node.name, node.source) if node.name else node.source
                value = self._cast(source, node.id, node.op)
                if value.shape != node.value.shape:
                    raise ShapeError(
                        "node %d (%s '%s'): rebound shape %s, recorded %s" % (
                            node.id, node.op, node.name, value.shape, node.value.shape))
                node.value = value
            else:
                values = [self.nodes[i].value for i in node.inputs]
                node.value = self._execute(node.id, node.op, values, node.attrs)
        names = dict(self._named, **self._outputs)
        return {name: self.nodes[i].value for name, i in names.items()}

    def backward(self, loss):
        """
        Reverse pass from a scalar `loss` node.

        Returns
        -------
        dict
            `{name: gradient}` for every param and input leaf. Leaves the loss does not
            depend on get zero gradients.
        """
        if loss.graph is not self:
            raise AutodiffError("loss node belongs to another graph")
        if loss.value.ndim != 0:
            raise ShapeError(
                "backward needs a scalar loss, node %d (%s) has shape %s" % (
                    loss.id, loss.op, loss.value.shape))
        grads = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.is_leaf or node.id not in grads:
                continue
            g = grads.pop(node.id)
            values = [self.nodes[i].value for i in node.inputs]
            input_grads = _OPS[node.op].vjp(g, node.value, *values, **node.attrs)
            for i, gi in zip(node.inputs, input_grads):
                if gi is None:
                    continue
                gi = np.asarray(gi, dtype=self.dtype)
                grads[i] = grads[i] + gi if i in grads else gi
        result = {}
        for name, i in self._named.items():
            node = self.nodes[i]
            if node.op == "constant":
                continue
            g = grads.get(i)
            result[name] = np.zeros_like(node.value) if g is None else np.array(g)
            if not np.all(np.isfinite(result[name])):
                raise NonFiniteError("gradient of '%s' is not finite" % name)
        return result


def finite_difference_gradient(graph, leaf, h=1e-3, loss=None, indices=None):
    """
    Central-difference gradient of `loss` wrt one named leaf, evaluated in float64.

    Parameters
    ----------
    graph: Graph
    leaf: str or Node
        named param or input leaf.
    h: float
        step, > 0.
    loss: Node or None
        scalar node, the last recorded node if None.
    indices: iterable of int or None
        flat components to estimate, all if None (others are left at 0).

    Returns
    -------
    numpy.ndarray
        float64 array of the leaf shape.
    """
    if h <= 0:
        raise ValueError("finite difference step must be > 0, got %r" % h)
    node = leaf if isinstance(leaf, Node) else graph.leaf(leaf)
    if node.name is None:
        raise AutodiffError("node %d is not a named leaf" % node.id)
    loss = graph.nodes[-1] if loss is None else loss
    x = np.array(node.source, dtype=np.float64)
    grad = np.zeros(x.shape, dtype=np.float64)
    indices = range(x.size) if indices is None else indices
    previous = graph.dtype
    try:
        for i in indices:
            shifted = []
            for sign in (1.0, -1.0):
                xs = x.copy()
                xs.flat[i] += sign * h
                graph.forward({node.name: xs}, dtype=np.float64)
                shifted.append(float(loss.value))
            grad.flat[i] = (shifted[0] - shifted[1]) / (2 * h)
    finally:
        graph.forward(dtype=previous)
    return grad


@dataclass
class GaussianParams:
    """Diagonal Gaussian given by graph nodes `mean` and `log_var`."""

    mean: Node
    log_var: Node

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(
                "mean shape %s != log_var shape %s" % (self.mean.shape, self.log_var.shape))

    @classmethod
    def from_heads(cls, mean, raw_log_var):
        """clamp `raw_log_var` to [LOG_VAR_MIN, LOG_VAR_MAX]"""
        graph = mean.graph
        return cls(mean, graph.clip(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    @classmethod
    def standard(cls, graph, shape):
        """N(0, I) of the given shape, as constants"""
        return cls(graph.constant(np.zeros(shape)), graph.constant(np.zeros(shape)))

    @property
    def shape(self):
        return self.mean.shape

    def numpy(self):
        return self.mean.value.copy(), self.log_var.value.copy()


def reparameterize(q, noise):
    """
    Sample `mean + exp(0.5 * log_var) * noise`, differentiable wrt `q`.

    `noise` (array or node) is a standard normal draw of the shape of `q.mean`.
    """
    graph = q.mean.graph
    noise = graph._as_node(noise)
    if noise.shape != q.shape:
        raise ShapeError("noise shape %s != posterior shape %s" % (noise.shape, q.shape))
    return q.mean + graph.exp(graph.scale(q.log_var, 0.5)) * noise


def kl_diag_gaussian(q, p=None, axis=None):
    """
    KL(q || p) of diagonal Gaussians in closed form.

    Parameters
    ----------
    q: GaussianParams
    p: GaussianParams or None
        N(0, I) if None.
    axis: int or None
        summed axis, all axes if None (scalar result).

    Returns
    -------
    Node
    """
    graph = q.mean.graph
    if p is None:
        terms = graph.exp(q.log_var) + graph.square(q.mean) - q.log_var - 1.0
    else:
        if p.shape != q.shape:
            raise ShapeError("KL between shapes %s and %s" % (q.shape, p.shape))
        diff = q.mean - p.mean
        terms = (
            graph.exp(q.log_var - p.log_var)
            + graph.square(diff) * graph.exp(-p.log_var)
            - 1.0
            + p.log_var
            - q.log_var
        )
    return graph.scale(graph.sum(terms, axis=axis), 0.5)


class ParamStore:
    """
    Ordered named float32 parameters with Adam state.

    Arrays are replaced, never modified in place, by `adam_step`: graphs built on a
    previous version keep their values.
    """

    def __init__(self, params=None):
        self.params = {}
        self.m = {}
        self.v = {}
        self.step = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.params:
            raise AutodiffError("duplicate parameter name '%s'" % name)
        array = np.array(value, dtype=np.float32)
        self.params[name] = array
        self.m[name] = np.zeros_like(array)
        self.v[name] = np.zeros_like(array)
        return array

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def __repr__(self):
        return "<ParamStore: %d tensors, %d values, step %d>" % (
            len(self), self.size, self.step)

    @property
    def size(self):
        return int(sum(p.size for p in self.params.values()))

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def bind(self, graph, prefix=""):
        """record the parameters (optionally those under `prefix`) as graph leaves"""
        return {name: graph.param(name, self.params[name]) for name in self.names(prefix)}

    def copy(self):
        other = ParamStore()
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.m = {k: v.copy() for k, v in self.m.items()}
        other.v = {k: v.copy() for k, v in self.v.items()}
        other.step = self.step
        return other


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def adam_step(store, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
    """
    One bias-corrected Adam update of `store`.

    Parameters
    ----------
    store: ParamStore
    grads: dict
        `{name: gradient}`; parameters without a gradient get a zero gradient.
    clip_norm: float or None
        rescale gradients to this global norm when larger.

    Returns
    -------
    ParamStore
        `store`, updated.

    Raises
    ------
    NonFiniteError
        if any gradient is not finite; no parameter is updated.
    """
    unknown = set(grads) - set(store.params)
    if unknown:
        raise AutodiffError("gradients for unknown parameters: %s" % sorted(unknown))
    for name, g in grads.items():
        if np.shape(g) != store.params[name].shape:
            raise ShapeError("gradient of '%s' has shape %s, parameter %s" % (
                name, np.shape(g), store.params[name].shape))
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient for parameter '%s'" % name)

    scale = 1.0
    if clip_norm is not None:
        norm = global_norm(grads)
        if norm > clip_norm:
            scale = clip_norm / norm
            logger.debug("clipping gradient norm %.3g to %.3g", norm, clip_norm)

    store.step += 1
    t = store.step
    for name, p in store.params.items():
        g = np.asarray(grads.get(name, 0.0), dtype=np.float32) * np.float32(scale)
        m = beta1 * store.m[name] + (1 - beta1) * g
        v = beta2 * store.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        store.m[name] = m.astype(np.float32)
        store.v[name] = v.astype(np.float32)
        store.params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)
    return store


# EVFP checkpoint format: little-endian, a header then records until end of file
_MAGIC = Const(b"EVFP")
_VERSION = Const(1, Int16ul)
_RECORD = Struct(
    "name" / PascalString(Int32ul, "utf8"),
    "rank" / Int8ul,
    "dims" / Array(this.rank, Int32ul),
    "data" / Bytes(lambda this: 4 * int(np.prod(this.dims, dtype=np.int64))),
)

OPT_SUFFIX = ".opt"


def _build_records(records):
    out = io.BytesIO()
    out.write(_MAGIC.build(None))
    out.write(_VERSION.build(None))
    for name, array in records:
        array = np.asarray(array, dtype="<f4")
        out.write(
            _RECORD.build(
                dict(
                    name=name,
                    rank=array.ndim,
                    dims=list(array.shape),
                    data=array.tobytes(order="C"),
                )
            )
        )
    return out.getvalue()


def _parse_records(data):
    stream = io.BytesIO(data)
    for part, what in ((_MAGIC, "bad magic"), (_VERSION, "unsupported version")):
        offset = stream.tell()
        try:
            part.parse_stream(stream)
        except ConstructError:
            raise CheckpointFormatError(what, offset) from None
    records = {}
    while stream.tell() < len(data):
        offset = stream.tell()
        try:
            record = _RECORD.parse_stream(stream)
        except (ConstructError, UnicodeDecodeError) as e:
            raise CheckpointFormatError("truncated or malformed record: %s" % e, offset) from None
        if record.name in records:
            raise CheckpointFormatError("duplicate record '%s'" % record.name, offset)
        array = np.frombuffer(record.data, dtype="<f4").reshape(tuple(record.dims))
        records[record.name] = array.astype(np.float32)
    return records


def write_records(path, records):
    """atomically write `[(name, array), ...]` in the EVFP format"""
    with atomic_write(path, "wb") as f:
        f.write(_build_records(records))


def read_records(path):
    """
    Read an EVFP file.

    Returns
    -------
    dict
        `{name: float32 array}` in file order.

    Raises
    ------
    CheckpointFormatError
    """
    with open(path, "rb") as f:
        return _parse_records(f.read())


def save_checkpoint(path, store):
    """write parameters to `path` and optimizer state to `path + '.opt'`"""
    path = str(path)
    write_records(path, list(store.params.items()))
    opt = [("step", np.float32(store.step))]
    opt += [("m/%s" % k, v) for k, v in store.m.items()]
    opt += [("v/%s" % k, v) for k, v in store.v.items()]
    write_records(path + OPT_SUFFIX, opt)
    logger.debug("checkpoint %s written (%d tensors, step %d)", path, len(store), store.step)


def load_checkpoint(path, optimizer=True):
    """
    Read a ParamStore written by `save_checkpoint`.

    Optimizer moments and step are restored from the `.opt` sibling when `optimizer` is
    True and the file exists.
    """
    path = str(path)
    store = ParamStore(read_records(path))
    if not optimizer:
        return store
    try:
        opt = read_records(path + OPT_SUFFIX)
    except FileNotFoundError:
        logger.warning("no optimizer state next to %s, starting with fresh moments", path)
        return store
    for name, p in store.params.items():
        for key, moments in (("m/%s" % name, store.m), ("v/%s" % name, store.v)):
            if key not in opt:
                raise CheckpointFormatError("missing optimizer record '%s'" % key, 0)
            if opt[key].shape != p.shape:
                raise CheckpointFormatError("optimizer record '%s' has shape %s, parameter %s" % (
                    key, opt[key].shape, p.shape), 0)
            moments[name] = opt[key]
    store.step = int(opt.get("step", np.float32(0)))
    return store
