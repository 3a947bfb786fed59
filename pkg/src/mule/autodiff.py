"""Minimal reverse-mode automatic differentiation over numpy arrays.

Values are plain ``numpy.ndarray`` objects. A :class:`Node` wraps one value
together with its accumulated gradient and the closure that propagates an
upstream gradient to its parents. Training runs in float32; gradient checks
run the same graphs on float64 copies of the parameters.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BatchTooSmallError,
    ContractError,
    DegenerateInputError,
    EmptyInputError,
    LabelError,
    ShapeError,
)

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_FLOOR = 1e-12

_grad_enabled = True
_check_finite = False
# When not None, non-differentiable decisions (relu signs, mined triplet sets)
# are appended here so grad_check can skip coordinates that cross a kink.
_decisions: list | None = None


class Node:
    """A value in the computation graph.

    ``grad`` is allocated lazily and always has the shape of ``value``.
    Leaves created with ``requires_grad=True`` are trainable parameters.
    """

    __slots__ = ("value", "_grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_rule=None, requires_grad=False, name=None):
        if isinstance(value, np.generic) and value.dtype.kind == "f":
            value = np.asarray(value)  # 0-d arithmetic yields numpy scalars; keep their precision
        elif not isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=DEFAULT_DTYPE)
        self.value = value
        self._grad = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, dtype={self.value.dtype})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.value)

    def backward(self, grad=None):
        """Propagate ``grad`` (default 1 for scalars) to every ancestor.

        Upstream gradients are computed fresh on each call and added into
        ``.grad``, so calling backward twice doubles accumulated gradients.
        """
        if grad is None:
            if self.value.size != 1:
                raise ContractError("backward() without a seed needs a scalar node")
            grad = np.ones_like(self.value)
        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._grad is None:
                node._grad = np.array(g, dtype=node.value.dtype, copy=True)
            else:
                node._grad += g
            if node.backward_rule is None:
                continue
            parent_grads = node.backward_rule(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


@contextlib.contextmanager
def no_grad():
    """Build nodes without recording parents (evaluation mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def check_finite(enabled=True):
    """Debug assertion: raise as soon as an op produces NaN or Inf."""
    global _check_finite
    previous = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = previous


@contextlib.contextmanager
def record_decisions():
    global _decisions
    previous = _decisions
    _decisions = []
    try:
        yield _decisions
    finally:
        _decisions = previous


def note_decision(arr):
    """Record a discrete choice made during forward (used by grad_check)."""
    if _decisions is not None:
        _decisions.append(np.asarray(arr).copy())


def parameter(value, name=None, dtype=None):
    arr = np.array(value, dtype=dtype or DEFAULT_DTYPE, copy=True)
    return Node(arr, requires_grad=True, name=name)


def constant(value, dtype=None, like=None):
    if isinstance(value, Node):
        return value
    if dtype is None:
        if like is not None:
            dtype = like.dtype
        elif isinstance(value, np.ndarray) and value.dtype.kind == "f":
            dtype = value.dtype
        else:
            dtype = DEFAULT_DTYPE
    return Node(np.asarray(value, dtype=dtype))


def _make(value, parents, rule):
    if _check_finite and not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite value produced in forward pass")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, rule, requires_grad=True)
    return Node(value)


def _pair(a, b):
    if isinstance(a, Node) and isinstance(b, Node):
        return a, b
    if isinstance(a, Node):
        return a, constant(b, like=a.value)
    if isinstance(b, Node):
        return constant(a, like=b.value), b
    return constant(a), constant(b)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def relu(x: Node) -> Node:
    mask = x.value > 0
    note_decision(mask)
    return _make(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Node) -> Node:
    y = (0.5 * (np.tanh(0.5 * x.value) + 1.0)).astype(x.dtype)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def elementwise(op: str, *inputs):
    """Dispatch by name: add, sub, mul, relu, sigmoid, tanh."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    if op in binary:
        if len(inputs) != 2:
            raise ContractError(f"{op} takes two inputs")
        a, b = inputs
        if isinstance(a, Node) and isinstance(b, Node) and a.shape != b.shape:
            raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")
        return binary[op](a, b)
    if op in unary:
        if len(inputs) != 1:
            raise ContractError(f"{op} takes one input")
        return unary[op](inputs[0])
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- structural


def matmul(a: Node, b: Node) -> Node:
    a, b = _pair(a, b)
    if b.ndim != 2 or a.ndim not in (1, 2):
        raise ShapeError(f"matmul expects [m,k] or [k] times [k,n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def rule(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), rule)


def transpose(x: Node) -> Node:
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(x.value.T, (x,), lambda g: (g.T,))


def reshape(x: Node, shape) -> Node:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),))


def getitem(x: Node, index) -> Node:
    """Basic or fancy indexing; backward scatters with accumulation."""
    shape, dtype = x.shape, x.dtype

    def rule(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.value[index], (x,), rule)


def rows(x: Node, idx) -> Node:
    """Gather rows ``x[idx]`` (embedding lookup, reordering)."""
    idx = np.asarray(idx, dtype=np.intp)
    return getitem(x, idx)


def concat(nodes: Sequence[Node], axis=0) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise EmptyInputError("concat of nothing")
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return _make(out, nodes, lambda g: tuple(np.split(g, bounds, axis=axis)))


def total(x: Node, axis=None) -> Node:
    shape = x.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.value.sum(axis=axis)), (x,), rule)


def mean(x: Node, axis=None) -> Node:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(total(x, axis), 1.0 / n)


def detach(x: Node) -> Node:
    return Node(x.value)


def gradient_reversal(x: Node) -> Node:
    """Identity forward; the backward pass negates the incoming gradient."""
    return _make(x.value, (x,), lambda g: (-g,))


# ---------------------------------------------------------------- model ops


def mean_pool(x: Node, lengths) -> Node:
    """Average the first ``length`` rows of each sequence.

    Accepts ``[T, d]`` with an int length, or ``[B, T, d]`` with one length
    per sequence. Padded rows get zero gradient.
    """
    if x.ndim == 2:
        length = int(lengths)
        if length < 1:
            raise EmptyInputError("mean_pool over an empty sentence")
        if length > x.shape[0]:
            raise ShapeError(f"length {length} exceeds {x.shape[0]} rows")
        weights = np.zeros((x.shape[0], 1), dtype=x.dtype)
        weights[:length] = 1.0 / length
        out = (x.value * weights).sum(axis=0)
        return _make(out, (x,), lambda g: (weights * g[None, :],))
    if x.ndim != 3:
        raise ShapeError("mean_pool expects [T,d] or [B,T,d]")
    lengths = np.asarray(lengths, dtype=np.intp)
    if lengths.shape != (x.shape[0],):
        raise ShapeError("one length per sequence required")
    if np.any(lengths < 1):
        raise EmptyInputError("mean_pool over an empty sentence")
    if np.any(lengths > x.shape[1]):
        raise ShapeError("length exceeds padded sequence size")
    steps = np.arange(x.shape[1])[None, :]
    weights = ((steps < lengths[:, None]) / lengths[:, None]).astype(x.dtype)[:, :, None]
    out = (x.value * weights).sum(axis=1)
    return _make(out, (x,), lambda g: (weights * g[:, None, :],))


def lstm_step(x: Node, h: Node, c: Node, params: Mapping[str, Node]):
    """One LSTM cell update; gates packed as [input, forget, candidate, output].

    ``params`` holds ``w_x`` [d_in, 4d_h], ``w_h`` [d_h, 4d_h], ``bias`` [4d_h].
    Returns the new ``(h, c)``.
    """
    w_x, w_h, bias = params["w_x"], params["w_h"], params["bias"]
    d_h = h.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * d_h) or w_h.shape != (d_h, 4 * d_h) or bias.shape != (4 * d_h,):
        raise ShapeError(
            f"lstm parameter shapes {w_x.shape}, {w_h.shape}, {bias.shape} "
            f"inconsistent with d_in={x.shape[-1]}, d_h={d_h}"
        )
    if c.shape != h.shape:
        raise ShapeError("hidden and cell states differ in shape")
    z = matmul(x, w_x) + matmul(h, w_h) + bias
    i = sigmoid(z[..., 0:d_h])
    f = sigmoid(z[..., d_h : 2 * d_h])
    cand = tanh(z[..., 2 * d_h : 3 * d_h])
    o = sigmoid(z[..., 3 * d_h :])
    c_new = f * c + i * cand
    h_new = o * tanh(c_new)
    return h_new, c_new


def batch_norm(x: Node, gamma: Node, beta: Node, training: bool, running: dict,
               eps=BN_EPS, momentum=BN_MOMENTUM) -> Node:
    """Batch normalization over the rows of ``x``.

    ``running`` is a dict with ``mean`` and ``var`` arrays, updated in place
    by an exponential moving average in training mode (unbiased variance).
    """
    if x.ndim != 2:
        raise ShapeError("batch_norm expects [B, d]")
    if training:
        n = x.shape[0]
        if n < 2:
            raise BatchTooSmallError(f"batch_norm needs B >= 2 in training mode, got {n}")
        mu = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.value - mu) * inv
        running["mean"] = ((1 - momentum) * running["mean"] + momentum * mu).astype(running["mean"].dtype)
        unbiased = var * n / (n - 1)
        running["var"] = ((1 - momentum) * running["var"] + momentum * unbiased).astype(running["var"].dtype)
        gv = gamma.value

        def rule(g):
            dxhat = g * gv
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx.astype(x.dtype), (g * xhat).sum(axis=0), g.sum(axis=0)

        out = (xhat * gv + beta.value).astype(x.dtype)
        return _make(out, (x, gamma, beta), rule)
    inv = (1.0 / np.sqrt(running["var"] + eps)).astype(x.dtype)
    xhat = (x.value - running["mean"].astype(x.dtype)) * inv
    gv = gamma.value
    out = (xhat * gv + beta.value).astype(x.dtype)
    return _make(out, (x, gamma, beta), lambda g: (g * gv * inv, (g * xhat).sum(axis=0), g.sum(axis=0)))


def normalize_rows(x: Node) -> Node:
    """Scale each row (last axis) to unit L2 norm."""
    norms = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("cosine distance of a zero vector")
    norms = np.maximum(norms, NORM_FLOOR)
    y = x.value / norms

    def rule(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _make(y, (x,), rule)


def cosine_distance(a: Node, b: Node) -> Node:
    """``1 - a.b / (|a| |b|)`` for two vectors."""
    a, b = _pair(a, b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_distance expects equal-length vectors, got {a.shape}, {b.shape}")
    return 1.0 - total(normalize_rows(a) * normalize_rows(b))


def cosine_distance_matrix(a: Node, b: Node) -> Node:
    """Pairwise cosine distances between the rows of ``a`` and ``b``."""
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_distance_matrix expects [n,d] and [m,d], got {a.shape}, {b.shape}")
    return 1.0 - matmul(normalize_rows(a), transpose(normalize_rows(b)))


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    n, n_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = -log_probs[np.arange(n), labels].mean()

    def rule(g):
        d = np.exp(log_probs)
        d[np.arange(n), labels] -= 1.0
        return ((g / n) * d,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), rule)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    skipped: int
    worst: tuple | None = None
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:g}), {self.checked} coords checked, {self.skipped} skipped"
                + (f", worst at {self.worst}" if self.worst else ""))


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(f: Callable[[], Node], params: Mapping[str, Node] | Iterable[Node], h=1e-4,
               tolerance=1e-5, objective: Callable[[], float] | None = None,
               sample: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backward gradients of ``f`` with central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar node. ``objective`` optionally supplies the scalar whose derivative
    the analytic gradient is meant to equal, when that differs from the node
    value (e.g. a gradient-reversal graph). Coordinates whose perturbation
    flips a recorded discrete decision (relu sign, mined triplet set) are
    skipped. ``sample`` caps the coordinates checked per parameter (chosen
    at random with ``seed``); by default every coordinate is checked.
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or str(i), p) for i, p in enumerate(params)]
    for name, p in named:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters ({name} is {p.dtype})")

    for _, p in named:
        p.zero_grad()
    with record_decisions() as base_decisions:
        out = f()
    if out.value.size != 1:
        raise ContractError("grad_check needs a scalar-valued graph")
    out.backward()
    analytic = {name: p.grad.copy() for name, p in named}
    base_decisions = list(base_decisions)
    evaluate = objective if objective is not None else (lambda: float(f().value))

    def probe():
        with record_decisions() as dec, no_grad():
            value = evaluate()
        return float(value), dec

    worst_err, worst_at = 0.0, None
    checked = skipped = 0
    per_param = {}
    rng = np.random.default_rng(seed)
    for name, p in named:
        flat = p.value.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        param_worst = 0.0
        coords = range(flat.size)
        if sample is not None and flat.size > sample:
            coords = np.sort(rng.choice(flat.size, sample, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus, dec_plus = probe()
            flat[i] = orig - h
            f_minus, dec_minus = probe()
            flat[i] = orig
            if not (_same_decisions(base_decisions, dec_plus) and _same_decisions(base_decisions, dec_minus)):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            err = relative_error(float(grad_flat[i]), numeric)
            checked += 1
            param_worst = max(param_worst, err)
            if err > worst_err:
                worst_err, worst_at = err, (name, i)
        per_param[name] = param_worst
    return GradCheckReport(worst_err, tolerance, checked, skipped, worst_at, per_param)


def _same_decisions(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))
