"""Dense-tensor computation with reverse-mode gradients.

A small tape-based engine on top of numpy: every primitive records a node on
the active trace, ``backward`` walks the tape in reverse accumulating
vector-Jacobian products, and ``replay`` re-executes a recorded trace on new
inputs. Precision is a process-global setting (float32 by default, float64
for gradient-check suites).

Broadcasting is deliberately restricted: elementwise ops accept identical
shapes, a scalar operand, or an operand whose shape is a trailing suffix of
the other (leading-batch broadcast). Anything else needs an explicit
``reshape``/``broadcast_to`` so the recorded trace stays auditable.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

__all__ = [
    "Tensor",
    "Trace",
    "ShapeMismatchError",
    "NonFiniteError",
    "set_precision",
    "get_precision",
    "precision",
    "default_dtype",
    "record",
    "replay",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_",
    "sqrt",
    "exp",
    "log",
    "matmul",
    "reshape",
    "transpose",
    "slice_",
    "concat",
    "broadcast_to",
    "take_per_row",
    "sum_",
    "mean_",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "relu",
    "cross_entropy",
    "detach",
    "dropout_mask",
]


class ShapeMismatchError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation that must stay finite produces NaN/Inf."""


_PRECISION_DTYPES = {32: np.dtype(np.float32), 64: np.dtype(np.float64)}
_precision_bits = 32


def set_precision(bits):
    """Set the global scalar precision (32 or 64)."""
    global _precision_bits
    if bits not in _PRECISION_DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _precision_bits = bits


def get_precision():
    return _precision_bits


def default_dtype():
    return _PRECISION_DTYPES[_precision_bits]


@contextlib.contextmanager
def precision(bits):
    """Temporarily switch global precision."""
    prev = _precision_bits
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(prev)


class Tensor:
    """A dense real-valued array plus a requires_grad flag.

    ``grad`` is populated by :func:`backward` and always matches ``data`` in
    shape. Tensors are immutable during forward/backward evaluation by
    convention; the optimizer mutates parameter ``data`` between steps.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def detach(self):
        return detach(self)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else default_dtype()))


# ---------------------------------------------------------------------------
# Trace machinery
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("op", "inputs", "output", "kwargs", "aux")

    def __init__(self, op, inputs, output, kwargs, aux=None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.kwargs = kwargs
        self.aux = aux


class Trace:
    """Ordered record of primitive operations from one evaluation.

    Replaying the node list forward reproduces the outputs bit-identically
    for fixed inputs and precision; walking it in reverse yields gradients.
    """

    def __init__(self):
        self.nodes = []
        self.inputs = []
        self.outputs = []

    def produced(self):
        return {id(n.output) for n in self.nodes}


_active_trace = None


def record(fn, *inputs):
    """Evaluate ``fn(*inputs)`` while recording every primitive.

    Returns the trace; its ``outputs`` hold the evaluated results. Leaf
    tensors touched during evaluation (parameters and the declared inputs)
    are the differentiation roots for :func:`backward`.
    """
    global _active_trace
    if _active_trace is not None:
        raise RuntimeError("record() does not nest")
    tr = Trace()
    tr.inputs = list(inputs)
    _active_trace = tr
    try:
        out = fn(*inputs)
    finally:
        _active_trace = None
    tr.outputs = list(out) if isinstance(out, (tuple, list)) else [out]
    return tr


def replay(tr, inputs):
    """Re-execute a recorded trace on new inputs of identical shapes."""
    if len(inputs) != len(tr.inputs):
        raise ShapeMismatchError(
            f"replay expects {len(tr.inputs)} inputs, got {len(inputs)}"
        )
    values = {}
    for orig, new in zip(tr.inputs, inputs):
        new = _as_tensor(new)
        if new.shape != orig.shape:
            raise ShapeMismatchError(
                f"replay input shape {new.shape} does not match recorded {orig.shape}"
            )
        values[id(orig)] = new.data
    for node in tr.nodes:
        args = [values.get(id(t), t.data) for t in node.inputs]
        out = node.op.forward(*args, **node.kwargs)
        values[id(node.output)] = out[0] if node.op.uses_aux else out
    return [Tensor(values.get(id(o), o.data)) for o in tr.outputs]


def backward(tr, seed=None):
    """Accumulate gradients of the seed-weighted output over a trace.

    Returns a dict mapping every ``requires_grad`` leaf tensor to its
    gradient array; also stores the gradient on ``tensor.grad``.
    """
    if len(tr.outputs) != 1:
        raise ValueError("backward expects a single-output trace")
    out = tr.outputs[0]
    if seed is None:
        seed = Tensor(np.ones_like(out.data))
    seed = _as_tensor(seed)
    if seed.shape != out.shape:
        raise ShapeMismatchError(
            f"seed shape {seed.shape} does not match output shape {out.shape}"
        )
    grads = {id(out): seed.data.astype(out.dtype, copy=True)}
    produced = tr.produced()
    leaves = {}
    for node in reversed(tr.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        needs = [t.requires_grad or id(t) in produced for t in node.inputs]
        if not any(needs):
            continue
        ins = [t.data for t in node.inputs]
        if node.op.uses_aux:
            in_grads = node.op.vjp(g_out, ins, node.output.data, node.aux,
                                   **node.kwargs)
        else:
            in_grads = node.op.vjp(g_out, ins, node.output.data, **node.kwargs)
        for t, g, needed in zip(node.inputs, in_grads, needs):
            if g is None or not needed:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t.requires_grad and key not in produced:
                leaves[key] = t
    result = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g
        result[t] = g
    return result


# ---------------------------------------------------------------------------
# Primitive definition helpers
# ---------------------------------------------------------------------------


class _Op:
    __slots__ = ("name", "forward", "vjp", "uses_aux")

    def __init__(self, name, forward, vjp, uses_aux=False):
        self.name = name
        self.forward = forward
        self.vjp = vjp
        # aux-ops return (output, stash); the stash feeds their vjp so the
        # backward pass avoids recomputing expensive intermediates
        self.uses_aux = uses_aux


def _apply(op, tensors, kwargs=None):
    kwargs = kwargs or {}
    res = op.forward(*[t.data for t in tensors], **kwargs)
    aux = None
    if op.uses_aux:
        out_data, aux = res
    else:
        out_data = res
    out = Tensor(out_data, dtype=out_data.dtype)
    out.requires_grad = any(t.requires_grad for t in tensors)
    if _active_trace is not None:
        _active_trace.nodes.append(_Node(op, list(tensors), out, kwargs, aux))
    return out


def _binop_shapes(name, a, b):
    """Validate the restricted broadcast rule; return the output shape."""
    if a.shape == b.shape:
        return a.shape
    if a.ndim == 0:
        return b.shape
    if b.ndim == 0:
        return a.shape
    if a.ndim > b.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return a.shape
    if b.ndim > a.ndim and b.shape[b.ndim - a.ndim :] == a.shape:
        return b.shape
    raise ShapeMismatchError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad, shape):
    """Sum a gradient over the leading axes broadcast away by _binop_shapes."""
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return grad.sum()
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _ew_forward(name, fn):
    def forward(a, b):
        _binop_shapes(name, a, b)
        return fn(a, b)

    return forward


_add_op = _Op(
    "add",
    _ew_forward("add", np.add),
    lambda g, ins, out: (_reduce_to(g, ins[0].shape), _reduce_to(g, ins[1].shape)),
)

_sub_op = _Op(
    "sub",
    _ew_forward("sub", np.subtract),
    lambda g, ins, out: (_reduce_to(g, ins[0].shape), _reduce_to(-g, ins[1].shape)),
)

_mul_op = _Op(
    "mul",
    _ew_forward("mul", np.multiply),
    lambda g, ins, out: (
        _reduce_to(g * ins[1], ins[0].shape),
        _reduce_to(g * ins[0], ins[1].shape),
    ),
)

_div_op = _Op(
    "div",
    _ew_forward("div", np.divide),
    lambda g, ins, out: (
        _reduce_to(g / ins[1], ins[0].shape),
        _reduce_to(-g * ins[0] / (ins[1] * ins[1]), ins[1].shape),
    ),
)

_neg_op = _Op("neg", lambda a: -a, lambda g, ins, out: (-g,))


def add(a, b):
    return _apply(_add_op, (_as_tensor(a), _as_tensor(b)))


def sub(a, b):
    return _apply(_sub_op, (_as_tensor(a), _as_tensor(b)))


def mul(a, b):
    return _apply(_mul_op, (_as_tensor(a), _as_tensor(b)))


def div(a, b):
    return _apply(_div_op, (_as_tensor(a), _as_tensor(b)))


def neg(a):
    return _apply(_neg_op, (_as_tensor(a),))


_pow_op = _Op(
    "pow",
    lambda a, p: np.power(a, p),
    lambda g, ins, out, p: (g * p * np.power(ins[0], p - 1),),
)


def pow_(a, p):
    """Elementwise power with a constant real exponent."""
    return _apply(_pow_op, (_as_tensor(a),), {"p": float(p)})


_sqrt_op = _Op(
    "sqrt",
    np.sqrt,
    lambda g, ins, out: (g * 0.5 / out,),
)


def sqrt(a):
    return _apply(_sqrt_op, (_as_tensor(a),))


_exp_op = _Op("exp", np.exp, lambda g, ins, out: (g * out,))


def exp(a):
    return _apply(_exp_op, (_as_tensor(a),))


_log_op = _Op("log", np.log, lambda g, ins, out: (g / ins[0],))


def log(a):
    return _apply(_log_op, (_as_tensor(a),))


# ---------------------------------------------------------------------------
# Matmul
# ---------------------------------------------------------------------------


def _matmul_forward(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul: operands must be >=2-d, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: inner extents differ, {a.shape} @ {b.shape}"
        )
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError(
            f"matmul: batch extents differ, {a.shape} @ {b.shape}"
        )
    return np.matmul(a, b)


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def _matmul_vjp(g, ins, out):
    a, b = ins
    ga = np.matmul(g, _swap_last(b))
    if ga.shape != a.shape:  # b batched, a plain
        ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
    gb = np.matmul(_swap_last(a), g)
    if gb.shape != b.shape:  # a batched, b plain
        gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
    return ga, gb


_matmul_op = _Op("matmul", _matmul_forward, _matmul_vjp)


def matmul(a, b):
    """Matrix product; leading batch dims must match exactly or be absent."""
    return _apply(_matmul_op, (_as_tensor(a), _as_tensor(b)))


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def _reshape_forward(a, shape):
    try:
        return np.reshape(a, shape)
    except ValueError as e:
        raise ShapeMismatchError(f"reshape: {e}") from None


_reshape_op = _Op(
    "reshape",
    _reshape_forward,
    lambda g, ins, out, shape: (g.reshape(ins[0].shape),),
)


def reshape(a, shape):
    return _apply(_reshape_op, (_as_tensor(a),), {"shape": tuple(shape)})


_transpose_op = _Op(
    "transpose",
    lambda a, axes: np.transpose(a, axes),
    lambda g, ins, out, axes: (np.transpose(g, np.argsort(axes)),),
)


def transpose(a, axes):
    return _apply(_transpose_op, (_as_tensor(a),), {"axes": tuple(axes)})


def _slice_forward(a, key):
    return a[key].copy()


def _slice_vjp(g, ins, out, key):
    z = np.zeros_like(ins[0])
    z[key] = g
    return (z,)


_slice_op = _Op("slice", _slice_forward, _slice_vjp)


def slice_(a, key):
    """Basic slicing (slices and integer indices)."""
    if not isinstance(key, tuple):
        key = (key,)
    return _apply(_slice_op, (_as_tensor(a),), {"key": key})


def _concat_forward(*parts, axis):
    return np.concatenate(parts, axis=axis)


def _concat_vjp(g, ins, out, axis):
    sizes = [x.shape[axis] for x in ins]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


_concat_op = _Op("concat", _concat_forward, _concat_vjp)


def concat(tensors, axis=0):
    return _apply(_concat_op, tuple(_as_tensor(t) for t in tensors), {"axis": axis})


def _broadcast_vjp(g, ins, out, shape):
    src = ins[0].shape
    extra = len(shape) - len(src)
    axes = list(range(extra))
    for i, d in enumerate(src):
        if d == 1 and shape[extra + i] != 1:
            axes.append(extra + i)
    gg = g.sum(axis=tuple(axes), keepdims=False) if axes else g
    return (gg.reshape(src),)


_broadcast_op = _Op(
    "broadcast_to",
    lambda a, shape: np.ascontiguousarray(np.broadcast_to(a, shape)),
    _broadcast_vjp,
)


def broadcast_to(a, shape):
    """Explicit broadcast; the only sanctioned way to widen non-leading axes."""
    return _apply(_broadcast_op, (_as_tensor(a),), {"shape": tuple(shape)})


def _take_per_row_forward(a, idx):
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeMismatchError(
            f"take_per_row: need (R,C) values and (R,) indices, got {a.shape}, {idx.shape}"
        )
    return a[np.arange(a.shape[0]), idx.astype(np.intp)].copy()


def _take_per_row_vjp(g, ins, out):
    a, idx = ins
    z = np.zeros_like(a)
    np.add.at(z, (np.arange(a.shape[0]), idx.astype(np.intp)), g)
    return (z, None)


_take_per_row_op = _Op("take_per_row", _take_per_row_forward, _take_per_row_vjp)


def take_per_row(a, idx):
    """Gather one column per row: out[i] = a[i, idx[i]]."""
    idx_t = Tensor(np.asarray(idx, dtype=np.int64), dtype=np.int64)
    return _apply(_take_per_row_op, (_as_tensor(a), idx_t))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g, src_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, src_shape).copy()
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(src_shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, src_shape).copy()


_sum_op = _Op(
    "sum",
    lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
    lambda g, ins, out, axis, keepdims: (
        _expand_reduced(g, ins[0].shape, axis, keepdims),
    ),
)


def sum_(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply(_sum_op, (_as_tensor(a),), {"axis": axis, "keepdims": keepdims})


def _mean_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for a in axes:
        n *= shape[a % len(shape)]
    return n


_mean_op = _Op(
    "mean",
    lambda a, axis, keepdims: np.mean(a, axis=axis, keepdims=keepdims),
    lambda g, ins, out, axis, keepdims: (
        _expand_reduced(g, ins[0].shape, axis, keepdims)
        / _mean_count(ins[0].shape, axis),
    ),
)


def mean_(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply(_mean_op, (_as_tensor(a),), {"axis": axis, "keepdims": keepdims})


# ---------------------------------------------------------------------------
# Neural primitives
# ---------------------------------------------------------------------------


def _softmax_forward(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_vjp(g, ins, out, axis):
    dot = np.sum(g * out, axis=axis, keepdims=True)
    return (out * (g - dot),)


_softmax_op = _Op("softmax", _softmax_forward, _softmax_vjp)


def softmax(a, axis=-1):
    """Max-subtracted softmax along one axis."""
    return _apply(_softmax_op, (_as_tensor(a),), {"axis": axis})


def _layer_norm_forward(x, gamma, beta, eps):
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeMismatchError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} "
            f"do not match feature extent {x.shape[-1:]}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = np.mean(d * d, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv
    return xhat * gamma + beta, (inv, xhat)


def _layer_norm_vjp(g, ins, out, aux, eps):
    x, gamma, beta = ins
    inv, xhat = aux
    h = g * gamma
    batch_axes = tuple(range(x.ndim - 1))
    dgamma = np.sum(g * xhat, axis=batch_axes)
    dbeta = np.sum(g, axis=batch_axes)
    dx = inv * (
        h
        - np.mean(h, axis=-1, keepdims=True)
        - xhat * np.mean(h * xhat, axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


_layer_norm_op = _Op("layer_norm", _layer_norm_forward, _layer_norm_vjp,
                     uses_aux=True)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    return _apply(
        _layer_norm_op,
        (_as_tensor(x), _as_tensor(gamma), _as_tensor(beta)),
        {"eps": float(eps)},
    )


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu_forward(x):
    x2 = x * x
    u = _GELU_C * x * (1.0 + _GELU_A * x2)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_vjp(g, ins, out, t):
    x = ins[0]
    x2 = x * x
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


_gelu_op = _Op("gelu", _gelu_forward, _gelu_vjp, uses_aux=True)


def gelu(x):
    """tanh-approximate GELU."""
    return _apply(_gelu_op, (_as_tensor(x),))


def _sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_sigmoid_op = _Op(
    "sigmoid",
    _sigmoid_forward,
    lambda g, ins, out: (g * out * (1.0 - out),),
)


def sigmoid(x):
    return _apply(_sigmoid_op, (_as_tensor(x),))


_relu_op = _Op(
    "relu",
    lambda x: np.maximum(x, 0),
    lambda g, ins, out: (g * (ins[0] > 0),),
)


def relu(x):
    return _apply(_relu_op, (_as_tensor(x),))


def _cross_entropy_forward(logits, labels):
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeMismatchError(
            f"cross_entropy: need (B,K) logits and (B,) labels, "
            f"got {logits.shape}, {labels.shape}"
        )
    lbl = labels.astype(np.intp)
    if lbl.min() < 0 or lbl.max() >= logits.shape[1]:
        raise IndexError("cross_entropy: label out of range")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    nll = lse - logits[np.arange(len(lbl)), lbl]
    return np.asarray(nll.mean(), dtype=logits.dtype)


def _cross_entropy_vjp(g, ins, out):
    logits, labels = ins
    lbl = labels.astype(np.intp)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(len(lbl)), lbl] -= 1.0
    return (g * p / len(lbl), None)


_cross_entropy_op = _Op("cross_entropy", _cross_entropy_forward, _cross_entropy_vjp)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (B,K) logits against integer labels."""
    lbl = Tensor(np.asarray(labels, dtype=np.int64), dtype=np.int64)
    return _apply(_cross_entropy_op, (_as_tensor(logits), lbl))


_detach_op = _Op(
    "detach",
    lambda a: a.copy(),
    lambda g, ins, out: (None,),
)


def detach(a):
    """Pass values through, block gradients."""
    out = _apply(_detach_op, (_as_tensor(a),))
    out.requires_grad = False
    return out


def dropout_mask(x, rate, rng):
    """Inverted dropout using an externally supplied RNG; identity at rate 0."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn, point, step=None):
    """Compare backward() against central differences for a scalar function.

    The analytic gradient is computed at the point's own precision; the
    central-difference reference is always evaluated at 64-bit so that the
    check certifies the gradient code rather than float32 round-off.
    Returns the max elementwise relative error with denominator
    max(|analytic|, |numeric|, 1e-8). Raises :class:`NonFiniteError` if
    either estimate is NaN/Inf.
    """
    if step is None:
        step = 1e-4
    point = _as_tensor(point)
    point.requires_grad = True
    tr = record(fn, point)
    out = tr.outputs[0]
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    grads = backward(tr, Tensor(np.ones_like(out.data)))
    analytic = grads.get(point)
    if analytic is None:
        analytic = np.zeros_like(point.data)
    probe = Tensor(point.data.astype(np.float64), dtype=np.float64)
    probe.requires_grad = False
    numeric = np.zeros(point.shape, dtype=np.float64)
    flat = probe.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with precision(64):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn(probe).data)
            flat[i] = orig - step
            dn = float(fn(probe).data)
            flat[i] = orig
            num_flat[i] = (up - dn) / (2.0 * step)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NonFiniteError("grad_check: non-finite gradient estimate")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
