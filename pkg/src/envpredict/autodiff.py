"""Small reverse-mode differentiation engine on top of numpy.

Only the primitives needed by the envelope networks are provided: dilated
2d convolution, affine maps, activations, feature concatenation, embedding
lookup, outer-product expansion of scalar tracks, and a handful of
elementwise helpers. Arrays are float64 throughout.

Tensors laid out for convolution are ``(batch, time, frequency, feature)``.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where finite values are required."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def check_finite(arr, what="tensor"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what} contains {bad} non-finite value(s)")


class Tensor:
    """An array with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g, owned=False):
        if self.grad is None:
            self.grad = g if owned else np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        # interior nodes get fresh gradients for every backward pass
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accum(np.asarray(grad, dtype=DTYPE).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar, only the forms the models use
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index):
        return getitem(self, index)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural helpers


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def scale(a, c):
    """Multiply by a constant (scalar or array, never differentiated)."""
    c = np.asarray(c, dtype=DTYPE)

    def backward(g):
        a._accum(_unbroadcast(g * c, a.shape))

    return _make(a.data * c, (a,), backward)


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return _make(out, (a,), backward)


def reduce_sum(a, axis=None):
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out, (a,), backward)


def mean(a):
    n = a.data.size

    def backward(g):
        a._accum(np.broadcast_to(g / n, a.shape))

    return _make(a.data.mean(), (a,), backward)


def reshape(a, shape):
    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def getitem(a, index):
    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        a._accum(full)

    return _make(a.data[index], (a,), backward)


def take(a, idx, axis=1):
    """Fancy-index gather along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(idx)
    sl = (slice(None),) * axis

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, sl + (idx,), g)
        a._accum(full)

    return _make(a.data[sl + (idx,)], (a,), backward)


def concat(tensors, axis=-1):
    """Concatenate along ``axis``; the gradient is split at the same offsets."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one input")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ValueError(
                f"concat: extents {t.shape} do not match {ref} outside axis {axis}"
            )
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(out, tensors, backward)


def concat_features(tensors):
    """Concatenate ``(..., time, freq, C_i)`` tensors along the feature axis."""
    return concat(tensors, axis=-1)


# --------------------------------------------------------------------------
# activations


def activation(x, kind):
    """Elementwise ``relu``, ``tanh`` or ``gated`` (tanh(a) * sigmoid(b))."""
    if kind == "relu":
        mask = x.data > 0

        def backward(g):
            x._accum(g * mask)

        return _make(x.data * mask, (x,), backward)
    if kind == "tanh":
        out = np.tanh(x.data)

        def backward(g):
            x._accum(g * (1.0 - out * out))

        return _make(out, (x,), backward)
    if kind == "gated":
        c = x.shape[-1]
        if c % 2:
            raise ValueError(f"gated activation needs an even feature count, got {c}")
        h = c // 2
        ta = np.tanh(x.data[..., :h])
        sb = x.data[..., h:] * 0.5
        np.tanh(sb, out=sb)
        sb += 1.0
        sb *= 0.5
        out = ta * sb

        def backward(g):
            # work on contiguous halves; strided half-channel views are slow
            ga = ta * ta
            np.subtract(1.0, ga, out=ga)
            ga *= sb
            ga *= g
            gb = np.subtract(1.0, sb)
            gb *= out
            gb *= g
            x._accum(np.concatenate([ga, gb], axis=-1), owned=True)

        return _make(out, (x,), backward)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# affine, embedding, scalar expansion


def affine(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    parents = [x, w]
    out = (x.data.reshape(-1, w.shape[0]) @ w.data).reshape(x.shape[:-1] + (w.shape[1],))
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ValueError(f"affine: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x._accum((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accum(x.data.reshape(-1, w.shape[0]).T @ g2)
        if b is not None and b.requires_grad:
            b._accum(g.reshape(-1, w.shape[1]).sum(axis=0))

    return _make(out, parents, backward)


def embedding_lookup(ids, table):
    """Gather rows of ``table`` (V x F); the gradient scatter-adds into used rows."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v}): min {ids.min()}, max {ids.max()}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(gt)

    return _make(table.data[ids], (table,), backward)


def scalar_expand(track, basis):
    """Outer product of a scalar track (..., T) with a learned basis (F,)."""
    track, basis = as_tensor(track), as_tensor(basis)
    if basis.ndim != 1:
        raise ValueError("scalar_expand basis must be one-dimensional")
    out = track.data[..., None] * basis.data

    def backward(g):
        if track.requires_grad:
            track._accum(g @ basis.data)
        if basis.requires_grad:
            basis._accum(track.data.reshape(-1) @ g.reshape(-1, basis.shape[0]))

    return _make(out, (track, basis), backward)


# --------------------------------------------------------------------------
# dilated 2d convolution

PADDINGS = ("none", "same_frequency")
ALIGNMENTS = ("causal_time", "symmetric_time", "not_applicable")


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple = (1, 1)
    dilation: tuple = (1, 1)
    padding: str = "none"
    alignment: str = "not_applicable"
    in_features: int = 1
    out_features: int = 1

    def __post_init__(self):
        kt, kf = self.kernel
        dt, df = self.dilation
        if min(kt, kf) < 1 or min(dt, df) < 1:
            raise ValueError(f"kernel and dilation must be >= 1: {self.kernel}, {self.dilation}")
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}")
        if self.alignment not in ALIGNMENTS:
            raise ValueError(f"alignment must be one of {ALIGNMENTS}")
        if self.in_features < 1 or self.out_features < 1:
            raise ValueError("feature counts must be positive")

    @property
    def time_span(self):
        return self.dilation[0] * (self.kernel[0] - 1) + 1

    @property
    def freq_pad(self):
        if self.padding != "same_frequency":
            return (0, 0)
        total = self.dilation[1] * (self.kernel[1] - 1)
        return (total // 2, total - total // 2)

    @property
    def weight_shape(self):
        return (self.kernel[0], self.kernel[1], self.in_features, self.out_features)

    def output_shape(self, t, f):
        lo, hi = self.freq_pad
        return (
            t - self.dilation[0] * (self.kernel[0] - 1),
            f + lo + hi - self.dilation[1] * (self.kernel[1] - 1),
        )

    def output_time_offset(self):
        """Absolute-time offset of output index 0 relative to input index 0.

        Causal outputs are labelled by their newest input frame, symmetric
        ones by the centre of their window (upper centre for even spans).
        """
        span = self.time_span
        if self.alignment == "causal_time":
            return span - 1
        if self.alignment == "symmetric_time":
            return span // 2
        return 0


def conv2d(x, w, b, spec):
    """Dilated 2d convolution over (batch, time, freq, feature) inputs.

    ``w`` has shape ``(k_t, k_f, C_in, C_out)``. Time is never padded; the
    frequency axis is zero padded when ``spec.padding == "same_frequency"``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (batch, time, freq, feature) input, got shape {x.shape}")
    if w.shape != spec.weight_shape:
        raise ValueError(f"conv2d weight shape {w.shape} != {spec.weight_shape}")
    if x.shape[3] != spec.in_features:
        raise ValueError(f"conv2d input has {x.shape[3]} features, spec says {spec.in_features}")
    nb, t, f, cin = x.shape
    need = spec.time_span
    if t < need:
        raise ValueError(
            f"conv2d input too short for receptive field: need {need} time steps, got {t}"
        )
    kt, kf = spec.kernel
    dt, df = spec.dilation
    lo, hi = spec.freq_pad
    to, fo = spec.output_shape(t, f)
    if fo < 1:
        raise ValueError(f"conv2d frequency extent {f} too small for kernel {spec.kernel}")
    xp = x.data
    if lo or hi:
        xp = np.zeros((nb, t, f + lo + hi, cin))
        xp[:, :, lo : lo + f] = x.data
    taps = [(a, c) for a in range(kt) for c in range(kf)]
    if len(taps) == 1:
        cols = xp[:, :to, :fo, :]
    else:
        cols = np.concatenate(
            [xp[:, a * dt : a * dt + to, c * df : c * df + fo, :] for a, c in taps], axis=-1
        )
    wr = w.data.reshape(-1, spec.out_features)
    # 2-d matmuls: stacked N-d matmul falls back to one tiny gemm per row block
    cols2 = cols.reshape(-1, wr.shape[0])
    out = (cols2 @ wr).reshape(nb, to, fo, spec.out_features)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)

    def backward(g):
        g2 = g.reshape(-1, spec.out_features)
        if w.requires_grad:
            w._accum((cols2.T @ g2).reshape(w.shape), owned=True)
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0), owned=True)
        if x.requires_grad:
            gcols = (g2 @ wr.T).reshape(cols.shape)
            if len(taps) == 1 and to == t and fo == f:
                x._accum(gcols, owned=True)
                return
            if len(taps) == 1 and not (lo or hi):
                gx = np.zeros_like(x.data)
                gx[:, :to, :fo, :] = gcols
                x._accum(gx, owned=True)
                return
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i, (a, c) in enumerate(taps):
                gxp[:, a * dt : a * dt + to, c * df : c * df + fo, :] += gcols[
                    ..., i * cin : (i + 1) * cin
                ]
            x._accum(gxp[:, :, lo : lo + f, :], owned=not (lo or hi))

    return _make(out, parents, backward)


# --------------------------------------------------------------------------
# initialisation and optimisation


def init_uniform(rng, shape, fan_in, gain=1.0):
    """Scaled-uniform fan-in initialisation, U(-gain/sqrt(fan_in), +gain/sqrt(fan_in))."""
    limit = gain / math.sqrt(fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


@dataclass
class AdamState:
    """Adam moments plus a learning rate that decays geometrically per update."""

    base_lr: float = 5e-4
    decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self, t=None):
        """Learning rate used for the update with index ``t`` (default: the next one)."""
        t = self.step if t is None else t
        return self.base_lr * (1.0 - self.decay) ** t


def adam_step(params, grads, state):
    """Apply one Adam update in place; returns ``(params, state)``.

    A non-finite gradient rejects the whole update and raises
    :class:`NonFiniteError`; parameters and moments are left untouched.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same names")
    for name, g in grads.items():
        if np.shape(g) != params[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
        check_finite(g, f"gradient of {name!r}")
    lr = state.lr()
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(params):
        p, g = params[name], np.asarray(grads[name], dtype=DTYPE)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    state.step = t
    return params, state


def clip_global_norm(grads, max_norm):
    """Scale all gradients down together so their joint L2 norm is <= max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        f = max_norm / total
        for g in grads.values():
            g *= f
    return total

