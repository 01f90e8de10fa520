"""Minimal reverse-mode automatic differentiation on numpy arrays.

A ``Tape`` records primal values and adjoint closures during one forward
evaluation; ``Tape.backward`` replays the closures in reverse to accumulate
gradients into every leaf that was touched. Every operation also works with
``tape=None`` (or with plain ndarrays), in which case it is a pure numpy fast
path -- the inference code uses exactly the same functions as training.

Ops keep the dtype of their inputs: the engine runs float32, gradient-check
tests run the identical graph in float64.
"""

import numpy as np


class Node:
    """A value recorded on a tape, with an adjoint slot."""

    __slots__ = ("value", "adjoint")

    def __init__(self, value):
        self.value = value
        self.adjoint = None

    @property
    def shape(self):
        return self.value.shape


class TapeConsumedError(RuntimeError):
    pass


class Tape:
    def __init__(self):
        self._ops = []
        self._consumed = False

    def leaf(self, value) -> Node:
        return Node(np.asarray(value))

    def record(self, value, backward) -> Node:
        node = Node(value)
        self._ops.append((node, backward))
        return node

    def backward(self, output: Node, adjoint=None):
        """Reverse accumulation from ``output``; consumes the tape."""
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a previous backward pass")
        self._consumed = True
        if adjoint is None:
            adjoint = np.ones_like(output.value)
        output.adjoint = np.asarray(adjoint, dtype=output.value.dtype)
        for node, bwd in reversed(self._ops):
            if node.adjoint is not None:
                bwd(node.adjoint)
        self._ops.clear()


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _is_node(x):
    return isinstance(x, Node)


def _accum(node: Node, g):
    # Adjoints are only ever rebound (never mutated in place), so holding a
    # view or a freshly produced array is safe without copying.
    if node.adjoint is None:
        node.adjoint = g if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        node.adjoint = node.adjoint + g


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(tape, a, b, out, da, db):
    if tape is None or not (_is_node(a) or _is_node(b)):
        return out

    def bwd(g):
        if _is_node(a):
            _accum(a, _unbroadcast(da(g), a.value.shape))
        if _is_node(b):
            _accum(b, _unbroadcast(db(g), b.value.shape))

    return tape.record(out, bwd)


def _unary(tape, x, out, dx):
    if tape is None or not _is_node(x):
        return out

    def bwd(g):
        _accum(x, dx(g))

    return tape.record(out, bwd)


# -- arithmetic -------------------------------------------------------------

def add(tape, a, b):
    return _binary(tape, a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def sub(tape, a, b):
    return _binary(tape, a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def mul(tape, a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(tape, a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(tape, a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _binary(tape, a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def neg(tape, x):
    return _unary(tape, x, -value_of(x), lambda g: -g)


def square(tape, x):
    xv = value_of(x)
    return _unary(tape, x, xv * xv, lambda g: 2.0 * g * xv)


def sqrt(tape, x):
    out = np.sqrt(value_of(x))
    return _unary(tape, x, out, lambda g: 0.5 * g / out)


def exp(tape, x):
    out = np.exp(value_of(x))
    return _unary(tape, x, out, lambda g: g * out)


def log(tape, x):
    xv = value_of(x)
    return _unary(tape, x, np.log(xv), lambda g: g / xv)


def absolute(tape, x):
    xv = value_of(x)
    return _unary(tape, x, np.abs(xv), lambda g: g * np.sign(xv))


def sin(tape, x):
    xv = value_of(x)
    return _unary(tape, x, np.sin(xv), lambda g: g * np.cos(xv))


def cos(tape, x):
    xv = value_of(x)
    return _unary(tape, x, np.cos(xv), lambda g: -g * np.sin(xv))


def tanh(tape, x):
    out = np.tanh(value_of(x))
    return _unary(tape, x, out, lambda g: g * (1.0 - out * out))


def relu(tape, x):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    return _unary(tape, x, out, lambda g: g * (xv > 0))


def elu(tape, x):
    xv = value_of(x)
    neg_part = np.expm1(np.minimum(xv, 0.0))
    out = np.where(xv > 0, xv, neg_part)
    return _unary(tape, x, out, lambda g: g * np.where(xv > 0, 1.0, neg_part + 1.0))


def sigmoid(tape, x):
    xv = value_of(x)
    out = 1.0 / (1.0 + np.exp(-xv))
    return _unary(tape, x, out, lambda g: g * out * (1.0 - out))


def clip(tape, x, lo, hi):
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    return _unary(tape, x, out, lambda g: g * ((xv >= lo) & (xv <= hi)))


def maximum_const(tape, x, c):
    xv = value_of(x)
    return _unary(tape, x, np.maximum(xv, c), lambda g: g * (xv > c))


# -- shape ------------------------------------------------------------------

def reshape(tape, x, shape):
    xv = value_of(x)
    return _unary(tape, x, xv.reshape(shape), lambda g: g.reshape(xv.shape))


def slice_axis(tape, x, axis, lo, hi):
    xv = value_of(x)
    sl = [slice(None)] * xv.ndim
    sl[axis] = slice(lo, hi)
    sl = tuple(sl)

    def dx(g):
        gx = np.zeros_like(xv)
        gx[sl] = g
        return gx

    return _unary(tape, x, xv[sl], dx)


def transpose(tape, x, axes):
    inv = np.argsort(axes)
    return _unary(tape, x, value_of(x).transpose(axes), lambda g: g.transpose(inv))


def concat(tape, parts, axis=-1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None or not any(_is_node(p) for p in parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if _is_node(p):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(p, g[tuple(sl)])

    return tape.record(out, bwd)


def sum_(tape, x, axis=None, keepdims=False):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def dx(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).astype(xv.dtype, copy=False)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, xv.shape)

    return _unary(tape, x, out, dx)


def mean(tape, x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    s = sum_(tape, x, axis=axis, keepdims=keepdims)
    return mul(tape, s, 1.0 / n)


def cumsum(tape, x, axis):
    out = np.cumsum(value_of(x), axis=axis)
    return _unary(tape, x, out,
                  lambda g: np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))


# -- matmul -----------------------------------------------------------------

def matmul(tape, a, b):
    """Matrix product; supports batched (…, n, k) @ (…, k, m)."""
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def da(g):
        return g @ np.swapaxes(bv, -1, -2)

    def db(g):
        return np.swapaxes(av, -1, -2) @ g

    return _binary(tape, a, b, out, da, db)


# -- gather / scatter -------------------------------------------------------

class ScatterPlan:
    """Precomputed segment reduction: sums rows of a pair array into
    ``out_size`` output rows keyed by ``idx`` (duplicates allowed)."""

    def __init__(self, idx: np.ndarray, out_size: int):
        idx = np.asarray(idx, dtype=np.int64)
        self.idx = idx
        self.out_size = out_size
        self.perm = np.argsort(idx, kind="stable")
        sorted_idx = idx[self.perm]
        if len(sorted_idx):
            uniq_mask = np.empty(len(sorted_idx), dtype=bool)
            uniq_mask[0] = True
            np.not_equal(sorted_idx[1:], sorted_idx[:-1], out=uniq_mask[1:])
            self.starts = np.nonzero(uniq_mask)[0]
            self.rows = sorted_idx[self.starts]
        else:
            self.starts = np.zeros(0, dtype=np.int64)
            self.rows = np.zeros(0, dtype=np.int64)

    def apply(self, pairs: np.ndarray) -> np.ndarray:
        out_shape = (self.out_size,) + pairs.shape[1:]
        out = np.zeros(out_shape, dtype=pairs.dtype)
        if len(self.idx):
            reduced = np.add.reduceat(pairs[self.perm], self.starts, axis=0)
            out[self.rows] = reduced
        return out


def gather_rows(tape, x, idx, plan: ScatterPlan = None, unique: bool = False):
    """``x[idx]`` along axis 0; duplicates allowed. ``plan`` (over ``idx``
    into ``len(x)`` rows) makes the backward scatter fast; ``unique=True``
    asserts no duplicate indices so the backward is a plain assignment."""
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = xv[idx]
    if tape is None or not _is_node(x):
        return out
    if unique:
        def bwd_u(g):
            dx = np.zeros_like(xv)
            dx[idx] = g
            _accum(x, dx)

        return tape.record(out, bwd_u)
    local_plan = plan if plan is not None else ScatterPlan(idx, len(xv))

    def bwd(g):
        _accum(x, local_plan.apply(g))

    return tape.record(out, bwd)


def scatter_sum(tape, pairs, plan: ScatterPlan):
    """Segment-sum pair rows into ``plan.out_size`` rows (dual of gather_rows)."""
    pv = value_of(pairs)
    out = plan.apply(pv)
    if tape is None or not _is_node(pairs):
        return out

    def bwd(g):
        _accum(pairs, g[plan.idx])

    return tape.record(out, bwd)


def assign_rows(tape, x, idx, rows):
    """Out-of-place ``x[idx] = rows`` (idx unique); gradients flow to both."""
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = xv.copy()
    out[idx] = value_of(rows)
    if tape is None or not (_is_node(x) or _is_node(rows)):
        return out

    def bwd(g):
        if _is_node(rows):
            _accum(rows, g[idx])
        if _is_node(x):
            gx = g.copy()
            gx[idx] = 0.0
            _accum(x, gx)

    return tape.record(out, bwd)


# -- gradient checking helper (tests) ----------------------------------------

def finite_difference_gradient(fn, params: dict, names=None, step=1e-3, rng=None,
                               max_per_param=8):
    """Central finite differences of ``fn(params) -> float`` w.r.t. sampled
    coordinates. Returns list of (name, flat_index, fd_gradient)."""
    rng = rng or np.random.default_rng(0)
    names = names or list(params)
    out = []
    for name in names:
        arr = params[name]
        k = min(max_per_param, arr.size)
        coords = rng.choice(arr.size, size=k, replace=False)
        for c in coords:
            flat = arr.reshape(-1)
            old = flat[c]
            flat[c] = old + step
            up = fn(params)
            flat[c] = old - step
            down = fn(params)
            flat[c] = old
            out.append((name, int(c), (up - down) / (2 * step)))
    return out
