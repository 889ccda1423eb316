"""Dense tensors on numpy buffers plus a reverse-mode differentiation tape.

Tensors are immutable after construction and may be shared freely; a Tape
records one graph and is single-threaded. Gradients live in the tape's
store keyed by node id, never on the tensors themselves.
"""

from __future__ import annotations

import numpy as np

from .counting import MAC_COUNTER
from .errors import DimensionError, ParameterError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
ALLOWED_DTYPES = FLOAT_DTYPES + (np.dtype(np.uint32),)


class Tensor:
    """Row-major dense array (f32, f64 or u32), optionally a node on a Tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, dtype=None, tape=None, node_id=None):
        # np.ascontiguousarray would promote rank-0 scalars to rank 1
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in ALLOWED_DTYPES:
            if np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float64)
            elif np.issubdtype(arr.dtype, np.integer):
                # bare python ints default to a float tensor; labels must ask for u32
                arr = arr.astype(np.float64)
            else:
                raise ParameterError(f"unsupported dtype {arr.dtype}; use f32, f64 or u32")
        if any(e < 1 for e in arr.shape):
            raise DimensionError(f"zero extent in shape {tuple(arr.shape)}")
        if node_id is not None and arr.dtype == np.uint32:
            raise ParameterError("u32 tensors do not participate in differentiation")
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


class Param:
    """Named trainable array; `decay` marks eligibility for weight decay."""

    __slots__ = ("data", "decay", "name")

    def __init__(self, data, decay=True, name=""):
        self.data = np.asarray(data)
        if self.data.ndim > 0 and not self.data.flags.c_contiguous:
            self.data = np.ascontiguousarray(self.data)
        self.decay = bool(decay)
        self.name = name

    def __repr__(self):
        return f"Param({self.name or '?'}, shape={self.data.shape})"


class Tape:
    """Ordered record of operations for one differentiation pass.

    Operations are appended in execution order, so inputs always precede
    their consumers; backward() walks the record in reverse, summing
    gradients over fan-out.
    """

    def __init__(self):
        self._entries = []  # (out_id, input_ids, backward_fn)
        self._grads = {}
        self._leaves = {}  # id(source) -> (source, leaf Tensor)
        self._next = 0

    def _new_id(self):
        nid = self._next
        self._next += 1
        return nid

    def _record(self, out_id, input_ids, backward):
        self._entries.append((out_id, input_ids, backward))

    def __len__(self):
        return len(self._entries)

    def var(self, source):
        """Leaf tensor for `source` (Param, unattached Tensor or ndarray).

        Memoized per object, so binding the same parameter twice in one
        pass yields one node and one accumulated gradient.
        """
        key = id(source)
        hit = self._leaves.get(key)
        if hit is not None:
            return hit[1]
        if isinstance(source, Param):
            arr = source.data
        elif isinstance(source, Tensor):
            if source.tape is self:
                return source
            if source.tape is not None:
                raise ParameterError("tensor already belongs to a different tape")
            arr = source.data
        else:
            arr = np.asarray(source)
        leaf = Tensor(arr, tape=self, node_id=self._new_id())
        self._leaves[key] = (source, leaf)
        return leaf

    def backward(self, loss):
        """Reverse accumulation from a scalar loss produced on this tape."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ParameterError("loss was not produced on this tape")
        if loss.data.ndim != 0:
            raise ParameterError(f"loss must be a scalar, got shape {loss.shape}")
        self._grads = {loss.node_id: np.ones((), dtype=loss.data.dtype)}
        for out_id, input_ids, fn in reversed(self._entries):
            g = self._grads.get(out_id)
            if g is None:
                continue
            for nid, gi in zip(input_ids, fn(g)):
                if nid is None or gi is None:
                    continue
                cur = self._grads.get(nid)
                self._grads[nid] = gi if cur is None else cur + gi
        return self._grads

    def grad(self, ref):
        """Gradient array for a leaf previously bound via var(); zeros if unreached."""
        hit = self._leaves.get(id(ref))
        if hit is None:
            if isinstance(ref, Tensor) and ref.tape is self:
                g = self._grads.get(ref.node_id)
                if g is None:
                    g = np.zeros(ref.shape, dtype=ref.data.dtype)
                return g
            if isinstance(ref, Param):
                # the param never took part in this pass
                return np.zeros_like(ref.data)
            raise ParameterError("unknown leaf; bind it with tape.var() first")
        leaf = hit[1]
        g = self._grads.get(leaf.node_id)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.data.dtype)
        return g


def as_tensor(x, like=None, dtype=None):
    if isinstance(x, Tensor):
        return x
    if like is not None and dtype is None and np.isscalar(x):
        dtype = like.data.dtype
    return Tensor(np.asarray(x), dtype=dtype)


def _tape_of(tensors):
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ParameterError("inputs belong to different tapes")
    return tape


def make_op(data, inputs, backward):
    """Wrap an op result, recording it when any input is attached.

    `backward(g)` returns one gradient array (or None) per input, aligned
    with `inputs`; returned arrays must not be mutated afterwards.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    out = Tensor(data, tape=tape, node_id=tape._new_id())
    ids = tuple(t.node_id if isinstance(t, Tensor) else None for t in inputs)
    tape._record(out.node_id, ids, backward)
    return out


def needs_grad(t):
    return isinstance(t, Tensor) and t.node_id is not None


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, e in enumerate(shape) if e == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_float_pair(a, b, opname):
    if a.data.dtype not in FLOAT_DTYPES or b.data.dtype not in FLOAT_DTYPES:
        raise ParameterError(f"{opname} requires floating tensors")
    if a.data.dtype != b.data.dtype:
        raise ParameterError(
            f"{opname} requires matching dtypes, got {a.data.dtype} and {b.data.dtype}"
        )


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_float_pair(a, b, "add")
    ad, bd = a.data, b.data
    na, nb = needs_grad(a), needs_grad(b)

    def bw(g):
        return (
            _unbroadcast(g, ad.shape) if na else None,
            _unbroadcast(g, bd.shape) if nb else None,
        )

    return make_op(ad + bd, (a, b), bw)


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_float_pair(a, b, "sub")
    ad, bd = a.data, b.data
    na, nb = needs_grad(a), needs_grad(b)

    def bw(g):
        return (
            _unbroadcast(g, ad.shape) if na else None,
            _unbroadcast(-g, bd.shape) if nb else None,
        )

    return make_op(ad - bd, (a, b), bw)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_float_pair(a, b, "mul")
    ad, bd = a.data, b.data
    na, nb = needs_grad(a), needs_grad(b)

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if na else None,
            _unbroadcast(g * ad, bd.shape) if nb else None,
        )

    return make_op(ad * bd, (a, b), bw)


def div(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_float_pair(a, b, "div")
    ad, bd = a.data, b.data
    na, nb = needs_grad(a), needs_grad(b)

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if na else None,
            _unbroadcast(-g * ad / (bd * bd), bd.shape) if nb else None,
        )

    return make_op(ad / bd, (a, b), bw)


def neg(a):
    a = as_tensor(a)

    def bw(g):
        return (-g,)

    return make_op(-a.data, (a,), bw)


def scale(a, s):
    """Multiply by a python scalar (kept out of the graph)."""
    a = as_tensor(a)
    s = float(s)

    def bw(g):
        return (g * s,)

    return make_op(a.data * s, (a,), bw)


def add_const(a, c):
    a = as_tensor(a)

    def bw(g):
        return (g,)

    return make_op(a.data + float(c), (a,), bw)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return make_op(np.maximum(a.data, 0), (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out),)

    return make_op(out, (a,), bw)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    ad = a.data
    if axis is None:
        def bw(g):
            return (np.broadcast_to(g, ad.shape).astype(ad.dtype, copy=True),)

        return make_op(ad.sum(), (a,), bw)

    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    for ax in axes:
        if not -ad.ndim <= ax < ad.ndim:
            raise DimensionError(f"axis {ax} out of range for shape {a.shape}")

    def bw(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, tuple(ax % ad.ndim for ax in axes))
        return (np.broadcast_to(gg, ad.shape).astype(ad.dtype, copy=True),)

    return make_op(ad.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean_all(a):
    a = as_tensor(a)
    n = a.size

    def bw(g):
        return (np.full(a.data.shape, g / n, dtype=a.data.dtype),)

    return make_op(a.data.mean(), (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    old = a.data.shape

    def bw(g):
        return (g.reshape(old),)

    return make_op(a.data.reshape(shape), (a,), bw)


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    axis = int(axis)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    axis %= a.ndim
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise DimensionError(
            f"slice [{start}, {start + length}) outside extent {a.shape[axis]}"
        )
    idx = tuple([slice(None)] * axis + [slice(start, start + length)])
    ad = a.data

    def bw(g):
        gx = np.zeros(ad.shape, dtype=ad.dtype)
        gx[idx] = g
        return (gx,)

    return make_op(np.ascontiguousarray(ad[idx]), (a,), bw)


def stack(tensors, axis=0):
    """Stack equal-shaped tensors along a new axis."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ParameterError("stack needs at least one tensor")
    base = ts[0].shape
    for t in ts[1:]:
        if t.shape != base:
            raise DimensionError(f"stack shapes disagree: {base} vs {t.shape}")
    axis = int(axis) % (len(base) + 1)
    needs = [needs_grad(t) for t in ts]

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(
            np.ascontiguousarray(parts[i]) if needs[i] else None for i in range(len(ts))
        )

    return make_op(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw)


def where_mask(mask, a, b):
    """Select `a` where mask is true, else `b`; mask is a constant."""
    marr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    marr = marr.astype(bool)
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_float_pair(a, b, "where_mask")
    ad, bd = a.data, b.data
    na, nb = needs_grad(a), needs_grad(b)
    out = np.where(marr, ad, bd)

    def bw(g):
        return (
            _unbroadcast(np.where(marr, g, 0.0), ad.shape) if na else None,
            _unbroadcast(np.where(marr, 0.0, g), bd.shape) if nb else None,
        )

    return make_op(out, (a, b), bw)


def matmul(a, b):
    """Matrix product over the trailing two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    _check_float_pair(a, b, "matmul")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} x {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    out = ad @ bd
    MAC_COUNTER.add(out.size * ad.shape[-1])
    na, nb = needs_grad(a), needs_grad(b)

    def bw(g):
        ga = gb = None
        if na:
            ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        if nb:
            gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return make_op(out, (a, b), bw)
