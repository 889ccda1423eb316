"""Reusable network blocks: multi-head attention, the residual MHSA block,
and deformable convolution."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError
from . import ops
from .tensor import Param, Tensor, add, matmul, narrow, relu, reshape, permute, scale, stack


def bind(tape, param):
    """Leaf tensor for a Param on `tape`, or a constant when tape is None."""
    return tape.var(param) if tape is not None else Tensor(param.data)


def attention(q, k, v, heads=1, return_weights=False):
    """Multi-head scaled dot-product attention over the trailing two axes.

    q is [..., T, D], k and v are [..., T', D]; projections belong to the
    caller. Returns [..., T, D] (and the softmaxed weight tensor
    [..., heads, T, T'] when asked).
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ParameterError(f"model dim {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(
            f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    dh = d // heads
    lead = len(q.shape) - 2

    def split(t):
        # [..., T, D] -> [..., heads, T, dh]
        bt = reshape(t, (*t.shape[:-1], heads, dh))
        axes = tuple(range(lead)) + (lead + 1, lead, lead + 2)
        return permute(bt, axes)

    qh, kh, vh = split(q), split(k), split(v)
    kt = permute(kh, tuple(range(lead)) + (lead, lead + 2, lead + 1))
    scores = scale(matmul(qh, kt), 1.0 / np.sqrt(dh))
    weights = ops.softmax(scores, axis=-1)
    out = matmul(weights, vh)  # [..., heads, T, dh]
    axes_back = tuple(range(lead)) + (lead + 1, lead, lead + 2)
    merged = reshape(permute(out, axes_back), q.shape)
    if return_weights:
        return merged, weights
    return merged


class MhsaBlock:
    """Pre-norm residual attention block.

    x' = Attention(LN(x)) + x, out = MLP(LN(x')) + x'. Works on [..., T, D]
    token layouts; leading axes are independent sequences sharing the
    parameters. No positional encoding.
    """

    def __init__(self, dim, heads=2, mlp_ratio=2, rng=None, dtype=np.float32,
                 zero_weights=False):
        if dim % heads != 0:
            raise ParameterError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        rng = rng or np.random.default_rng(0)
        hidden = int(mlp_ratio * dim)

        def w(rows, cols):
            if zero_weights:
                return np.zeros((rows, cols), dtype=dtype)
            return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(dtype)

        zeros = lambda n: np.zeros(n, dtype=dtype)
        self.wq, self.wk = Param(w(dim, dim), name="wq"), Param(w(dim, dim), name="wk")
        self.wv, self.wo = Param(w(dim, dim), name="wv"), Param(w(dim, dim), name="wo")
        self.bq, self.bk = Param(zeros(dim), False, "bq"), Param(zeros(dim), False, "bk")
        self.bv, self.bo = Param(zeros(dim), False, "bv"), Param(zeros(dim), False, "bo")
        self.ln1_g = Param(np.ones(dim, dtype=dtype), False, "ln1_g")
        self.ln1_b = Param(zeros(dim), False, "ln1_b")
        self.ln2_g = Param(np.ones(dim, dtype=dtype), False, "ln2_g")
        self.ln2_b = Param(zeros(dim), False, "ln2_b")
        self.w1, self.b1 = Param(w(dim, hidden), name="w1"), Param(zeros(hidden), False, "b1")
        self.w2, self.b2 = Param(w(hidden, dim), name="w2"), Param(zeros(dim), False, "b2")

    def params(self):
        names = ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo",
                 "ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"]
        return [(n, getattr(self, n)) for n in names]

    def _qkv(self, tape, x):
        h = ops.layer_norm(x, bind(tape, self.ln1_g), bind(tape, self.ln1_b))
        q = add(matmul(h, bind(tape, self.wq)), bind(tape, self.bq))
        k = add(matmul(h, bind(tape, self.wk)), bind(tape, self.bk))
        v = add(matmul(h, bind(tape, self.wv)), bind(tape, self.bv))
        return q, k, v

    def __call__(self, tape, x):
        if x.shape[-1] != self.dim:
            raise DimensionError(f"expected feature dim {self.dim}, got {x.shape}")
        q, k, v = self._qkv(tape, x)
        a = attention(q, k, v, self.heads)
        a = add(matmul(a, bind(tape, self.wo)), bind(tape, self.bo))
        x2 = add(a, x)
        h2 = ops.layer_norm(x2, bind(tape, self.ln2_g), bind(tape, self.ln2_b))
        m = relu(add(matmul(h2, bind(tape, self.w1)), bind(tape, self.b1)))
        m = add(matmul(m, bind(tape, self.w2)), bind(tape, self.b2))
        return add(m, x2)

    def attention_weights(self, tape, x):
        """Softmaxed attention matrix for inspection, [..., heads, T, T]."""
        q, k, v = self._qkv(tape, x)
        _, w = attention(q, k, v, self.heads, return_weights=True)
        return w


class DeformableConv:
    """3x3 same-size deformable convolution.

    A zero-initialized 3x3 convolution predicts per-position (row, col)
    offsets for each of the K*K taps (2*K*K channels, shared across input
    channels); tap values are fetched with bilinear sampling, so the whole
    operation is differentiable through weights and offsets. With the
    offsets at zero it reduces to conv2d with the same kernel, bit for bit.
    """

    def __init__(self, cin, cout, k=3, rng=None, dtype=np.float32, identity_init=False):
        if k % 2 == 0:
            raise ParameterError(f"kernel extent must be odd, got {k}")
        rng = rng or np.random.default_rng(0)
        self.k = k
        if identity_init:
            if cin != cout:
                raise ParameterError("identity init needs cin == cout")
            wmain = np.zeros((cout, cin, k, k), dtype=dtype)
            for i in range(cout):
                wmain[i, i, k // 2, k // 2] = 1.0
        else:
            std = np.sqrt(2.0 / (cin * k * k))
            wmain = (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)
        self.w = Param(wmain, name="w")
        self.b = Param(np.zeros(cout, dtype=dtype), False, "b")
        # zero init: training starts from the plain-conv reduction
        self.offset_w = Param(np.zeros((2 * k * k, cin, k, k), dtype=dtype), name="offset_w")
        self.offset_b = Param(np.zeros(2 * k * k, dtype=dtype), False, "offset_b")

    def params(self):
        return [(n, getattr(self, n)) for n in ("w", "b", "offset_w", "offset_b")]

    def predicted_offsets(self, tape, x):
        """Offset map [2*K*K, H, W]; channels 2t, 2t+1 are tap t's (drow, dcol)."""
        return ops.conv2d(
            x, bind(tape, self.offset_w), bind(tape, self.offset_b),
            stride=1, dilation=1, padding=self.k // 2,
        )

    def __call__(self, tape, x):
        k = self.k
        cin, h, w = x.shape
        p = h * w
        off = self.predicted_offsets(tape, x)
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        ys = ys.reshape(-1).astype(x.dtype)
        xs = xs.reshape(-1).astype(x.dtype)
        samples = []
        for tap in range(k * k):
            ky, kx = divmod(tap, k)
            dy = reshape(narrow(off, 0, 2 * tap, 1), (p,))
            dx = reshape(narrow(off, 0, 2 * tap + 1, 1), (p,))
            py = add(dy, Tensor(ys + (ky - k // 2)))
            px = add(dx, Tensor(xs + (kx - k // 2)))
            pts = stack([py, px], axis=1)
            samples.append(ops.bilinear_sample(x, pts))
        taps = stack(samples, axis=0)  # K*K x Cin x P
        out = ops.tap_contract(bind(tape, self.w), bind(tape, self.b), taps)
        return reshape(out, (out.shape[0], h, w))
