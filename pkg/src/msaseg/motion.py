"""Motion alignment: per-frame pyramid spatial attention, deformable
alignment of the two earlier frames, and per-position temporal attention
over the three resulting tokens."""

from __future__ import annotations

import math

import numpy as np

from .blocks import DeformableConv, MhsaBlock
from .errors import DimensionError
from .ops import bilinear_resize
from .tensor import narrow, permute, reshape, stack

DS_FACTORS = (4, 2, 1)  # frames t-2, t-1, t


def _to_tokens(x):
    # C x h x w -> (h*w) x C
    c = x.shape[0]
    return permute(reshape(x, (c, x.shape[1] * x.shape[2])), (1, 0))


def _to_map(tokens, h, w):
    # (h*w) x C -> C x h x w
    c = tokens.shape[1]
    return reshape(permute(tokens, (1, 0)), (c, h, w))


def pst_branch(tape, f, ds_factor, block):
    """Spatial attention at a coarser sampling rate: DS -> MHSA -> US.

    ds_factor 1 skips both resamplings; odd extents round up on the way
    down and return to the exact input extents on the way up.
    """
    c, h, w = f.shape
    x = f
    if ds_factor > 1:
        x = bilinear_resize(x, math.ceil(h / ds_factor), math.ceil(w / ds_factor))
    hs, ws = x.shape[1], x.shape[2]
    tokens = block(tape, _to_tokens(x))
    x = _to_map(tokens, hs, ws)
    if ds_factor > 1:
        x = bilinear_resize(x, h, w)
    return x


class MotionAligner:
    """Decoupled space/time transformer over three consecutive frame features."""

    def __init__(self, dim, heads=2, mlp_ratio=2, rng=None, dtype=np.float32,
                 zero_attention=False, identity_dcn=False):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        mk = lambda: MhsaBlock(dim, heads, mlp_ratio, rng, dtype, zero_weights=zero_attention)
        # independent parameters per frame branch
        self.pst_blocks = {"t2": mk(), "t1": mk(), "t": mk()}
        self.align_t2 = DeformableConv(dim, dim, rng=rng, dtype=dtype, identity_init=identity_dcn)
        self.align_t1 = DeformableConv(dim, dim, rng=rng, dtype=dtype, identity_init=identity_dcn)
        self.temporal = mk()

    def params(self):
        out = []
        for tag, block in self.pst_blocks.items():
            out += [(f"pst_{tag}.{n}", p) for n, p in block.params()]
        out += [(f"align_t2.{n}", p) for n, p in self.align_t2.params()]
        out += [(f"align_t1.{n}", p) for n, p in self.align_t1.params()]
        out += [(f"temporal.{n}", p) for n, p in self.temporal.params()]
        return out

    def att_fuse(self, tape, p2, p1, p0, return_weights=False):
        """Align the two earlier maps, then attend across the 3 per-position tokens.

        The temporal attention runs independently at every spatial position
        with shared parameters; sequence length is exactly 3.
        """
        if p2.shape != p1.shape or p1.shape != p0.shape:
            raise DimensionError(
                f"fused maps must share a shape: {p2.shape} {p1.shape} {p0.shape}"
            )
        c, h, w = p0.shape
        a2 = self.align_t2(tape, p2)
        a1 = self.align_t1(tape, p1)
        seq = stack([_to_tokens(a2), _to_tokens(a1), _to_tokens(p0)], axis=1)  # P x 3 x C
        out = self.temporal(tape, seq)
        maps = tuple(
            _to_map(reshape(narrow(out, 1, i, 1), (h * w, c)), h, w) for i in range(3)
        )
        if return_weights:
            return maps, self.temporal.attention_weights(tape, seq)
        return maps

    def __call__(self, tape, f5_t2, f5_t1, f5_t):
        """Motion features (M_t2, M_t1, M_t), each shaped like the inputs."""
        if f5_t2.shape != f5_t1.shape or f5_t1.shape != f5_t.shape:
            raise DimensionError(
                f"frame features must share a shape: {f5_t2.shape} {f5_t1.shape} {f5_t.shape}"
            )
        p2 = pst_branch(tape, f5_t2, DS_FACTORS[0], self.pst_blocks["t2"])
        p1 = pst_branch(tape, f5_t1, DS_FACTORS[1], self.pst_blocks["t1"])
        p0 = pst_branch(tape, f5_t, DS_FACTORS[2], self.pst_blocks["t"])
        return self.att_fuse(tape, p2, p1, p0)

    motion_align = __call__
