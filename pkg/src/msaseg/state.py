"""State alignment: attention across the stage tokens {F3, F4, F5, M} at
every position, then two convolutions producing the pixel-descriptor map."""

from __future__ import annotations

import numpy as np

from .blocks import MhsaBlock, bind
from .errors import DimensionError, ParameterError
from .ops import conv2d, cross_entropy
from .tensor import Param, narrow, permute, relu, reshape, scale, stack


def _conv_params(cin, cout, k, rng, dtype, name):
    std = np.sqrt(2.0 / (cin * k * k))
    w = Param((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype), name=f"{name}.w")
    b = Param(np.zeros(cout, dtype=dtype), False, f"{name}.b")
    return w, b


class StateAligner:
    """Stage transformer plus descriptor head for the current frame."""

    def __init__(self, c3, c4, c5, classes, heads=2, mlp_ratio=2, rng=None,
                 dtype=np.float32, stage_fuse="f5", zero_attention=False):
        if stage_fuse not in ("f5", "mean"):
            raise ParameterError(f"stage_fuse must be 'f5' or 'mean', got {stage_fuse!r}")
        rng = rng or np.random.default_rng(0)
        self.dim = c5
        self.classes = classes
        self.stage_fuse = stage_fuse
        self.proj3 = _conv_params(c3, c5, 1, rng, dtype, "proj3")
        self.proj4 = _conv_params(c4, c5, 1, rng, dtype, "proj4")
        self.block = MhsaBlock(c5, heads, mlp_ratio, rng, dtype, zero_weights=zero_attention)
        self.head_a = _conv_params(c5, c5, 3, rng, dtype, "head_a")
        self.head_b = _conv_params(c5, c5, 1, rng, dtype, "head_b")
        self.cls = _conv_params(c5, classes, 1, rng, dtype, "cls")

    def params(self):
        out = []
        for pair in (self.proj3, self.proj4, self.head_a, self.head_b, self.cls):
            out += [(pair[0].name, pair[0]), (pair[1].name, pair[1])]
        out += [(f"block.{n}", p) for n, p in self.block.params()]
        return out

    def _stage_tokens(self, tape, f3, f4, f5, m):
        p3 = conv2d(f3, bind(tape, self.proj3[0]), bind(tape, self.proj3[1]))
        p4 = conv2d(f4, bind(tape, self.proj4[0]), bind(tape, self.proj4[1]))
        maps = [p3, p4, f5] + ([m] if m is not None else [])
        c, h, w = f5.shape
        toks = [permute(reshape(x, (x.shape[0], h * w)), (1, 0)) for x in maps]
        return stack(toks, axis=1), (h, w)  # P x S x C

    def stage_transform(self, tape, f3, f4, f5, m):
        """Fused current-frame state map, c5 x h x w.

        The four stage tokens attend to each other independently at every
        position; the output keeps the F5-slot token (or the token mean).
        """
        for x in (f3, f4, m if m is not None else f5):
            if x.shape[1:] != f5.shape[1:]:
                raise DimensionError(
                    f"stage maps must share spatial extents, got {x.shape} vs {f5.shape}"
                )
        seq, (h, w) = self._stage_tokens(tape, f3, f4, f5, m)
        out = self.block(tape, seq)
        n_tokens = out.shape[1]
        if self.stage_fuse == "f5":
            fused = reshape(narrow(out, 1, 2, 1), (h * w, self.dim))
        else:
            fused = scale(out.sum(axis=1), 1.0 / n_tokens)
        return reshape(permute(fused, (1, 0)), (self.dim, h, w))

    def stage_attention_weights(self, tape, f3, f4, f5, m):
        """Per-position stage-attention matrices, P x heads x S x S."""
        seq, _ = self._stage_tokens(tape, f3, f4, f5, m)
        return self.block.attention_weights(tape, seq)

    def pixel_descriptors(self, tape, s):
        """Descriptor map P (c5 x h x w) and its supervision logits (Cls x h x w)."""
        hid = relu(conv2d(s, bind(tape, self.head_a[0]), bind(tape, self.head_a[1]), padding=1))
        desc = conv2d(hid, bind(tape, self.head_b[0]), bind(tape, self.head_b[1]))
        logits = conv2d(desc, bind(tape, self.cls[0]), bind(tape, self.cls[1]))
        return desc, logits

    def __call__(self, tape, pyramid, m):
        s = self.stage_transform(tape, pyramid.f3, pyramid.f4, pyramid.f5, m)
        return self.pixel_descriptors(tape, s)


def descriptor_loss(logits, gt, ignore_label=255):
    """Cross-entropy supervision of the pixel-descriptor head."""
    return cross_entropy(logits, gt, ignore_label)
