"""Toy 5-stage convolutional frame encoder.

Spatial stride 2 in the first three stages, stride 1 with dilations 2 and
4 in the last two, so every exported stage lives at 1/8 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import bind
from .errors import DimensionError, ParameterError
from .ops import conv2d
from .tensor import Param, relu

STAGE_STRIDES = (2, 2, 2, 1, 1)
STAGE_DILATIONS = (1, 1, 1, 2, 4)


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = (8, 16, 32, 32, 32)
    strides: tuple = STAGE_STRIDES
    dilations: tuple = STAGE_DILATIONS
    blocks_per_stage: int = 1

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ParameterError(f"need 5 stage widths, got {self.widths}")
        if tuple(self.strides) != STAGE_STRIDES:
            raise ParameterError(f"stage strides are fixed at {STAGE_STRIDES}")
        if tuple(self.dilations) != STAGE_DILATIONS:
            raise ParameterError(f"stage dilations are fixed at {STAGE_DILATIONS}")
        if self.blocks_per_stage < 1:
            raise ParameterError("blocks_per_stage must be >= 1")


@dataclass
class FramePyramid:
    """Stage features of one frame, all at 1/8 of the input extent."""

    f3: object
    f4: object
    f5: object

    def __post_init__(self):
        s = self.f3.shape[1:]
        if self.f4.shape[1:] != s or self.f5.shape[1:] != s:
            raise DimensionError(
                f"pyramid stages disagree spatially: {self.f3.shape} {self.f4.shape} {self.f5.shape}"
            )


def receptive_field(cfg: BackboneConfig, stage: int) -> int:
    """Closed-form receptive-field extent of `stage` (1-based) on the input."""
    rf = 1
    jump = 1
    for i in range(stage):
        for j in range(cfg.blocks_per_stage):
            rf += 2 * cfg.dilations[i] * jump  # kernel 3: (k-1) * dilation * jump
            if j == 0:
                jump *= cfg.strides[i]  # only the first block of a stage strides
    return rf


class Backbone:
    """Five conv+ReLU stages shared across frames; exports stages 3 to 5."""

    def __init__(self, cfg: BackboneConfig = None, rng=None, dtype=np.float32):
        self.cfg = cfg or BackboneConfig()
        rng = rng or np.random.default_rng(0)
        self.stages = []  # list of per-stage [(w, b), ...] blocks
        cin = 3
        for i, cout in enumerate(self.cfg.widths):
            blocks = []
            for j in range(self.cfg.blocks_per_stage):
                std = np.sqrt(2.0 / (cin * 9))
                w = Param((rng.standard_normal((cout, cin, 3, 3)) * std).astype(dtype),
                          name=f"stage{i + 1}.{j}.w")
                b = Param(np.zeros(cout, dtype=dtype), False, f"stage{i + 1}.{j}.b")
                blocks.append((w, b))
                cin = cout
            self.stages.append(blocks)

    def params(self):
        out = []
        for blocks in self.stages:
            for w, b in blocks:
                out.append((w.name, w))
                out.append((b.name, b))
        return out

    def extract_pyramid(self, tape, frame) -> FramePyramid:
        """Stage features for one 3 x H x W frame (H, W divisible by 8)."""
        if frame.ndim != 3 or frame.shape[0] != 3:
            raise DimensionError(f"expected a 3 x H x W frame, got {frame.shape}")
        _, h, w = frame.shape
        if h % 8 or w % 8:
            raise ParameterError(f"frame extents must be divisible by 8, got {h}x{w}")
        feats = []
        x = frame
        for i, blocks in enumerate(self.stages):
            stride = self.cfg.strides[i]
            dil = self.cfg.dilations[i]
            for j, (wp, bp) in enumerate(blocks):
                s = stride if j == 0 else 1
                x = relu(conv2d(x, bind(tape, wp), bind(tape, bp),
                                stride=s, dilation=dil, padding=dil))
            feats.append(x)
        return FramePyramid(f3=feats[2], f4=feats[3], f5=feats[4])
