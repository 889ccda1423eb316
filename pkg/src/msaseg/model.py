"""End-to-end segmenter: shared backbone, motion and state alignment,
semantic assignment, and the three-term objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assign import SemanticAssigner, partition_loss, semantic_partition, soft_mask_loss, total_loss
from .backbone import Backbone, BackboneConfig
from .errors import DimensionError, ParameterError
from .motion import MotionAligner
from .state import StateAligner, descriptor_loss
from .tensor import Tape, Tensor

DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (8, 16, 32, 32, 32)
    heads: int = 2
    mlp_ratio: int = 2
    classes: int = 4
    use_motion: bool = True
    stage_fuse: str = "f5"
    dtype: str = "f32"

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ParameterError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.classes}")


@dataclass
class ForwardResult:
    class_map: Tensor
    sim_logits: Tensor
    pixel_desc: Tensor
    pd_logits: Tensor
    soft_mask_logits: Tensor
    regions: Tensor
    motion_feature: Tensor
    loss: Tensor = None
    loss_pixel: Tensor = None
    loss_mask: Tensor = None
    loss_partition: Tensor = None


class MotionStateSegmenter:
    """Three frames in, a per-pixel class partition (at stride 8) out."""

    def __init__(self, cfg: ModelConfig = None, seed=0):
        self.cfg = cfg or ModelConfig()
        dtype = DTYPES[self.cfg.dtype]
        rng = np.random.default_rng(seed)
        widths = tuple(self.cfg.widths)
        c3, c4, c5 = widths[2], widths[3], widths[4]
        self.backbone = Backbone(BackboneConfig(widths=widths), rng=rng, dtype=dtype)
        self.motion = None
        if self.cfg.use_motion:
            self.motion = MotionAligner(c5, self.cfg.heads, self.cfg.mlp_ratio,
                                        rng=rng, dtype=dtype)
        self.state = StateAligner(c3, c4, c5, self.cfg.classes, self.cfg.heads,
                                  self.cfg.mlp_ratio, rng=rng, dtype=dtype,
                                  stage_fuse=self.cfg.stage_fuse)
        self.assign = SemanticAssigner(c5, self.cfg.classes, rng=rng, dtype=dtype)
        # cross-module contract: pixel descriptors and region descriptors
        # must live in the same space
        if self.state.dim != self.assign.dim:
            raise DimensionError("descriptor dimensions disagree between branches")

    def named_params(self):
        out = []
        out += [(f"backbone.{n}", p) for n, p in self.backbone.params()]
        if self.motion is not None:
            out += [(f"motion.{n}", p) for n, p in self.motion.params()]
        out += [(f"state.{n}", p) for n, p in self.state.params()]
        out += [(f"assign.{n}", p) for n, p in self.assign.params()]
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def forward(self, tape, frames, gt=None, ignore_label=255) -> ForwardResult:
        """Run the pipeline on 3 frames; with `gt` (u32 at stride 8) adds losses.

        Without motion alignment only the current frame is consumed and the
        stage tokens reduce to {F3, F4, F5}.
        """
        if len(frames) != 3:
            raise ParameterError(f"expected 3 frames, got {len(frames)}")
        if self.motion is not None:
            pyramids = [self.backbone.extract_pyramid(tape, f) for f in frames]
            cur = pyramids[2]
            _, _, m_t = self.motion(tape, pyramids[0].f5, pyramids[1].f5, cur.f5)
            region_source = m_t
        else:
            cur = self.backbone.extract_pyramid(tape, frames[2])
            m_t = None
            region_source = cur.f5

        s = self.state.stage_transform(tape, cur.f3, cur.f4, cur.f5, m_t)
        pixel_desc, pd_logits = self.state.pixel_descriptors(tape, s)
        regions, soft_logits = self.assign.region_descriptors(tape, region_source)
        class_map, sim_logits = semantic_partition(pixel_desc, regions)

        result = ForwardResult(
            class_map=class_map,
            sim_logits=sim_logits,
            pixel_desc=pixel_desc,
            pd_logits=pd_logits,
            soft_mask_logits=soft_logits,
            regions=regions,
            motion_feature=m_t if m_t is not None else region_source,
        )
        if gt is not None:
            result.loss_pixel = descriptor_loss(pd_logits, gt, ignore_label)
            result.loss_mask = soft_mask_loss(soft_logits, gt, ignore_label)
            result.loss_partition = partition_loss(sim_logits, gt, ignore_label)
            result.loss = total_loss(result.loss_pixel, result.loss_mask,
                                     result.loss_partition)
        return result

    def predict(self, frames):
        """Class map (u32 numpy array at stride 8) without building a tape."""
        return self.forward(None, frames).class_map.numpy()
