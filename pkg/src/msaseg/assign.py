"""Semantic assignment: class-pooled region descriptors from the motion
features, cosine partition of pixel descriptors, and the combined loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import bind
from .errors import DimensionError, ParameterError
from .ops import conv2d, cross_entropy, softmax
from .tensor import (
    Param,
    Tensor,
    add,
    add_const,
    div,
    matmul,
    mul,
    permute,
    relu,
    reshape,
    scale,
    sqrt,
    where_mask,
)


@dataclass
class DescriptorSet:
    """Region descriptors (Cls x C, unit rows), the pixel-descriptor map,
    and the soft-mask logits the regions were pooled with."""

    region: Tensor
    pixel: Tensor
    soft_mask_logits: Tensor

    def __post_init__(self):
        if self.region.shape[0] < 2:
            raise ParameterError(f"need at least 2 classes, got {self.region.shape[0]}")
        if self.region.shape[1] != self.pixel.shape[0]:
            raise DimensionError(
                f"descriptor dims disagree: regions {self.region.shape}, "
                f"pixels {self.pixel.shape}"
            )
        norms = np.linalg.norm(self.region.numpy(), axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ParameterError("region descriptors must be L2-normalized")


class SemanticAssigner:
    """Soft-mask head over motion features plus the pooled region descriptors."""

    def __init__(self, dim, classes, rng=None, dtype=np.float32):
        if classes < 2:
            raise ParameterError(f"need at least 2 classes, got {classes}")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.classes = classes
        std_a = np.sqrt(2.0 / (dim * 9))
        self.head_a_w = Param((rng.standard_normal((dim, dim, 3, 3)) * std_a).astype(dtype),
                              name="head_a.w")
        self.head_a_b = Param(np.zeros(dim, dtype=dtype), False, "head_a.b")
        std_b = np.sqrt(2.0 / dim)
        self.head_b_w = Param((rng.standard_normal((classes, dim, 1, 1)) * std_b).astype(dtype),
                              name="head_b.w")
        self.head_b_b = Param(np.zeros(classes, dtype=dtype), False, "head_b.b")

    def params(self):
        return [(p.name, p) for p in
                (self.head_a_w, self.head_a_b, self.head_b_w, self.head_b_b)]

    def soft_mask(self, tape, m):
        """Class logits (Cls x h x w) from the motion features."""
        hid = relu(conv2d(m, bind(tape, self.head_a_w), bind(tape, self.head_a_b), padding=1))
        return conv2d(hid, bind(tape, self.head_b_w), bind(tape, self.head_b_b))

    def region_descriptors(self, tape, m):
        """Unit-norm region descriptor per class plus the soft-mask logits."""
        logits = self.soft_mask(tape, m)
        c, h, w = m.shape
        p = h * w
        weights = reshape(softmax(logits, axis=0), (self.classes, p))
        feats = permute(reshape(m, (c, p)), (1, 0))  # P x C
        return pooled_region_descriptors(weights, feats), logits

    def __call__(self, tape, m):
        return self.region_descriptors(tape, m)


def pooled_region_descriptors(weights, feats):
    """Weighted spatial pooling into one unit-norm descriptor per class.

    `weights` is Cls x P (nonnegative), `feats` is P x C. Each class pools
    under its weight map, normalized by the weight mass; a class whose
    weights all vanish falls back to the unweighted spatial mean so its
    descriptor stays defined early in training.
    """
    n_pos, c = feats.shape
    pooled = matmul(weights, feats)  # Cls x C
    mass = weights.sum(axis=1, keepdims=True)  # Cls x 1
    degenerate = mass.numpy() < 1e-8
    r = div(pooled, where_mask(degenerate, Tensor(np.ones_like(mass.numpy())), mass))
    if degenerate.any():
        mean_row = reshape(scale(feats.sum(axis=0), 1.0 / n_pos), (1, c))
        r = where_mask(degenerate, mean_row, r)
    norm = sqrt(add_const((r * r).sum(axis=1, keepdims=True), 1e-24))
    return div(r, norm)


def semantic_partition(pixel_desc, regions):
    """Assign every pixel to the most similar region descriptor.

    Returns the u32 class map (ties break to the lowest class index) and the
    raw similarity logits Cls x h x w; pixel magnitudes are deliberately not
    divided out, which leaves the argmax unchanged.
    """
    if regions.ndim != 2 or pixel_desc.ndim != 3:
        raise DimensionError(
            f"expected Cls x C regions and C x h x w pixels, got {regions.shape}, {pixel_desc.shape}"
        )
    if regions.shape[1] != pixel_desc.shape[0]:
        raise DimensionError(
            f"descriptor dims disagree: {regions.shape} vs {pixel_desc.shape}"
        )
    norms = np.linalg.norm(regions.numpy(), axis=1)
    if np.abs(norms - 1.0).max() > 1e-3:
        raise ParameterError("region descriptors must be unit-normalized")
    c, h, w = pixel_desc.shape
    sims = matmul(regions, reshape(pixel_desc, (c, h * w)))
    sim_logits = reshape(sims, (regions.shape[0], h, w))
    class_map = Tensor(np.argmax(sim_logits.numpy(), axis=0).astype(np.uint32))
    return class_map, sim_logits


def soft_mask_loss(logits, gt, ignore_label=255):
    """Cross-entropy supervision of the region soft mask."""
    return cross_entropy(logits, gt, ignore_label)


def partition_loss(sim_logits, gt, ignore_label=255):
    """Cross-entropy on the similarity logits of the final partition."""
    return cross_entropy(sim_logits, gt, ignore_label)


def total_loss(pixel_term, mask_term, partition_term):
    """Unweighted sum of the three objective terms."""
    return add(add(pixel_term, mask_term), partition_term)
