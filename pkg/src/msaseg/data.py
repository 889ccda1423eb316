"""Synthetic 3-frame video clips: colored shapes on a background, rigidly
translated between frames, with the current-frame label map as ground
truth. A designated class pair shares its appearance and differs only in
motion, so single-frame models cannot separate the two."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .tensor import Tensor

IGNORE_LABEL = 255


def class_color(cls):
    """Deterministic RGB color for a class, stable across sequences."""
    return np.random.default_rng(1009 + int(cls)).uniform(0.15, 0.85, 3)


@dataclass
class SyntheticSequence:
    frames: list  # 3 Tensors, each 3 x H x W f32 (t-2, t-1, t)
    gt: Tensor  # H x W u32, current frame
    shifts: list  # per-object (dy, dx) applied per frame step
    object_classes: list
    frame_labels: list = field(default_factory=list)  # 3 label maps (internal)


def _draw_object(labels, image, cls, mask):
    labels[mask] = cls
    color = class_color(cls)
    for ch in range(3):
        image[ch][mask] = color[ch]


def _object_mask(kind, h, w, top, left, oh, ow):
    mask = np.zeros((h, w), dtype=bool)
    if kind == "rect":
        mask[top : top + oh, left : left + ow] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = top + oh / 2.0, left + ow / 2.0
        mask[((yy + 0.5 - cy) / (oh / 2.0)) ** 2 + ((xx + 0.5 - cx) / (ow / 2.0)) ** 2 <= 1.0] = True
    return mask


def _snap(value, grid):
    return int(round(value / grid) * grid)


def synthetic_sequence(seed, h, w, classes, num_objects, grid=8,
                       shapes=("rect",), noise=0.02, ambiguous_pair=True,
                       shift_scale=None, class_cycle=None):
    """Deterministic 3-frame clip; geometry snapped to `grid` pixels.

    With `ambiguous_pair`, classes 1 and 2 share a color and a fixed object
    size: class 1 objects stay put while class 2 objects move two grid
    cells per frame, so only temporal context can tell them apart. Raises
    when an object cannot be placed inside the frame across all three
    frames. `class_cycle` overrides the default round-robin class order.
    """
    if h % 8 or w % 8:
        raise ParameterError(f"extents must be divisible by 8, got {h}x{w}")
    if classes < 2:
        raise ParameterError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    shift_scale = 2 * grid if shift_scale is None else shift_scale

    cycle = class_cycle or tuple(range(1, classes))
    order = [cycle[i % len(cycle)] for i in range(num_objects)]
    specs = []
    for cls in order:
        kind = shapes[rng.integers(0, len(shapes))]
        in_pair = ambiguous_pair and classes >= 3 and cls in (1, 2)
        if in_pair:
            # appearance carries no class signal inside the pair
            oh = ow = 3 * grid
        else:
            oh = _snap(rng.integers(2 * grid, 4 * grid + 1), grid)
            ow = _snap(rng.integers(2 * grid, 4 * grid + 1), grid)
        # placement must leave travel room for `margin` across all 3 frames
        if in_pair:
            # both pair classes obey the same travel margins, so position
            # carries no class signal either; class 1 just does not move
            axis = rng.integers(0, 2)
            sign = 1 if rng.random() < 0.5 else -1
            margin = (sign * shift_scale, 0) if axis == 0 else (0, sign * shift_scale)
            shift = (0, 0) if cls == 1 else margin
        else:
            shift = margin = (
                int(rng.integers(-1, 2)) * grid,
                int(rng.integers(-1, 2)) * grid,
            )
        placed = False
        for _ in range(100):
            top = _snap(rng.integers(0, max(h - oh, 1)), grid)
            left = _snap(rng.integers(0, max(w - ow, 1)), grid)
            ok = True
            for k in range(3):
                ty = top - (2 - k) * margin[0]
                tx = left - (2 - k) * margin[1]
                if ty < 0 or tx < 0 or ty + oh > h or tx + ow > w:
                    ok = False
                    break
            if ok:
                placed = True
                break
        if not placed:
            raise ParameterError(
                f"cannot place a {oh}x{ow} object with shift {shift} in {h}x{w}"
            )
        specs.append((cls, kind, top, left, oh, ow, shift))

    frames, frame_labels = [], []
    bg = class_color(0)
    for k in range(3):
        labels = np.zeros((h, w), dtype=np.uint32)
        image = np.stack([np.full((h, w), c) for c in bg])
        for cls, kind, top, left, oh, ow, shift in specs:
            ty = top - (2 - k) * shift[0]
            tx = left - (2 - k) * shift[1]
            _draw_object(labels, image, cls, _object_mask(kind, h, w, ty, tx, oh, ow))
        if noise:
            image = image + rng.uniform(-noise, noise, image.shape)
        frames.append(Tensor(np.clip(image, 0.0, 1.0).astype(np.float32)))
        frame_labels.append(labels)

    return SyntheticSequence(
        frames=frames,
        gt=Tensor(frame_labels[2]),
        shifts=[s[-1] for s in specs],
        object_classes=[s[0] for s in specs],
        frame_labels=frame_labels,
    )


def synthetic_dataset(base_seed, count, **kwargs):
    return [synthetic_sequence(base_seed + i, **kwargs) for i in range(count)]


def downsample_labels(labels, factor=8):
    """Nearest-neighbor label reduction, sampling each cell near its center."""
    arr = labels.numpy() if isinstance(labels, Tensor) else np.asarray(labels)
    off = factor // 2
    return np.ascontiguousarray(arr[off::factor, off::factor])


def upsample_labels(labels, factor=8):
    arr = labels.numpy() if isinstance(labels, Tensor) else np.asarray(labels)
    return np.repeat(np.repeat(arr, factor, axis=0), factor, axis=1)


def flip_sequence(seq):
    """Mirror frames and labels horizontally (column shifts change sign)."""
    frames = [Tensor(np.ascontiguousarray(f.numpy()[:, :, ::-1])) for f in seq.frames]
    return SyntheticSequence(
        frames=frames,
        gt=Tensor(np.ascontiguousarray(seq.gt.numpy()[:, ::-1])),
        shifts=[(dy, -dx) for dy, dx in seq.shifts],
        object_classes=list(seq.object_classes),
        frame_labels=[np.ascontiguousarray(l[:, ::-1]) for l in seq.frame_labels],
    )


def _nearest_indices(n_in, n_out):
    return np.clip(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), 0, n_in - 1)


def resize_sequence(seq, out_h, out_w):
    """Bilinear frames, nearest-neighbor labels; extents must stay /8."""
    from .ops import bilinear_resize

    if out_h % 8 or out_w % 8:
        raise ParameterError(f"resized extents must stay divisible by 8, got {out_h}x{out_w}")
    frames = [
        Tensor(bilinear_resize(f, out_h, out_w).numpy().astype(np.float32))
        for f in seq.frames
    ]
    yi = _nearest_indices(seq.gt.shape[0], out_h)
    xi = _nearest_indices(seq.gt.shape[1], out_w)
    return SyntheticSequence(
        frames=frames,
        gt=Tensor(np.ascontiguousarray(seq.gt.numpy()[yi][:, xi])),
        shifts=list(seq.shifts),
        object_classes=list(seq.object_classes),
        frame_labels=[np.ascontiguousarray(l[yi][:, xi]) for l in seq.frame_labels],
    )


def augment_sequence(seq, rng, scales=(0.875, 1.0, 1.125)):
    """Seeded flip/resize augmentation."""
    if rng.random() < 0.5:
        seq = flip_sequence(seq)
    scale = scales[rng.integers(0, len(scales))]
    if scale != 1.0:
        h, w = seq.gt.shape
        seq = resize_sequence(seq, round(h * scale / 8) * 8, round(w * scale / 8) * 8)
    return seq
