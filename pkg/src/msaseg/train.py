"""Training loop: poly learning rate with linear warmup, AdamW updates on
the three-term objective, deterministic given the seed."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .data import augment_sequence, downsample_labels, synthetic_dataset, upsample_labels
from .errors import DivergenceError, ParameterError
from .fileio import coerce, save_checkpoint
from .metrics import confusion_counts, report_from_counts
from .model import ModelConfig, MotionStateSegmenter
from .optim import AdamW
from .tensor import Tape, Tensor, scale


@dataclass
class TrainConfig:
    iterations: int = 2000
    base_lr: float = 1e-3
    warmup_iters: int = 100
    poly_power: float = 0.9
    batch_size: int = 2
    crop_size: int = 64
    seed: int = 0
    classes: int = 4
    height: int = 64
    width: int = 64
    num_sequences: int = 8
    num_objects: int = 3
    augment: bool = False
    eval_every: int = 0
    target_miou: float = 0.0
    use_motion: bool = True
    widths: tuple = (8, 16, 32, 32, 32)
    heads: int = 2
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.warmup_iters >= self.iterations:
            raise ParameterError(
                f"warmup ({self.warmup_iters}) must be shorter than the run "
                f"({self.iterations})"
            )
        if self.poly_power <= 0:
            raise ParameterError(f"poly power must be positive, got {self.poly_power}")
        if self.batch_size < 1 or self.height % 8 or self.width % 8:
            raise ParameterError("batch must be >= 1 and extents divisible by 8")

    def model_config(self):
        return ModelConfig(
            widths=tuple(self.widths), heads=self.heads, mlp_ratio=self.mlp_ratio,
            classes=self.classes, use_motion=self.use_motion,
        )


_FIELD_TYPES = {f.name: (tuple if f.name == "widths" else type(f.default))
                for f in fields(TrainConfig)}


def config_from_items(items, base=None):
    """TrainConfig from key=value pairs; unknown keys are an error."""
    kwargs = {f.name: getattr(base, f.name) for f in fields(TrainConfig)} if base else {}
    for key, value in items.items():
        if key not in _FIELD_TYPES:
            raise ParameterError(f"unknown config key {key!r}")
        kwargs[key] = coerce(value, _FIELD_TYPES[key])
    return TrainConfig(**kwargs)


def lr_schedule(iteration, cfg: TrainConfig):
    """Linear warmup to the base rate, then poly decay to zero."""
    if iteration < 0 or iteration > cfg.iterations:
        raise ParameterError(f"iteration {iteration} outside [0, {cfg.iterations}]")
    if iteration < cfg.warmup_iters:
        return cfg.base_lr * (iteration + 1) / cfg.warmup_iters
    return cfg.base_lr * (1.0 - iteration / cfg.iterations) ** cfg.poly_power


def default_dataset(cfg: TrainConfig):
    return synthetic_dataset(
        cfg.seed, cfg.num_sequences, h=cfg.height, w=cfg.width,
        classes=cfg.classes, num_objects=cfg.num_objects,
    )


def _crop(seq, cfg, rng):
    h, w = seq.gt.shape
    size = cfg.crop_size
    if size >= min(h, w):
        return seq
    top = int(rng.integers(0, (h - size) // 8 + 1)) * 8
    left = int(rng.integers(0, (w - size) // 8 + 1)) * 8
    from .data import SyntheticSequence

    sl = (slice(top, top + size), slice(left, left + size))
    return SyntheticSequence(
        frames=[Tensor(np.ascontiguousarray(f.numpy()[:, sl[0], sl[1]])) for f in seq.frames],
        gt=Tensor(np.ascontiguousarray(seq.gt.numpy()[sl])),
        shifts=list(seq.shifts),
        object_classes=list(seq.object_classes),
        frame_labels=[np.ascontiguousarray(l[sl]) for l in seq.frame_labels],
    )


def evaluate_dataset(model, data, ignore_label=255):
    """Aggregate full-resolution mIoU of the model over a dataset."""
    classes = model.cfg.classes
    inter = np.zeros(classes, dtype=np.int64)
    union = np.zeros(classes, dtype=np.int64)
    correct = valid = 0
    for seq in data:
        pred = upsample_labels(model.predict(seq.frames))
        i, u, c, v = confusion_counts(Tensor(pred), seq.gt, classes, ignore_label)
        inter += i
        union += u
        correct += c
        valid += v
    return report_from_counts(inter, union, correct, valid)


def train(cfg: TrainConfig, data=None, model=None, out_dir=None, log=None):
    """Optimize the full pipeline; returns (model, MetricsReport).

    Deterministic for a fixed config: the batch order is fixed by index and
    every random choice derives from the seed. Aborts with DivergenceError
    on a non-finite loss.
    """
    data = data if data is not None else default_dataset(cfg)
    model = model or MotionStateSegmenter(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(model.params())
    loss_curve = []
    reached = None

    for it in range(cfg.iterations):
        lr = lr_schedule(it, cfg)
        tape = Tape()
        batch_losses = []
        for j in range(cfg.batch_size):
            seq = data[(it * cfg.batch_size + j) % len(data)]
            if cfg.augment:
                seq = augment_sequence(seq, np.random.default_rng((cfg.seed, it, j)))
            seq = _crop(seq, cfg, np.random.default_rng((cfg.seed, it, j, 7)))
            gt_small = Tensor(downsample_labels(seq.gt))
            out = model.forward(tape, seq.frames, gt=gt_small)
            batch_losses.append(out.loss)
        loss = batch_losses[0]
        for extra in batch_losses[1:]:
            loss = loss + extra
        loss = scale(loss, 1.0 / len(batch_losses))
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(it, value)
        loss_curve.append(float(value))
        tape.backward(loss)
        opt.step(tape, lr)

        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            snapshot = evaluate_dataset(model, data)
            if log:
                log(f"iter {it + 1}: loss {value:.4f} train mIoU {snapshot.miou:.4f}")
            if cfg.target_miou and snapshot.miou >= cfg.target_miou:
                reached = snapshot
                break
        elif log and (it + 1) % 100 == 0:
            log(f"iter {it + 1}: loss {value:.4f} lr {lr:.2e}")

    report = reached or evaluate_dataset(model, data)
    report.loss_curve = loss_curve
    if out_dir is not None:
        model_cfg = {
            "widths": tuple(cfg.widths), "heads": cfg.heads,
            "mlp_ratio": cfg.mlp_ratio, "classes": cfg.classes,
            "use_motion": cfg.use_motion,
        }
        save_checkpoint(out_dir, model.named_params(), model_cfg)
    return model, report


def load_model(ckpt_dir):
    """Rebuild a segmenter from a checkpoint directory."""
    from .fileio import load_checkpoint

    arrays, cfg_items = load_checkpoint(ckpt_dir)
    kwargs = {}
    if "widths" in cfg_items:
        kwargs["widths"] = coerce(cfg_items["widths"], tuple)
    for key, kind in (("heads", int), ("mlp_ratio", int), ("classes", int),
                      ("use_motion", bool)):
        if key in cfg_items:
            kwargs[key] = coerce(cfg_items[key], kind)
    model = MotionStateSegmenter(ModelConfig(**kwargs))
    named = dict(model.named_params())
    missing = set(named) - set(arrays)
    if missing:
        raise ParameterError(f"checkpoint lacks parameters: {sorted(missing)[:3]} ...")
    for name, param in named.items():
        arr = arrays[name]
        if arr.shape != param.data.shape:
            raise ParameterError(
                f"checkpoint shape {arr.shape} does not match {name} {param.data.shape}"
            )
        param.data = arr.astype(param.data.dtype)
    return model
