"""Gradient-integrity battery: every differentiable operation, every
composed block, and the full pipeline, verified against central finite
differences. Shared by the CLI `gradcheck` subcommand and the test suite."""

from __future__ import annotations

import numpy as np

from . import ops
from .backbone import FramePyramid
from .blocks import DeformableConv, MhsaBlock, attention
from .gradcheck import grad_check, grad_check_params
from .model import ModelConfig, MotionStateSegmenter
from .motion import MotionAligner, pst_branch
from .state import StateAligner
from .tensor import (
    Tensor,
    add,
    div,
    matmul,
    mean_all,
    mul,
    narrow,
    neg,
    permute,
    relu,
    reshape,
    scale,
    sqrt,
    stack,
    sub,
    tensor_sum,
    where_mask,
)


def operation_checks(seed, h=1e-5, tol=1e-4):
    """(name, report) for each differentiable kernel on random small shapes."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) + 3.0
    cube = rng.standard_normal((2, 3, 4))
    mask = rng.random((3, 4)) > 0.5
    m2 = rng.standard_normal((4, 3))
    img = rng.standard_normal((2, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    taps = rng.standard_normal((9, 2, 6))
    pts = rng.uniform(-0.6, 4.4, (6, 2))
    pts = np.where(np.abs(pts - np.round(pts)) < 0.2, pts + 0.25, pts)
    gt = rng.integers(0, 4, (3, 3)).astype(np.uint32)
    logits = rng.standard_normal((4, 3, 3))
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    probe = {
        "map": Tensor(rng.standard_normal((3, 5, 4))),
        "up": Tensor(rng.standard_normal((2, 7, 6))),
        "tap": Tensor(rng.standard_normal((3, 6))),
        "pts": Tensor(rng.standard_normal((2, 6))),
        "tok": Tensor(rng.standard_normal((3, 4))),
        "sq": Tensor(rng.standard_normal((3, 3))),
    }

    cases = [
        ("add", a, lambda x: tensor_sum(mul(add(x, Tensor(b)), probe["tok"]))),
        ("sub", a, lambda x: tensor_sum(mul(sub(x, mul(x, x)), probe["tok"]))),
        ("mul", a, lambda x: tensor_sum(mul(mul(x, Tensor(b)), probe["tok"]))),
        ("div", a, lambda x: tensor_sum(mul(div(x, Tensor(b)), probe["tok"]))),
        ("neg", a, lambda x: tensor_sum(mul(neg(x), probe["tok"]))),
        ("scale", a, lambda x: tensor_sum(mul(scale(x, 1.7), probe["tok"]))),
        ("relu", a, lambda x: tensor_sum(mul(relu(add(x, 0.05)), probe["tok"]))),
        ("sqrt", a, lambda x: tensor_sum(mul(sqrt(add(mul(x, x), 0.5)), probe["tok"]))),
        ("sum_axis", a, lambda x: tensor_sum(mul(x, x.sum(axis=1, keepdims=True)))),
        ("mean", a, lambda x: mean_all(mul(x, x))),
        ("reshape", cube, lambda x: tensor_sum(mul(reshape(x, (6, 4)), reshape(x, (6, 4))))),
        ("permute", cube, lambda x: tensor_sum(mul(permute(x, (2, 0, 1)), permute(x, (2, 0, 1))))),
        ("narrow", cube, lambda x: tensor_sum(mul(narrow(x, 1, 1, 2), narrow(x, 1, 0, 2)))),
        ("stack", a, lambda x: tensor_sum(mul(stack([x, mul(x, x)], 0), stack([mul(x, x), x], 0)))),
        ("where_mask", a, lambda x: tensor_sum(where_mask(mask, mul(x, 2.0), mul(x, x)))),
        ("matmul_lhs", a, lambda x: tensor_sum(mul(matmul(x, Tensor(m2)), probe["sq"]))),
        ("matmul_rhs", m2, lambda x: tensor_sum(mul(matmul(Tensor(a), x), probe["sq"]))),
        ("softmax", a, lambda x: tensor_sum(mul(ops.softmax(x, 1), probe["tok"]))),
        ("layer_norm", a, lambda x: tensor_sum(
            mul(ops.layer_norm(x, Tensor(gamma), Tensor(beta)), probe["tok"]))),
        ("bilinear_resize", img, lambda x: tensor_sum(
            mul(ops.bilinear_resize(x, 7, 6), probe["up"]))),
        ("bilinear_sample_map", img, lambda x: tensor_sum(
            mul(ops.bilinear_sample(x, Tensor(pts)), probe["pts"]))),
        ("bilinear_sample_points", pts, lambda x: tensor_sum(
            mul(ops.bilinear_sample(Tensor(img), x), probe["pts"]))),
        ("conv2d_input", img, lambda x: tensor_sum(
            mul(ops.conv2d(x, Tensor(w), Tensor(bias), padding=1), probe["map"]))),
        ("conv2d_weights", w, lambda x: tensor_sum(
            mul(ops.conv2d(Tensor(img), x, Tensor(bias), padding=1), probe["map"]))),
        ("tap_contract", taps, lambda x: tensor_sum(
            mul(ops.tap_contract(Tensor(w), Tensor(bias), x), probe["tap"]))),
        ("cross_entropy", logits, lambda x: ops.cross_entropy(x, Tensor(gt))),
    ]
    return [(name, grad_check(f, x, h=h, tol=tol)) for name, x, f in cases]


def block_checks(seed, h=1e-5, tol=1e-4):
    """(name, report) for the composed blocks, parameters included."""
    rng = np.random.default_rng(seed)
    results = []

    q = rng.standard_normal((5, 4))
    kv = Tensor(rng.standard_normal((4, 4)))
    probe_q = Tensor(rng.standard_normal((5, 4)))
    results.append(("attention", grad_check(
        lambda t: tensor_sum(mul(attention(t, kv, kv, heads=2), probe_q)), q, h=h, tol=tol)))

    block = MhsaBlock(4, heads=2, rng=rng, dtype=np.float64)
    x_tok = Tensor(rng.standard_normal((6, 4)))
    probe_tok = Tensor(rng.standard_normal((6, 4)))
    results.append(("mhsa_block", grad_check_params(
        lambda tape: tensor_sum(mul(block(tape, x_tok), probe_tok)),
        [p for _, p in block.params()], h=h, tol=tol,
        sample=3, rng=np.random.default_rng(seed + 1))))

    pst_block = MhsaBlock(4, heads=2, rng=rng, dtype=np.float64)
    fmap = Tensor(rng.standard_normal((4, 6, 6)))
    probe_map = Tensor(rng.standard_normal((4, 6, 6)))
    results.append(("pst_branch", grad_check_params(
        lambda tape: tensor_sum(mul(pst_branch(tape, fmap, 2, pst_block), probe_map)),
        [p for _, p in pst_block.params()], h=h, tol=tol,
        sample=3, rng=np.random.default_rng(seed + 2))))

    ma = MotionAligner(4, rng=rng, dtype=np.float64)
    for dc in (ma.align_t2, ma.align_t1):
        dc.offset_b.data = rng.uniform(0.2, 0.45, dc.offset_b.data.shape)
    maps = [Tensor(rng.standard_normal((4, 4, 4))) for _ in range(3)]
    probe_f = Tensor(rng.standard_normal((4, 4, 4)))

    def fuse_loss(tape):
        m2, m1, m0 = ma.att_fuse(tape, *maps)
        return tensor_sum(mul(m0, probe_f)) + tensor_sum(mul(m2, probe_f))

    results.append(("att_fuse", grad_check_params(
        fuse_loss, [p for _, p in ma.params()], h=h, tol=tol,
        sample=2, rng=np.random.default_rng(seed + 3))))

    sa = StateAligner(3, 5, 4, classes=3, rng=rng, dtype=np.float64)
    pyr = FramePyramid(
        Tensor(rng.standard_normal((3, 4, 4))),
        Tensor(rng.standard_normal((5, 4, 4))),
        Tensor(rng.standard_normal((4, 4, 4))),
    )
    m_t = Tensor(rng.standard_normal((4, 4, 4)))
    probe_s = Tensor(rng.standard_normal((4, 4, 4)))

    def state_loss(tape):
        desc, logits = sa(tape, pyr, m_t)
        return tensor_sum(mul(desc, probe_s)) + mean_all(mul(logits, logits))

    results.append(("stage_transformer", grad_check_params(
        state_loss, [p for _, p in sa.params()], h=h, tol=tol,
        sample=2, rng=np.random.default_rng(seed + 4))))

    from .assign import SemanticAssigner, semantic_partition

    asg = SemanticAssigner(4, 3, rng=rng, dtype=np.float64)
    feat = Tensor(rng.standard_normal((4, 4, 4)))
    gt = Tensor(rng.integers(0, 3, (4, 4)).astype(np.uint32))

    def assign_loss(tape):
        regions, logits = asg.region_descriptors(tape, feat)
        _, sims = semantic_partition(feat, regions)
        return ops.cross_entropy(logits, gt) + ops.cross_entropy(sims, gt)

    results.append(("descriptor_heads", grad_check_params(
        assign_loss, [p for _, p in asg.params()], h=h, tol=tol,
        sample=3, rng=np.random.default_rng(seed + 5))))
    return results


def pipeline_check(seed, h=1e-5, tol=1e-3, param_samples=8, coords_per_param=3):
    """Full-pipeline check on a 3-frame 3x16x16 toy in f64.

    Finite differences are probed on a deterministic random subset of the
    parameters (exhaustive sweeps would take hours for no extra signal).
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(widths=(4, 4, 8, 8, 8), heads=2, classes=3, dtype="f64")
    model = MotionStateSegmenter(cfg, seed=seed)
    # fresh offsets sit exactly on the bilinear lattice, where one-sided
    # derivatives differ; probe the sampler at fractional positions instead
    for dc in (model.motion.align_t2, model.motion.align_t1):
        dc.offset_b.data = rng.uniform(0.2, 0.45, dc.offset_b.data.shape)
    frames = [Tensor(rng.standard_normal((3, 16, 16))) for _ in range(3)]
    gt = Tensor(rng.integers(0, 3, (2, 2)).astype(np.uint32))

    def forward(tape):
        return model.forward(tape, frames, gt=gt).loss

    params = model.params()
    picked = [params[i] for i in rng.choice(len(params), param_samples, replace=False)]
    report = grad_check_params(forward, picked, h=h, tol=tol,
                               sample=coords_per_param, rng=np.random.default_rng(seed + 9))

    def frame_loss(t):
        return model.forward(t.tape, [frames[0], frames[1], t], gt=gt).loss

    frame_report = grad_check(frame_loss, frames[2].numpy(), h=h, tol=tol,
                              sample=6, rng=np.random.default_rng(seed + 10))
    report.checked += frame_report.checked
    report.failing += frame_report.failing
    report.max_rel_error = max(report.max_rel_error, frame_report.max_rel_error)
    return report


def run_battery(seeds, tol=1e-4, pipeline_tol=1e-3, h=1e-5, log=None):
    """Run all checks over the given seeds; returns (all_ok, failures)."""
    failures = []
    for seed in seeds:
        rows = operation_checks(seed, h=h, tol=tol) + block_checks(seed, h=h, tol=tol)
        rows.append(("pipeline", pipeline_check(seed, h=h, tol=pipeline_tol)))
        for name, report in rows:
            if log:
                log(f"seed {seed:3d} {name:24s} {report}")
            if not report.ok:
                failures.append((seed, name, report))
    return not failures, failures
