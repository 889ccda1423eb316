import numpy as np
import pytest

from msaseg import ops
from msaseg.errors import ParameterError
from msaseg.gradcheck import grad_check, grad_check_params
from msaseg.tensor import (
    Param,
    Tensor,
    add,
    div,
    make_op,
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

SEEDS = range(20)


def test_linear_function_is_exact():
    report = grad_check(lambda x: tensor_sum(x), np.ones((3, 3)))
    assert report.ok and report.max_rel_error < 1e-10


def test_wrong_backward_rule_is_caught():
    def bad_square(x):
        # deliberately wrong local rule: claims d(x^2)/dx = x
        return make_op(x.data * x.data, (x,), lambda g: (g * x.data,))

    report = grad_check(lambda x: tensor_sum(bad_square(x)), np.full((2, 2), 3.0))
    assert not report.ok
    assert report.max_rel_error > 1e-4
    assert report.failing


def test_grad_check_rejects_f32():
    with pytest.raises(ParameterError):
        grad_check(lambda x: tensor_sum(x), Tensor(np.ones(2, dtype=np.float32)))


def test_grad_check_sampling_is_deterministic():
    f = lambda x: tensor_sum(mul(x, x))
    r1 = grad_check(f, np.arange(1.0, 26.0).reshape(5, 5), sample=5,
                    rng=np.random.default_rng(9))
    r2 = grad_check(f, np.arange(1.0, 26.0).reshape(5, 5), sample=5,
                    rng=np.random.default_rng(9))
    assert r1.checked == 5 and r1.max_rel_error == r2.max_rel_error


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_ops(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) + 3.0  # denominator kept away from zero
    checks = [
        lambda x: tensor_sum(mul(add(x, Tensor(b)), x)),
        lambda x: tensor_sum(sub(x, mul(x, x))),
        lambda x: tensor_sum(div(x, Tensor(b))),
        lambda x: tensor_sum(div(Tensor(b), add(mul(x, x), 1.0))),
        lambda x: tensor_sum(neg(scale(x, 1.7))),
        lambda x: tensor_sum(relu(add(x, 0.05))),
        lambda x: tensor_sum(sqrt(add(mul(x, x), 0.5))),
        lambda x: mean_all(mul(x, x)),
        lambda x: tensor_sum(mul(x, x.sum(axis=1, keepdims=True))),
    ]
    for f in checks:
        report = grad_check(f, a)
        assert report.ok, str(report)


@pytest.mark.parametrize("seed", SEEDS)
def test_structural_ops(seed):
    rng = np.random.default_rng(seed + 100)
    a = rng.standard_normal((2, 3, 4))
    mask = rng.random((2, 3, 4)) > 0.5
    checks = [
        lambda x: tensor_sum(mul(reshape(x, (6, 4)), reshape(x, (6, 4)))),
        lambda x: tensor_sum(mul(permute(x, (2, 0, 1)), 2.0)),
        lambda x: tensor_sum(mul(narrow(x, 1, 1, 2), narrow(x, 1, 0, 2))),
        lambda x: tensor_sum(stack([x, mul(x, x)], axis=1)),
        lambda x: tensor_sum(where_mask(mask, mul(x, 2.0), mul(x, x))),
    ]
    for f in checks:
        report = grad_check(f, a)
        assert report.ok, str(report)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_both_sides(seed):
    rng = np.random.default_rng(seed + 200)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    assert grad_check(lambda x: tensor_sum(matmul(x, Tensor(b))), a).ok
    assert grad_check(lambda x: tensor_sum(matmul(Tensor(a), x)), b).ok
    batched = rng.standard_normal((2, 3, 4))
    assert grad_check(lambda x: tensor_sum(matmul(x, Tensor(b))), batched).ok


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_and_layer_norm(seed):
    rng = np.random.default_rng(seed + 300)
    x = rng.standard_normal((3, 5))
    g = rng.standard_normal(5)
    b = rng.standard_normal(5)
    probe = Tensor(rng.standard_normal((3, 5)))
    assert grad_check(lambda t: tensor_sum(mul(ops.softmax(t, 1), probe)), x).ok
    assert grad_check(lambda t: tensor_sum(mul(ops.softmax(t, 0), probe)), x).ok
    f_ln = lambda t: tensor_sum(mul(ops.layer_norm(t, Tensor(g), Tensor(b)), probe))
    assert grad_check(f_ln, x).ok
    f_gamma = lambda t: tensor_sum(mul(ops.layer_norm(Tensor(x), t, Tensor(b)), probe))
    assert grad_check(f_gamma, g).ok


@pytest.mark.parametrize("seed", SEEDS)
def test_resize_and_sample(seed):
    rng = np.random.default_rng(seed + 400)
    x = rng.standard_normal((2, 5, 4))
    probe_up = Tensor(rng.standard_normal((2, 7, 9)))
    probe_dn = Tensor(rng.standard_normal((2, 3, 2)))
    assert grad_check(lambda t: tensor_sum(mul(ops.bilinear_resize(t, 7, 9), probe_up)), x).ok
    assert grad_check(lambda t: tensor_sum(mul(ops.bilinear_resize(t, 3, 2), probe_dn)), x).ok

    # fractional points away from the integer-lattice kinks
    pts = rng.uniform(-0.6, 4.4, (6, 2))
    pts = np.where(np.abs(pts - np.round(pts)) < 0.2, pts + 0.25, pts)
    probe_s = Tensor(rng.standard_normal((2, 6)))
    assert grad_check(lambda t: tensor_sum(mul(ops.bilinear_sample(t, Tensor(pts)), probe_s)), x).ok
    assert grad_check(
        lambda p: tensor_sum(mul(ops.bilinear_sample(Tensor(x), p), probe_s)), pts
    ).ok


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_tap_contract_and_cross_entropy(seed):
    rng = np.random.default_rng(seed + 500)
    x = rng.standard_normal((2, 6, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    probe = Tensor(rng.standard_normal((3, 6, 5)))

    def through_conv(t, wt, bt):
        return tensor_sum(mul(ops.conv2d(t, wt, bt, padding=1), probe))

    assert grad_check(lambda t: through_conv(t, Tensor(w), Tensor(b)), x).ok
    assert grad_check(lambda t: through_conv(Tensor(x), t, Tensor(b)), w).ok
    assert grad_check(lambda t: through_conv(Tensor(x), Tensor(w), t), b).ok

    s = rng.standard_normal((9, 2, 7))
    probe_tc = Tensor(rng.standard_normal((3, 7)))
    assert grad_check(
        lambda t: tensor_sum(mul(ops.tap_contract(Tensor(w), Tensor(b), t), probe_tc)), s
    ).ok
    assert grad_check(
        lambda t: tensor_sum(mul(ops.tap_contract(t, Tensor(b), Tensor(s)), probe_tc)), w
    ).ok

    logits = rng.standard_normal((4, 3, 3))
    gt = rng.integers(0, 4, (3, 3)).astype(np.uint32)
    gt[0, 0] = 255
    assert grad_check(lambda t: ops.cross_entropy(t, Tensor(gt)), logits).ok


def test_grad_check_params_form():
    rng = np.random.default_rng(7)
    p = Param(rng.standard_normal((3, 3)), name="weight")
    x = Tensor(rng.standard_normal((2, 3)))

    def forward(tape):
        w = tape.var(p) if tape is not None else Tensor(p.data)
        return tensor_sum(mul(matmul(x, w), matmul(x, w)))

    report = grad_check_params(forward, [p])
    assert report.ok and report.checked == 9
