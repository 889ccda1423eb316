import numpy as np
import pytest

from msaseg.errors import DimensionError, ParameterError
from msaseg.tensor import (
    Param,
    Tape,
    Tensor,
    add,
    matmul,
    mul,
    narrow,
    permute,
    reshape,
    stack,
    tensor_sum,
    where_mask,
)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).numpy(), b.numpy())


def test_matmul_hand_case():
    out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.numpy(), [[11.0]])


def test_matmul_zeros_annihilate():
    z = Tensor(np.zeros((2, 3)))
    b = Tensor(np.arange(6, dtype=np.float64).reshape(3, 2))
    np.testing.assert_array_equal(matmul(z, b).numpy(), np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_associativity_against_oracle():
    rng = np.random.default_rng(7)
    a = Tensor(rng.uniform(-1, 1, (4, 5)))
    b = Tensor(rng.uniform(-1, 1, (5, 6)))
    c = Tensor(rng.uniform(-1, 1, (6, 3)))
    left = matmul(matmul(a, b), c).numpy()
    right = matmul(a, matmul(b, c)).numpy()
    assert np.abs(left - right).max() < 1e-10


def test_dtype_mismatch_rejected():
    a = Tensor(np.zeros((2, 2), dtype=np.float32))
    b = Tensor(np.zeros((2, 2), dtype=np.float64))
    with pytest.raises(ParameterError):
        matmul(a, b)
    with pytest.raises(ParameterError):
        add(a, b)


def test_zero_extent_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 0)))


def test_u32_never_differentiable():
    tape = Tape()
    labels = Tensor(np.array([[1, 2]], dtype=np.uint32))
    assert labels.node_id is None
    with pytest.raises(ParameterError):
        tape.var(labels)


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.var(np.arange(6, dtype=np.float64).reshape(2, 3))
    tape.backward(tensor_sum(x))
    np.testing.assert_array_equal(tape.grad(x), np.ones((2, 3)))


def test_backward_sum_of_squares():
    tape = Tape()
    arr = np.arange(1.0, 5.0).reshape(2, 2)
    x = tape.var(arr)
    tape.backward(tensor_sum(mul(x, x)))
    np.testing.assert_allclose(tape.grad(x), 2 * arr)


def test_backward_accumulates_over_fanout():
    tape = Tape()
    x = tape.var(np.ones(3))
    y = add(x, x)
    tape.backward(tensor_sum(y))
    np.testing.assert_array_equal(tape.grad(x), 2 * np.ones(3))


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.var(np.ones(3))
    with pytest.raises(ParameterError):
        tape.backward(add(x, x))


def test_backward_rejects_foreign_loss():
    t1, t2 = Tape(), Tape()
    x = t1.var(np.ones(2))
    loss = tensor_sum(x)
    with pytest.raises(ParameterError):
        t2.backward(loss)


def test_mixing_tapes_is_an_error():
    t1, t2 = Tape(), Tape()
    a = t1.var(np.ones(2))
    b = t2.var(np.ones(2))
    with pytest.raises(ParameterError):
        add(a, b)


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.var(np.ones(3))
    unused = tape.var(np.ones(4))
    tape.backward(tensor_sum(x))
    np.testing.assert_array_equal(tape.grad(unused), np.zeros(4))


def test_var_memoizes_per_object():
    tape = Tape()
    p = Param(np.ones(2), name="p")
    a, b = tape.var(p), tape.var(p)
    assert a is b
    tape.backward(tensor_sum(add(a, b)))
    np.testing.assert_array_equal(tape.grad(p), 2 * np.ones(2))


def test_tape_records_in_topological_order():
    tape = Tape()
    x = tape.var(np.ones(2))
    y = add(x, x)
    z = mul(y, y)
    tensor_sum(z)
    seen = set(l[1].node_id for l in tape._leaves.values())
    for out_id, input_ids, _ in tape._entries:
        for nid in input_ids:
            if nid is not None:
                assert nid in seen
        seen.add(out_id)


def test_broadcast_add_gradient_reduces():
    tape = Tape()
    x = tape.var(np.ones((3, 4)))
    bias = tape.var(np.zeros(4))
    tape.backward(tensor_sum(add(x, bias)))
    np.testing.assert_array_equal(tape.grad(bias), 3 * np.ones(4))


def test_structural_ops_roundtrip_gradients():
    tape = Tape()
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    x = tape.var(arr)
    y = permute(reshape(x, (6, 4)), (1, 0))
    z = narrow(y, 0, 1, 2)
    tape.backward(tensor_sum(z))
    g = tape.grad(x)
    expect = np.zeros((6, 4))
    expect[:, 1:3] = 1.0
    np.testing.assert_array_equal(g, expect.reshape(2, 3, 4))


def test_stack_and_where_mask():
    tape = Tape()
    a = tape.var(np.ones(3))
    b = tape.var(2 * np.ones(3))
    s = stack([a, b], axis=0)
    assert s.shape == (2, 3)
    mask = np.array([True, False, True])
    w = where_mask(mask, narrow(s, 0, 0, 1).reshape(3), narrow(s, 0, 1, 1).reshape(3))
    np.testing.assert_array_equal(w.numpy(), [1.0, 2.0, 1.0])
    tape.backward(tensor_sum(w))
    np.testing.assert_array_equal(tape.grad(a), [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(tape.grad(b), [0.0, 1.0, 0.0])
