import numpy as np
import pytest

from msaseg.blocks import MhsaBlock
from msaseg.errors import DimensionError
from msaseg.gradcheck import grad_check
from msaseg.motion import MotionAligner, pst_branch, _to_tokens
from msaseg.ops import bilinear_resize
from msaseg.tensor import Tape, Tensor, mul, tensor_sum


def rand_map(seed, c=8, h=4, w=4):
    return Tensor(np.random.default_rng(seed).standard_normal((c, h, w)))


def test_pst_ds1_reduces_to_block_on_tokens():
    block = MhsaBlock(8, heads=2, rng=np.random.default_rng(0), dtype=np.float64)
    f = rand_map(1)
    out = pst_branch(None, f, 1, block).numpy()
    tokens = block(None, _to_tokens(f)).numpy()
    np.testing.assert_array_equal(out, tokens.T.reshape(8, 4, 4))


@pytest.mark.parametrize("ds", [2, 4])
def test_pst_output_extents_match_input(ds):
    block = MhsaBlock(8, heads=2, rng=np.random.default_rng(2), dtype=np.float64)
    f = rand_map(3, h=8, w=8)
    assert pst_branch(None, f, ds, block).shape == (8, 8, 8)


def test_pst_odd_extents_round_up_and_return():
    block = MhsaBlock(4, heads=2, rng=np.random.default_rng(4), dtype=np.float64)
    f = rand_map(5, c=4, h=5, w=7)
    assert pst_branch(None, f, 2, block).shape == (4, 5, 7)


def test_pst_zero_weights_is_pure_resampling():
    block = MhsaBlock(8, heads=2, dtype=np.float64, zero_weights=True)
    f = rand_map(6, h=6, w=6)
    out = pst_branch(None, f, 2, block).numpy()
    expect = bilinear_resize(bilinear_resize(f, 3, 3), 6, 6).numpy()
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_att_fuse_identity_configuration():
    ma = MotionAligner(8, rng=np.random.default_rng(7), dtype=np.float64,
                       zero_attention=True, identity_dcn=True)
    x = rand_map(8)
    m2, m1, m0 = ma.att_fuse(None, x, x, x)
    for m in (m2, m1, m0):
        np.testing.assert_allclose(m.numpy(), x.numpy(), atol=1e-12)


def test_att_fuse_shapes_and_weights():
    ma = MotionAligner(8, rng=np.random.default_rng(9), dtype=np.float64)
    a, b, c = rand_map(10), rand_map(11), rand_map(12)
    (m2, m1, m0), w = ma.att_fuse(None, a, b, c, return_weights=True)
    assert m2.shape == m1.shape == m0.shape == (8, 4, 4)
    # per-position temporal attention over exactly 3 tokens
    assert w.shape == (16, 2, 3, 3)
    np.testing.assert_allclose(w.numpy().sum(axis=-1), 1.0, atol=1e-6)


def test_att_fuse_shape_mismatch():
    ma = MotionAligner(8, rng=np.random.default_rng(13), dtype=np.float64)
    with pytest.raises(DimensionError):
        ma.att_fuse(None, rand_map(14), rand_map(15, h=6), rand_map(16))


def test_motion_align_shape_contract():
    ma = MotionAligner(8, rng=np.random.default_rng(17), dtype=np.float64)
    outs = ma(None, rand_map(18), rand_map(19), rand_map(20))
    assert all(m.shape == (8, 4, 4) for m in outs)


def test_motion_align_zero_inputs_zero_outputs():
    ma = MotionAligner(8, rng=np.random.default_rng(21), dtype=np.float64)
    z = Tensor(np.zeros((8, 4, 4)))
    for m in ma(None, z, z, z):
        np.testing.assert_array_equal(m.numpy(), 0.0)


def test_zero_init_reduction_identity():
    # zero attention/MLP weights, zero offsets, identity main kernels:
    # the pipeline degenerates to the pure resampling paths
    ma = MotionAligner(4, rng=np.random.default_rng(22), dtype=np.float64,
                       zero_attention=True, identity_dcn=True)
    x = rand_map(23, c=4, h=8, w=8)
    m2, m1, m0 = ma(None, x, x, x)
    r4 = bilinear_resize(bilinear_resize(x, 2, 2), 8, 8).numpy()
    r2 = bilinear_resize(bilinear_resize(x, 4, 4), 8, 8).numpy()
    assert np.abs(m2.numpy() - r4).max() < 1e-10
    assert np.abs(m1.numpy() - r2).max() < 1e-10
    assert np.abs(m0.numpy() - x.numpy()).max() < 1e-10


def test_loss_on_current_frame_reaches_all_inputs():
    ma = MotionAligner(4, rng=np.random.default_rng(24), dtype=np.float64)
    rng = np.random.default_rng(25)
    tape = Tape()
    frames = [tape.var(rng.standard_normal((4, 4, 4))) for _ in range(3)]
    _, _, m0 = ma(tape, *frames)
    tape.backward(tensor_sum(mul(m0, m0)))
    for f in frames:
        assert np.abs(tape.grad(f)).max() > 0


def test_full_motion_gradcheck():
    ma = MotionAligner(4, rng=np.random.default_rng(26), dtype=np.float64)
    probe = Tensor(np.random.default_rng(27).standard_normal((4, 4, 4)))
    base = np.random.default_rng(28).standard_normal((4, 4, 4))
    fixed1 = Tensor(np.random.default_rng(29).standard_normal((4, 4, 4)))
    fixed2 = Tensor(np.random.default_rng(30).standard_normal((4, 4, 4)))

    def f(t):
        _, _, m0 = ma(t.tape, fixed2, fixed1, t)
        return tensor_sum(mul(m0, probe))

    report = grad_check(f, base, sample=24, rng=np.random.default_rng(31))
    assert report.ok, str(report)
