import numpy as np
import pytest

from msaseg.data import downsample_labels, synthetic_sequence
from msaseg.errors import ParameterError
from msaseg.model import ModelConfig, MotionStateSegmenter
from msaseg.tensor import Tape, Tensor


@pytest.fixture(scope="module")
def seq():
    return synthetic_sequence(0, h=32, w=32, classes=4, num_objects=2, grid=4)


def small_model(**kw):
    cfg = ModelConfig(widths=(4, 8, 16, 16, 16), classes=4, **kw)
    return MotionStateSegmenter(cfg, seed=3)


def test_forward_shapes_and_losses(seq):
    model = small_model()
    gt = Tensor(downsample_labels(seq.gt, 8))
    tape = Tape()
    out = model.forward(tape, seq.frames, gt=gt)
    assert out.class_map.shape == (4, 4)
    assert out.class_map.dtype == np.uint32
    assert out.sim_logits.shape == (4, 4, 4)
    assert out.pixel_desc.shape == (16, 4, 4)
    assert out.pd_logits.shape == (4, 4, 4)
    assert out.soft_mask_logits.shape == (4, 4, 4)
    assert out.regions.shape == (4, 16)
    for term in (out.loss, out.loss_pixel, out.loss_mask, out.loss_partition):
        assert np.isfinite(term.item())
    np.testing.assert_allclose(
        out.loss.item(),
        out.loss_pixel.item() + out.loss_mask.item() + out.loss_partition.item(),
        rtol=1e-6,
    )
    tape.backward(out.loss)
    grads = [tape.grad(p) for p in model.params()]
    assert any(np.abs(g).max() > 0 for g in grads)


def test_predict_matches_forward(seq):
    model = small_model()
    out = model.forward(None, seq.frames)
    np.testing.assert_array_equal(model.predict(seq.frames), out.class_map.numpy())


def test_same_seed_same_outputs(seq):
    a = small_model().predict(seq.frames)
    b = small_model().predict(seq.frames)
    np.testing.assert_array_equal(a, b)


def test_param_names_are_unique():
    model = small_model()
    names = [n for n, _ in model.named_params()]
    assert len(names) == len(set(names))
    assert any(n.startswith("backbone.") for n in names)
    assert any(n.startswith("motion.") for n in names)
    assert any(n.startswith("state.") for n in names)
    assert any(n.startswith("assign.") for n in names)


def test_single_frame_variant(seq):
    model = small_model(use_motion=False)
    names = [n for n, _ in model.named_params()]
    assert not any(n.startswith("motion.") for n in names)
    gt = Tensor(downsample_labels(seq.gt, 8))
    tape = Tape()
    out = model.forward(tape, seq.frames, gt=gt)
    assert np.isfinite(out.loss.item())
    assert out.class_map.shape == (4, 4)


def test_frame_count_is_validated(seq):
    model = small_model()
    with pytest.raises(ParameterError):
        model.forward(None, seq.frames[:2])


def test_region_descriptors_unit_norm(seq):
    model = small_model()
    out = model.forward(None, seq.frames)
    np.testing.assert_allclose(np.linalg.norm(out.regions.numpy(), axis=1), 1.0, atol=1e-5)
