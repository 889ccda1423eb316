import numpy as np
import pytest

from msaseg.backbone import Backbone, BackboneConfig, receptive_field
from msaseg.errors import ParameterError
from msaseg.tensor import Tape, Tensor, tensor_sum


def test_shape_contract():
    bb = Backbone(dtype=np.float64)
    frame = Tensor(np.random.default_rng(0).standard_normal((3, 32, 32)))
    pyr = bb.extract_pyramid(None, frame)
    assert pyr.f3.shape == (32, 4, 4)
    assert pyr.f4.shape == (32, 4, 4)
    assert pyr.f5.shape == (32, 4, 4)


def test_zero_input_zero_biases_gives_zero_pyramid():
    bb = Backbone(dtype=np.float64)
    pyr = bb.extract_pyramid(None, Tensor(np.zeros((3, 16, 16))))
    for f in (pyr.f3, pyr.f4, pyr.f5):
        np.testing.assert_array_equal(f.numpy(), 0.0)


def test_shared_parameters_are_deterministic():
    bb = Backbone(dtype=np.float64)
    frame = np.random.default_rng(1).standard_normal((3, 16, 16))
    a = bb.extract_pyramid(None, Tensor(frame)).f5.numpy()
    b = bb.extract_pyramid(None, Tensor(frame.copy())).f5.numpy()
    np.testing.assert_array_equal(a, b)


def test_extent_must_divide_by_8():
    bb = Backbone()
    with pytest.raises(ParameterError):
        bb.extract_pyramid(None, Tensor(np.zeros((3, 20, 16), dtype=np.float32)))


def test_receptive_field_growth():
    cfg = BackboneConfig()
    assert receptive_field(cfg, 4) == 47
    assert receptive_field(cfg, 5) == 111
    assert receptive_field(cfg, 5) > receptive_field(cfg, 4)


def test_config_is_pinned():
    with pytest.raises(ParameterError):
        BackboneConfig(strides=(2, 2, 2, 2, 1))
    with pytest.raises(ParameterError):
        BackboneConfig(dilations=(1, 1, 1, 1, 1))
    with pytest.raises(ParameterError):
        BackboneConfig(widths=(8, 16, 32))


def test_gradient_reaches_first_stage():
    bb = Backbone(dtype=np.float64)
    tape = Tape()
    frame = Tensor(np.random.default_rng(2).standard_normal((3, 16, 16)))
    pyr = bb.extract_pyramid(tape, frame)
    tape.backward(tensor_sum(pyr.f5 * pyr.f5))
    g = tape.grad(bb.stages[0][0][0])
    assert np.abs(g).max() > 0
