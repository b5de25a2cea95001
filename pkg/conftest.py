"""Shared fixtures: small seeded models and their expansions."""
import numpy as np
import pytest

from expansion import expand_model
from inference import calibrate
from model_io import generate_synthetic_model, parse_layer_specs
import quantizer
from quantizer import QuantConfig, compute_scale, quantize, register_operator


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ("REX_BITS", "REX_ORDER", "REX_BUDGET", "REX_OPERATOR", "REX_OUTLIER_FRAC",
                 "REX_ACT_BITS", "REX_ACC_BITS", "REX_CALIBRATION", "REX_CALIB_SAMPLES",
                 "REX_CALIB_PERCENTILE", "REX_SAMPLES", "REX_SEED", "REX_THREADS", "REX_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlp():
    """3-layer ReLU MLP with biases."""
    shapes = parse_layer_specs("dense:16:24:relu:bias,dense:24:24:relu:bias,dense:24:8:bias")
    return generate_synthetic_model(shapes, seed=7)


@pytest.fixture
def convnet():
    shapes = parse_layer_specs("conv2d:2:4:3:1:6:relu:bias,conv2d:4:3:2:2:4:relu,dense:12:5")
    return generate_synthetic_model(shapes, seed=11)


@pytest.fixture
def weights_only(mlp):
    return expand_model(mlp, QuantConfig(bits=4), order=2)


@pytest.fixture
def calibrated(mlp):
    expanded = expand_model(mlp, QuantConfig(bits=4), order=2)
    return expanded.with_calibration(8, calibrate(mlp, 8, n_samples=256, seed=3))


class PowerOfTwoOperator:
    """Max-abs quantization with every scale rounded up to a power of two."""

    name = "pow2"

    def __init__(self, **_options):
        pass

    def __call__(self, W, cfg):
        scales = compute_scale(W, cfg)
        return quantize(W, np.exp2(np.ceil(np.log2(scales))).astype(np.float32), cfg)

    def lead_residues(self, W, cfg, max_residues=1):
        return [self(W, cfg)]

    def residual(self, W, cfg):
        return self(W, cfg)


@pytest.fixture
def pow2_operator(monkeypatch):
    monkeypatch.setattr(quantizer, "_OPERATORS", dict(quantizer._OPERATORS))
    register_operator(PowerOfTwoOperator.name, PowerOfTwoOperator)
    return PowerOfTwoOperator.name
