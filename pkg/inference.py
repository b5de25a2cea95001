"""
Forward passes over full-precision and expanded models.

Three engines share one layer kernel (:func:`apply_linear`):

    float      the original float32 weights, computed in float64
    float-sim  expanded weights and (when calibrated) expanded inputs,
               dequantized and summed in float64
    integer    int8 codes, int64 accumulators, one fixed-point multiplier per
               (input order, residue, channel), a single rounding shift per
               output, and integer re-expansion of the next layer's input

Activations travel between layers as (batch, features) with features
flattened channel-major (C, H, W). The final layer's output is returned
without output quantization.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field

from config import RexError
from expansion import expand_input, input_scales, reconstruct
from model_io import ExpandedLayer, ExpandedModel, LayerShape, Model
from quantizer import QuantConfig, qmax, qmin, scale_divisor

logger = logging.getLogger(__name__)

EngineName = Literal["float", "float-sim", "integer"]
CalibrationMethod = Literal["sample", "envelope"]

# Activations with a 1-Lipschitz, sign-preserving integer path
INTEGER_ACTIVATIONS = ("relu", "none")


class CalibrationError(RexError):
    """Raised when activation quantization is requested on an uncalibrated model."""


class ShapeMismatchError(RexError, ValueError):
    """Raised when an input batch does not match the first layer."""


class UnsupportedActivationError(RexError, ValueError):
    """Raised when an engine or bound cannot handle a layer's activation."""


class AccumulatorOverflowError(RexError, OverflowError):
    """Raised when an integer accumulator would leave its signed range."""

    def __init__(self, layer: str, term: str, detail: str) -> None:
        self.layer = layer
        self.term = term
        super().__init__(f"accumulator overflow in {layer}, term {term}: {detail}")


class EngineConfig(BaseModel):
    """Which engine runs and with which integer widths."""

    model_config = ConfigDict(frozen=True)

    engine: EngineName = "float-sim"
    acc_bits: int = Field(32, ge=8, le=62)
    act_bits: Optional[int] = Field(None, ge=2, le=8)
    cutoff: Optional[int] = Field(None, ge=2)


# ---------------------------------------------------------------------------
# Layer kernel
# ---------------------------------------------------------------------------
def im2col(maps: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(N, C, D, D) -> (N, Ho*Ho, C*d*d) patches with valid padding."""
    n, channels = maps.shape[:2]
    windows = sliding_window_view(maps, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    side = windows.shape[2]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, side * side, channels * kernel * kernel)


def apply_linear(shape: LayerShape, x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """x (N, in_features) times a (n_o, fan_in) weight, for dense or conv2d geometry.

    Works for any numeric dtype; integer inputs give exact integer results.
    """
    if shape.kind == "dense":
        return x @ weight.T
    n = x.shape[0]
    maps = x.reshape(n, shape.in_channels, shape.spatial, shape.spatial)
    out = im2col(maps, shape.kernel, shape.stride) @ weight.T
    return out.transpose(0, 2, 1).reshape(n, shape.out_features)


def _activate(y: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(y, 0.0)
    if activation == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * y))
    if activation == "tanh":
        return np.tanh(y)
    return y


def _finish(shape: LayerShape, y: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    if bias is not None:
        n = y.shape[0]
        y = (y.reshape(n, shape.out_channels, -1) + bias.astype(np.float64)[None, :, None]).reshape(n, -1)
    return _activate(y, shape.activation)


def as_batch(X: np.ndarray, shape: LayerShape) -> Tuple[np.ndarray, bool]:
    """Coerce an input to (N, in_features) float64; the flag says a single sample was given."""
    x = np.asarray(X, dtype=np.float64)
    features = shape.in_features
    maps = (shape.in_channels, shape.spatial, shape.spatial)
    if x.ndim == 1 and x.size == features:
        return x.reshape(1, features), True
    if x.ndim == 3 and x.shape == maps:
        return x.reshape(1, features), True
    if x.ndim == 2 and x.shape[1] == features:
        return x, False
    if x.ndim == 4 and x.shape[1:] == maps:
        return x.reshape(x.shape[0], features), False
    raise ShapeMismatchError(
        f"input of shape {x.shape} does not match {shape.name} ({features} features)"
    )


def _unbatch(y: np.ndarray, single: bool) -> np.ndarray:
    return y[0] if single else y


# ---------------------------------------------------------------------------
# Float engines
# ---------------------------------------------------------------------------
def forward_float(model: Model, X: np.ndarray) -> np.ndarray:
    """Reference forward pass in float64 on the stored float32 weights."""
    if not model.layers:
        return np.asarray(X, dtype=np.float64)
    x, single = as_batch(X, model.layers[0].shape)
    for layer in model.layers:
        y = apply_linear(layer.shape, x, layer.weight_matrix().astype(np.float64))
        x = _finish(layer.shape, y, layer.bias)
    return _unbatch(x, single)


def term_pairs(layer: ExpandedLayer, n_input_orders: int, cutoff: int) -> List[Tuple[int, int]]:
    """Admissible (input order, residue index) pairs, residue-major.

    A pair is kept when input order + residue order <= cutoff.
    """
    return [
        (k1, index)
        for index, residue in enumerate(layer.residues)
        for k1 in range(1, n_input_orders + 1)
        if k1 + residue.order <= cutoff
    ]


def pruned_pairs(layer: ExpandedLayer, n_input_orders: int, cutoff: int) -> List[Tuple[int, int]]:
    """The pairs :func:`term_pairs` leaves out."""
    return [
        (k1, index)
        for index, residue in enumerate(layer.residues)
        for k1 in range(1, n_input_orders + 1)
        if k1 + residue.order > cutoff
    ]


def _require_calibration(expanded: ExpandedModel) -> None:
    if expanded.act_bits is not None and expanded.act_scales is None:
        raise CalibrationError("missing calibration: activation bit-width set without scales")


def forward_expanded(
    expanded: ExpandedModel, X: np.ndarray, cutoff: Optional[int] = None
) -> np.ndarray:
    """Float-simulated forward pass of an expanded model.

    Weights-only models multiply by the reconstructed weights. Calibrated models
    also expand every layer input to K orders and sum the admissible
    (input order, residue) products; ``cutoff`` defaults to K + 1.
    """
    if not expanded.layers:
        return np.asarray(X, dtype=np.float64)
    _require_calibration(expanded)
    x, single = as_batch(X, expanded.layers[0].shape)
    K = expanded.order
    cutoff = K + 1 if cutoff is None else cutoff

    if expanded.act_bits is None:
        for layer in expanded.layers:
            weight = reconstruct(layer.residues).reshape(layer.shape.out_channels, -1)
            x = _finish(layer.shape, apply_linear(layer.shape, x, weight), layer.bias)
        return _unbatch(x, single)

    cfg = QuantConfig(bits=expanded.act_bits, granularity="per-tensor")
    for index, layer in enumerate(expanded.layers):
        inputs = expand_input(x, cfg, K, expanded.act_scales[index])
        deq = [q.codes.astype(np.float64) * float(q.scales[0]) for q in inputs.orders]
        y = np.zeros((x.shape[0], layer.shape.out_features))
        for k1, r_index in term_pairs(layer, K, cutoff):
            weight = layer.residues[r_index].values().reshape(layer.shape.out_channels, -1)
            y = y + apply_linear(layer.shape, deq[k1 - 1], weight)
        x = _finish(layer.shape, y, layer.bias)
    return _unbatch(x, single)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------
def unit_norm_inputs(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """``count`` Gaussian rows scaled to unit L2 norm."""
    x = rng.standard_normal((count, dim))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return x / norms


def _peak(x: np.ndarray, percentile: float) -> float:
    if x.size == 0:
        return 0.0
    magnitude = np.abs(x)
    if percentile >= 100.0:
        return float(magnitude.max())
    return float(np.percentile(magnitude, percentile))


def calibrate(
    model: Model,
    act_bits: int = 8,
    method: CalibrationMethod = "sample",
    n_samples: int = 1024,
    seed: int = 0,
    percentile: float = 100.0,
    headroom: float = 1.0 / 16.0,
) -> Tuple[float, ...]:
    """Static order-1 activation scales for every layer input and the final output.

    ``sample`` runs the float model on seeded unit-norm inputs and takes the
    (percentile of the) absolute activation per layer. ``envelope`` uses the
    certified norm envelope r_l of unit-norm inputs, widened by ``headroom``, so
    no input in the certified domain is clipped unless propagated error pushes
    it over.
    """
    divisor = scale_divisor(act_bits)
    if method == "envelope":
        from bounds import activation_envelope  # local import: bounds imports this module

        peaks = [r * (1.0 + headroom) for r in activation_envelope(model)]
    elif method == "sample":
        if model.in_features is None:
            return (1.0,)
        x = unit_norm_inputs(np.random.default_rng(seed), n_samples, model.in_features)
        peaks = []
        for layer in model.layers:
            peaks.append(_peak(x, percentile))
            y = apply_linear(layer.shape, x, layer.weight_matrix().astype(np.float64))
            x = _finish(layer.shape, y, layer.bias)
        peaks.append(_peak(x, percentile))
    else:
        raise CalibrationError(f"unknown calibration method '{method}'")

    scales = []
    for peak in peaks:
        scale = float(np.float32(peak / divisor))
        scales.append(scale if scale > 0 and math.isfinite(scale) else 1.0)
    logger.info("calibrated %d activation scales (%s, a=%d)", len(scales), method, act_bits)
    return tuple(scales)


def calibrate_expanded(
    expanded: ExpandedModel, model: Model, act_bits: int = 8, **options: object
) -> ExpandedModel:
    """``expanded`` with activation scales calibrated on ``model``."""
    return expanded.with_calibration(act_bits, calibrate(model, act_bits, **options))


# ---------------------------------------------------------------------------
# Fixed-point arithmetic
# ---------------------------------------------------------------------------
class FixedPointMultiplier(NamedTuple):
    """scale ~= multiplier * 2^-shift with multiplier in [2^30, 2^31)."""

    multiplier: int
    shift: int


def fixed_point_multiplier(scale: float) -> FixedPointMultiplier:
    if not (scale > 0 and math.isfinite(scale)):
        raise ValueError(f"fixed-point scale must be positive and finite, got {scale}")
    mantissa, exponent = math.frexp(scale)
    multiplier = int(round(mantissa * (1 << 31)))
    shift = 31 - exponent
    if multiplier == 1 << 31:
        multiplier >>= 1
        shift -= 1
    if shift < 0:
        raise ValueError(f"scale {scale} needs a left shift; it must be below 2^31")
    return FixedPointMultiplier(multiplier, shift)


def _round_shift_int(value: int, shift: int) -> int:
    """value / 2^shift rounded half to even, on Python ints."""
    if shift <= 0:
        return value << -shift
    quotient, remainder = divmod(value, 1 << shift)
    half = 1 << (shift - 1)
    if remainder > half or (remainder == half and quotient & 1):
        quotient += 1
    return quotient


_round_shift = np.frompyfunc(_round_shift_int, 2, 1)


def rounding_shift(values: np.ndarray, shift: int) -> np.ndarray:
    """Half-to-even rounding right shift of an integer array, as int64."""
    exact = np.asarray(values).astype(object)
    return _round_shift(exact, shift).astype(np.int64)


def divide_half_even(values: np.ndarray, divisor: int) -> np.ndarray:
    """Integer division rounded half to even (int64)."""
    values = np.asarray(values, dtype=np.int64)
    quotient = np.floor_divide(values, divisor)
    twice = 2 * (values - quotient * divisor)
    up = (twice > divisor) | ((twice == divisor) & (quotient % 2 != 0))
    return quotient + up


def split_orders(Y: np.ndarray, K: int, act_bits: int) -> List[np.ndarray]:
    """Decompose fine-step integers Y into K clipped codes with sum c_k * q^(K-k) ~ Y."""
    divisor = scale_divisor(act_bits)
    lo, hi = qmin(act_bits), qmax(act_bits)
    remainder = np.asarray(Y, dtype=np.int64)
    codes = []
    for k in range(1, K + 1):
        step = divisor ** (K - k)
        c = np.clip(divide_half_even(remainder, step), lo, hi)
        codes.append(c)
        remainder = remainder - c * step
    return codes


# ---------------------------------------------------------------------------
# Integer engine
# ---------------------------------------------------------------------------
def _term_name(k1: int, order: int) -> str:
    return f"I{k1}xR{order}"


def check_accumulators(expanded: ExpandedModel, acc_bits: int = 32, act_bits: Optional[int] = None) -> None:
    """Static worst case fan_in * 2^(b-1) * 2^(a-1) < 2^(acc-1) for every term."""
    bits_a = act_bits or expanded.act_bits
    if bits_a is None:
        raise CalibrationError("the integer engine needs an activation bit-width")
    limit = 1 << (acc_bits - 1)
    for layer in expanded.layers:
        for residue in layer.residues:
            worst = layer.shape.fan_in * (1 << (residue.q.bits - 1)) * (1 << (bits_a - 1))
            if worst >= limit:
                raise AccumulatorOverflowError(
                    layer.name, f"R{residue.order}",
                    f"worst case {worst} does not fit a {acc_bits}-bit accumulator",
                )


@dataclass(frozen=True)
class _Term:
    k1: int
    residue: int
    factors: np.ndarray  # per output feature, Python ints M * 2^(N - n)


def _layer_terms(
    layer: ExpandedLayer, in_scales: Sequence[float], fine_scale: float, pairs: Sequence[Tuple[int, int]]
) -> Tuple[List[_Term], int]:
    per_term = []
    for k1, r_index in pairs:
        channel_scales = layer.residues[r_index].q.channel_scales()
        fixed = [fixed_point_multiplier(in_scales[k1 - 1] * s / fine_scale) for s in channel_scales]
        per_term.append((k1, r_index, fixed))
    common = max((m.shift for _, _, fixed in per_term for m in fixed), default=0)
    spatial = layer.shape.out_spatial ** 2
    terms = []
    for k1, r_index, fixed in per_term:
        factors = np.empty(len(fixed), dtype=object)
        for o, m in enumerate(fixed):
            factors[o] = m.multiplier << (common - m.shift)
        terms.append(_Term(k1, r_index, np.repeat(factors, spatial)))
    return terms, common


def _bias_fused(layer: ExpandedLayer, fine_scale: float, common: int) -> Optional[np.ndarray]:
    """Bias as exact integers on the fused grid fine_scale * 2^-common."""
    if layer.bias is None:
        return None
    fused = np.empty(layer.shape.out_channels, dtype=object)
    for o, b in enumerate(layer.bias.astype(np.float64)):
        fused[o] = round(math.ldexp(float(b) / fine_scale, common))
    return np.repeat(fused, layer.shape.out_spatial ** 2)


def forward_integer(
    expanded: ExpandedModel, X: np.ndarray, config: Optional[EngineConfig] = None
) -> np.ndarray:
    """Integer-only forward pass; returns the final layer's dequantized output.

    Only the first layer's input is quantized from floats. Every (input order,
    residue) product accumulates int8 codes into int64 and is checked against
    ``acc_bits``; the terms of one layer are aligned to a common shift and
    rounded once into integers on a fine step s_{l+1} / q^(K-1), which is then
    split back into K input orders for the next layer.
    The bias joins the fused sum on its fine grid s_{l+1} / q^(K-1) * 2^-shift.
    """
    config = config or EngineConfig(engine="integer")
    if not expanded.layers:
        return np.asarray(X, dtype=np.float64)
    if not expanded.calibrated:
        raise CalibrationError("missing calibration: the integer engine needs activation scales")
    act_bits = config.act_bits or expanded.act_bits
    for layer in expanded.layers:
        if layer.shape.activation not in INTEGER_ACTIVATIONS:
            raise UnsupportedActivationError(
                f"{layer.name}: activation '{layer.shape.activation}' has no integer kernel"
            )
    check_accumulators(expanded, config.acc_bits, act_bits)

    K = expanded.order
    cutoff = K + 1 if config.cutoff is None else config.cutoff
    divisor = scale_divisor(act_bits)
    limit = 1 << (config.acc_bits - 1)

    x, single = as_batch(X, expanded.layers[0].shape)
    first = expand_input(x, QuantConfig(bits=act_bits, granularity="per-tensor"), K, expanded.act_scales[0])
    in_codes = [q.codes.astype(np.int64) for q in first.orders]
    in_scales = first.scales

    out = None
    for index, layer in enumerate(expanded.layers):
        fine_scale = expanded.act_scales[index + 1] / float(divisor) ** (K - 1)
        pairs = term_pairs(layer, K, cutoff)
        terms, common = _layer_terms(layer, in_scales, fine_scale, pairs)
        bias = _bias_fused(layer, fine_scale, common)

        total = np.zeros((x.shape[0], layer.shape.out_features), dtype=object)
        if bias is not None:
            total = total + bias
        for term in terms:
            residue = layer.residues[term.residue]
            weight = residue.q.codes.reshape(layer.shape.out_channels, -1).astype(np.int64)
            acc = apply_linear(layer.shape, in_codes[term.k1 - 1], weight)
            peak = int(np.abs(acc).max(initial=0))
            if peak >= limit:
                raise AccumulatorOverflowError(
                    layer.name, _term_name(term.k1, residue.order),
                    f"|acc| reached {peak}, limit {limit - 1}",
                )
            total = total + acc.astype(object) * term.factors
        Y = rounding_shift(total, common)
        if layer.shape.activation == "relu":
            Y = np.maximum(Y, 0)
        logger.debug("%s: %d terms, common shift %d", layer.name, len(terms), common)

        if index + 1 == len(expanded.layers):
            out = Y.astype(np.float64) * fine_scale
        else:
            in_codes = split_orders(Y, K, act_bits)
            in_scales = input_scales(expanded.act_scales[index + 1], act_bits, K)
    return _unbatch(out, single)


def output_step(expanded: ExpandedModel) -> float:
    """One activation step of the final output: its order-1 scale."""
    if not expanded.calibrated:
        raise CalibrationError("missing calibration")
    return expanded.act_scales[-1]


def run_engine(
    config: EngineConfig, X: np.ndarray, model: Optional[Model] = None,
    expanded: Optional[ExpandedModel] = None,
) -> np.ndarray:
    """Dispatch to the engine named in ``config``."""
    if config.engine == "float":
        if model is None:
            raise ValueError("the float engine needs the full-precision model")
        return forward_float(model, X)
    if expanded is None:
        raise ValueError(f"the {config.engine} engine needs an expanded model")
    if config.engine == "float-sim":
        return forward_expanded(expanded, X, cutoff=config.cutoff)
    return forward_integer(expanded, X, config)


__all__ = [
    "AccumulatorOverflowError",
    "CalibrationError",
    "EngineConfig",
    "FixedPointMultiplier",
    "ShapeMismatchError",
    "UnsupportedActivationError",
    "apply_linear",
    "calibrate",
    "calibrate_expanded",
    "check_accumulators",
    "fixed_point_multiplier",
    "forward_expanded",
    "forward_float",
    "forward_integer",
    "im2col",
    "output_step",
    "run_engine",
    "split_orders",
    "term_pairs",
    "unit_norm_inputs",
]
