"""
Error bounds for expanded models and the measurements that check them.

Per weight tensor, the certified per-channel bound after the last kept order
is min(s_last / 2, q^-(m-1) * s_1 / 2) with q = 2^(b-1) - 1 and m the number of
orders kept for that channel. The ``literal_*`` helpers give the tighter
closed forms that additionally assume the scales themselves shrink by q per
order; they are reported next to the certified values but never used to
certify anything.

Across layers (ReLU or identity activations only) the bound propagates as

    r_0 = 1                         r_l = sigma_l * r_{l-1} + |b_l|
    d_0 = 0                         d_l = (sigma_l + e_l)(d_{l-1} + eps_l) + e_l * r_{l-1} + p_l

where sigma_l bounds the layer's operator norm, e_l the operator norm of the
weight error, eps_l the input-quantization error (zero for weights-only
models) and p_l the contribution of pruned (input order, residue) pairs. The
network bound is U = d_L for inputs of unit L2 norm.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Any, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from config import RexError
from expansion import expand_weights, expand_weights_sparse, input_scales, reconstruct
from inference import (
    UnsupportedActivationError,
    forward_expanded,
    forward_float,
    pruned_pairs,
    unit_norm_inputs,
)
from model_io import ExpandedModel, LayerShape, Model, Residue
from quantizer import BINARY_GRID, QuantConfig, qmax, scale_divisor

logger = logging.getLogger(__name__)

POWER_ITERATIONS = 1000
POWER_TOLERANCE = 1e-8
POWER_SEED = 0x5EED
SAMPLE_CHUNK = 1000

BOUNDED_ACTIVATIONS = ("relu", "none")

BoundMode = Literal["spectral", "analytic"]


class UnsupportedBitWidthError(RexError, ValueError):
    """Raised when a closed-form bound is asked for a grid it does not cover."""


class SoundnessViolation(RexError):
    """Raised when a measured error exceeds its certified bound."""


# ---------------------------------------------------------------------------
# Per-tensor bounds
# ---------------------------------------------------------------------------
def _check_bits(bits: int) -> None:
    if bits < 2:
        raise UnsupportedBitWidthError(
            f"closed-form bounds need b >= 2 (the 1-bit grid has no geometric decay), got b={bits}"
        )


def _order_scales(scales_per_order: Sequence[Any], K: int) -> List[np.ndarray]:
    if K < 1 or len(scales_per_order) < K:
        raise ValueError(f"need scales for {K} orders, got {len(scales_per_order)}")
    arrays = [np.atleast_1d(np.asarray(s, dtype=np.float64)) for s in scales_per_order[:K]]
    width = max(a.size for a in arrays)
    return [np.broadcast_to(a, (width,)).copy() for a in arrays]


def lemma1_bound(scales_per_order: Sequence[Any], bits: int, K: int) -> np.ndarray:
    """Certified per-channel max error of a dense K-order expansion."""
    _check_bits(bits)
    scales = _order_scales(scales_per_order, K)
    return np.minimum(scales[K - 1] / 2.0, scales[0] / 2.0 / float(qmax(bits)) ** (K - 1))


def literal_lemma1_bound(scales_per_order: Sequence[Any], bits: int, K: int) -> np.ndarray:
    """q^-(K-1) * s_K / 2, the closed form that assumes geometric scale decay."""
    _check_bits(bits)
    scales = _order_scales(scales_per_order, K)
    return scales[K - 1] / 2.0 / float(qmax(bits)) ** (K - 1)


def lemma2_bound(
    scales_per_order: Sequence[Any], masks_per_order: Sequence[Optional[np.ndarray]], bits: int, K: int
) -> np.ndarray:
    """Certified per-channel max error of a sparse expansion.

    ``masks_per_order[k]`` lists the channels kept at order k + 1 (None =
    dense; order 1 is always dense). A channel's bound uses its last kept
    order and how many orders it kept.
    """
    _check_bits(bits)
    scales = _order_scales(scales_per_order, K)
    n = scales[0].size
    last = scales[0].copy()
    kept_orders = np.ones(n)
    for k in range(1, K):
        mask = masks_per_order[k] if k < len(masks_per_order) else None
        kept = np.ones(n, dtype=bool)
        if mask is not None:
            kept = np.zeros(n, dtype=bool)
            kept[np.asarray(mask, dtype=np.int64)] = True
        last[kept] = scales[k][kept]
        kept_orders[kept] += 1
    return np.minimum(last / 2.0, scales[0] / 2.0 / float(qmax(bits)) ** (kept_orders - 1))


def literal_lemma2_bound(
    residual_norms: np.ndarray, mask: Optional[np.ndarray], scales: Any, bits: int, K: int
) -> np.ndarray:
    """max(norms over the mask) * s_K / (2 q^K), with the max over nothing (or all zeros) taken as 1."""
    _check_bits(bits)
    norms = np.asarray(residual_norms, dtype=np.float64)
    picked = norms if mask is None else norms[np.asarray(mask, dtype=np.int64)]
    peak = float(picked.max()) if picked.size else 0.0
    factor = peak if peak > 0 else 1.0
    s = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    return factor * s / (2.0 * float(qmax(bits)) ** K)


def certified_channel_bound(residues: Sequence[Residue]) -> Optional[np.ndarray]:
    """Certified per-channel bound of a stored residue list, or None when no closed form applies.

    Binary residues (outlier split) and 1-bit grids have no closed form. A
    per-tensor scale is shared across channels, so with sparse masks only the
    last-kept-scale term is certified.
    """
    bits = residues[0].q.bits
    if bits < 2 or any(r.q.grid == BINARY_GRID or r.q.bits != bits for r in residues):
        return None
    scales = [r.q.channel_scales() for r in residues]
    masks = [r.mask for r in residues]
    shared = residues[0].q.scales.size == 1 and residues[0].q.n_channels > 1
    if shared and any(m is not None for m in masks):
        last = scales[0].copy()
        for s, m in zip(scales[1:], masks[1:]):
            if m is None:
                last = s.copy()
            else:
                last[m] = s[m]
        return last / 2.0
    return lemma2_bound(scales, masks, bits, len(residues))


def measured_channel_error(weight: np.ndarray, residues: Sequence[Residue]) -> np.ndarray:
    """max |W - W_hat| per output channel."""
    rows = np.asarray(weight, dtype=np.float64).reshape(residues[0].q.n_channels, -1)
    approx = reconstruct(residues).reshape(rows.shape)
    return np.abs(rows - approx).max(axis=1, initial=0.0)


# ---------------------------------------------------------------------------
# Spectral norms
# ---------------------------------------------------------------------------
class SpectralEstimate(NamedTuple):
    """Power-iteration result: the estimate and a bound from its eigen-residual."""

    value: float
    upper: float
    converged: bool
    iterations: int


def spectral_norm_estimate(
    matrix: np.ndarray, max_iters: int = POWER_ITERATIONS, tol: float = POWER_TOLERANCE
) -> SpectralEstimate:
    """Largest singular value by power iteration on A^T A from a fixed seed.

    Stops when |A^T A x - lambda x| <= tol * lambda. Without convergence the
    Frobenius norm is returned instead (and a warning logged), which is still
    an upper bound.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.size == 0 or not np.any(a):
        return SpectralEstimate(0.0, 0.0, True, 0)
    x = np.random.default_rng(POWER_SEED).standard_normal(a.shape[1])
    x /= np.linalg.norm(x)
    for iteration in range(1, max_iters + 1):
        z = a.T @ (a @ x)
        lam = float(x @ z)
        if lam <= 0.0:
            break
        residual = float(np.linalg.norm(z - lam * x))
        if residual <= tol * lam:
            return SpectralEstimate(math.sqrt(lam), math.sqrt(lam + residual), True, iteration)
        x = z / np.linalg.norm(z)
    frobenius = float(np.linalg.norm(a))
    logger.warning(
        "power iteration did not converge on a %dx%d matrix; using the Frobenius norm",
        a.shape[0], a.shape[1],
    )
    return SpectralEstimate(frobenius, frobenius, False, max_iters)


def spectral_norm(matrix: np.ndarray, max_iters: int = POWER_ITERATIONS, tol: float = POWER_TOLERANCE) -> float:
    return spectral_norm_estimate(matrix, max_iters, tol).value


def operator_norm(shape: LayerShape, matrix: np.ndarray, mode: BoundMode = "spectral") -> Tuple[float, bool]:
    """Upper bound on the layer operator norm of a (n_o, fan_in) matrix.

    Convolutions multiply the matrix bound by the patch overlap ceil(d / s).
    """
    a = np.asarray(matrix, dtype=np.float64)
    frobenius = float(np.linalg.norm(a))
    if mode == "analytic":
        return shape.overlap * frobenius, True
    if mode != "spectral":
        raise ValueError(f"unknown bound mode '{mode}'")
    estimate = spectral_norm_estimate(a)
    return shape.overlap * min(estimate.upper, frobenius), estimate.converged


def _bias_norm(shape: LayerShape, bias: Optional[np.ndarray]) -> float:
    if bias is None:
        return 0.0
    return float(np.linalg.norm(bias.astype(np.float64))) * shape.out_spatial


def _check_activation(shape: LayerShape) -> None:
    if shape.activation not in BOUNDED_ACTIVATIONS:
        raise UnsupportedActivationError(
            f"{shape.name}: no error bound for activation '{shape.activation}' "
            f"(supported: {', '.join(BOUNDED_ACTIVATIONS)})"
        )


def activation_envelope(model: Model, mode: BoundMode = "spectral") -> List[float]:
    """Norm bounds r_0..r_L of every layer input and the output, for unit-norm inputs."""
    envelope = [1.0]
    for layer in model.layers:
        _check_activation(layer.shape)
        sigma, _ = operator_norm(layer.shape, layer.weight_matrix(), mode)
        envelope.append(sigma * envelope[-1] + _bias_norm(layer.shape, layer.bias))
    return envelope


# ---------------------------------------------------------------------------
# Network bound
# ---------------------------------------------------------------------------
class LayerBound(BaseModel):
    name: str
    sigma: float
    e: float
    kappa: int = 1
    u_max: float
    u_literal_max: Optional[float] = None
    certified_u: bool = True
    input_error: float = 0.0
    pruned: float = 0.0
    envelope: float
    delta: float
    converged: bool = True


class BoundReport(BaseModel):
    """Certified bound, its literal counterpart and (optionally) the measured error."""

    mode: str = "spectral"
    bits: int
    order: int
    act_bits: Optional[int] = None
    U: float
    U_literal: float
    layers: List[LayerBound] = Field(default_factory=list)
    U_empirical: Optional[float] = None
    argmax_agreement: Optional[float] = None
    samples: int = 0
    seed: Optional[int] = None

    @property
    def sound(self) -> bool:
        return self.U_empirical is None or self.U_empirical <= self.U


def _check_pair(model: Model, expanded: ExpandedModel) -> None:
    if len(model.layers) != len(expanded.layers):
        raise ValueError(
            f"model has {len(model.layers)} layers, expansion has {len(expanded.layers)}"
        )
    for spec, layer in zip(model.layers, expanded.layers):
        if spec.weight.shape != layer.shape.weight_shape:
            raise ValueError(f"{spec.name}: expansion does not match the model weights")


def _literal_u(residues: Sequence[Residue]) -> Optional[float]:
    bits = residues[0].q.bits
    if bits < 2 or any(r.q.grid == BINARY_GRID for r in residues):
        return None
    values = literal_lemma1_bound([r.q.channel_scales() for r in residues], bits, len(residues))
    return float(values.max(initial=0.0))


def layer_bounds(
    model: Model, expanded: ExpandedModel, mode: BoundMode = "spectral", cutoff: Optional[int] = None
) -> List[LayerBound]:
    """Per-layer terms of the propagated bound, in layer order."""
    _check_pair(model, expanded)
    K = expanded.order
    cutoff = K + 1 if cutoff is None else cutoff
    act_bits = expanded.act_bits if expanded.calibrated else None

    results: List[LayerBound] = []
    envelope, delta = 1.0, 0.0
    for index, (spec, layer) in enumerate(zip(model.layers, expanded.layers)):
        shape = layer.shape
        _check_activation(shape)
        weight = spec.weight_matrix().astype(np.float64)
        error = weight - reconstruct(layer.residues).reshape(weight.shape)
        sigma, converged = operator_norm(shape, weight, mode)

        u = certified_channel_bound(layer.residues)
        certified = u is not None
        if u is None:
            u = measured_channel_error(spec.weight, layer.residues)
        if mode == "analytic":
            e = shape.overlap * math.sqrt(shape.fan_in * float(np.sum(u ** 2)))
        else:
            e, err_converged = operator_norm(shape, error, mode)
            converged = converged and err_converged

        input_error = pruned = 0.0
        if act_bits is not None:
            scales = input_scales(expanded.act_scales[index], act_bits, K)
            divisor = scale_divisor(act_bits)
            root_n = math.sqrt(shape.in_features)
            reach = envelope + delta
            input_error = root_n * scales[-1] / 2.0 + max(reach - divisor * scales[0], 0.0)
            for k1, r_index in pruned_pairs(layer, K, cutoff):
                values = layer.residues[r_index].values().reshape(weight.shape)
                norm, _ = operator_norm(shape, values, mode)
                pruned += root_n * (divisor + 1) * scales[k1 - 1] * norm

        delta = (sigma + e) * (delta + input_error) + e * envelope + pruned
        envelope = sigma * envelope + _bias_norm(shape, layer.bias)
        results.append(
            LayerBound(
                name=layer.name, sigma=sigma, e=e, kappa=shape.overlap,
                u_max=float(u.max(initial=0.0)), u_literal_max=_literal_u(layer.residues),
                certified_u=certified, input_error=input_error, pruned=pruned,
                envelope=envelope, delta=delta, converged=converged,
            )
        )
        logger.info("%s: sigma=%.4g e=%.4g eps=%.4g delta=%.4g", layer.name, sigma, e, input_error, delta)
    return results


def network_bound(
    model: Model, expanded: ExpandedModel, mode: BoundMode = "spectral", cutoff: Optional[int] = None
) -> float:
    """Certified max ||f(x) - f_hat(x)|| over inputs with ||x|| <= 1."""
    layers = layer_bounds(model, expanded, mode, cutoff)
    return layers[-1].delta if layers else 0.0


def literal_network_bound(layers: Sequence[LayerBound]) -> float:
    """prod_l (sum_{i<=l} sigma_i * u_i + 1) - 1 with u_i each layer's max channel bound."""
    product, running = 1.0, 0.0
    for layer in layers:
        u = layer.u_literal_max if layer.u_literal_max is not None else layer.u_max
        running += layer.sigma * u
        product *= running + 1.0
    return product - 1.0


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------
class ErrorStats(NamedTuple):
    max_error: float
    argmax_agreement: float
    samples: int


def _chunk_plan(n_samples: int, seed: int) -> List[Tuple[np.random.SeedSequence, int]]:
    n_chunks = math.ceil(n_samples / SAMPLE_CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    return [(children[i], min(SAMPLE_CHUNK, n_samples - i * SAMPLE_CHUNK)) for i in range(n_chunks)]


def sample_inputs(n_samples: int, dim: int, seed: int = 0) -> np.ndarray:
    """The seeded unit-norm inputs :func:`error_statistics` evaluates, as one array."""
    return np.concatenate([
        unit_norm_inputs(np.random.default_rng(seq), count, dim)
        for seq, count in _chunk_plan(n_samples, seed)
    ])


def output_error(reference: np.ndarray, approx: np.ndarray) -> np.ndarray:
    """Per-sample infinity-norm of the output difference."""
    diff = np.atleast_2d(np.asarray(reference, dtype=np.float64) - approx)
    return np.abs(diff).max(axis=1, initial=0.0)


def _chunk_stats(
    model: Model, expanded: ExpandedModel, seq: np.random.SeedSequence, count: int, cutoff: Optional[int]
) -> Tuple[float, int]:
    inputs = unit_norm_inputs(np.random.default_rng(seq), count, model.in_features)
    reference = forward_float(model, inputs)
    approx = forward_expanded(expanded, inputs, cutoff=cutoff)
    errors = output_error(reference, approx)
    agree = int(np.sum(np.argmax(reference, axis=1) == np.argmax(approx, axis=1)))
    return float(errors.max(initial=0.0)), agree


def error_statistics(
    model: Model,
    expanded: ExpandedModel,
    n_samples: int,
    seed: int = 0,
    threads: int = 1,
    cutoff: Optional[int] = None,
) -> ErrorStats:
    """Max output error and top-1 agreement over seeded unit-norm inputs.

    Inputs come in chunks of 1000, chunk i drawn from the i-th child of
    SeedSequence(seed), so a smaller sample is always a prefix of a larger one
    and the result does not depend on ``threads``.
    """
    if n_samples < 1:
        raise ValueError(f"need at least one sample, got {n_samples}")
    if not model.layers:
        return ErrorStats(0.0, 1.0, n_samples)
    _check_pair(model, expanded)
    plan = _chunk_plan(n_samples, seed)

    def _one(chunk: Tuple[np.random.SeedSequence, int]) -> Tuple[float, int]:
        return _chunk_stats(model, expanded, chunk[0], chunk[1], cutoff)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(_one, plan))
    worst = max(r[0] for r in results)
    agree = sum(r[1] for r in results)
    return ErrorStats(worst, agree / n_samples, n_samples)


def empirical_max_error(
    model: Model, expanded: ExpandedModel, n_samples: int, seed: int = 0, threads: int = 1
) -> float:
    return error_statistics(model, expanded, n_samples, seed, threads).max_error


def weight_rmse(model: Model, expanded: ExpandedModel) -> float:
    """Root-mean-square weight error over every weight of the network."""
    _check_pair(model, expanded)
    total, count = 0.0, 0
    for spec, layer in zip(model.layers, expanded.layers):
        diff = spec.weight.astype(np.float64) - reconstruct(layer.residues)
        total += float(np.sum(diff ** 2))
        count += diff.size
    return math.sqrt(total / count) if count else 0.0


def bound_report(
    model: Model,
    expanded: ExpandedModel,
    n_samples: int = 0,
    seed: int = 0,
    mode: BoundMode = "spectral",
    cutoff: Optional[int] = None,
    threads: int = 1,
) -> BoundReport:
    """Certified and literal bounds, plus the empirical error when ``n_samples`` > 0."""
    layers = layer_bounds(model, expanded, mode, cutoff)
    report = BoundReport(
        mode=mode, bits=expanded.bits, order=expanded.order,
        act_bits=expanded.act_bits if expanded.calibrated else None,
        U=layers[-1].delta if layers else 0.0,
        U_literal=literal_network_bound(layers),
        layers=layers,
    )
    if n_samples > 0:
        stats = error_statistics(model, expanded, n_samples, seed, threads, cutoff)
        report = report.model_copy(update={
            "U_empirical": stats.max_error, "argmax_agreement": stats.argmax_agreement,
            "samples": n_samples, "seed": seed,
        })
        if not report.sound:
            logger.error("measured error %.6g exceeds certified bound %.6g", stats.max_error, report.U)
    return report


def check_soundness(report: BoundReport) -> None:
    if not report.sound:
        raise SoundnessViolation(
            f"measured error {report.U_empirical:.6g} exceeds certified bound {report.U:.6g}"
        )


def layer_error_curve(W: np.ndarray, cfg: QuantConfig, max_order: int) -> pd.DataFrame:
    """Measured, certified and literal max weight error of a dense expansion for K = 1..max_order."""
    residues = expand_weights(W, cfg, max_order)
    rows = []
    for K in range(1, max_order + 1):
        prefix = residues[:K]
        certified = certified_channel_bound(prefix)
        literal = _literal_u(prefix)
        rows.append({
            "order": K,
            "measured": float(measured_channel_error(W, prefix).max(initial=0.0)),
            "certified": None if certified is None else float(certified.max(initial=0.0)),
            "literal": literal,
        })
    return pd.DataFrame(rows, columns=["order", "measured", "certified", "literal"])


def equal_budget_comparison(W: np.ndarray, cfg: QuantConfig, dense_order: int = 2) -> Tuple[float, float]:
    """RMSE of a dense K' expansion and of a K'+1 sparse one with the same total overhead."""
    w = np.asarray(W, dtype=np.float64)
    dense = reconstruct(expand_weights(W, cfg, dense_order))
    sparse = reconstruct(expand_weights_sparse(W, cfg, dense_order + 1, float(dense_order - 1)))
    return (
        float(np.sqrt(np.mean((w - dense) ** 2))),
        float(np.sqrt(np.mean((w - sparse) ** 2))),
    )


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------
BoundTree = Union[float, Tuple[str, Sequence[Any]]]


def compose_add(bounds: Sequence[float]) -> float:
    """Bound of a sum of branches."""
    return math.fsum(bounds)


def compose_concat(bounds: Sequence[float]) -> float:
    """Bound of a concatenation of branches, as the largest branch bound."""
    return max(bounds, default=0.0)


def compose(tree: BoundTree) -> float:
    """Evaluate nested ("add" | "concat", [children]) tuples whose leaves are bounds."""
    if isinstance(tree, (int, float)):
        return float(tree)
    op, children = tree
    values = [compose(child) for child in children]
    if op == "add":
        return compose_add(values)
    if op == "concat":
        return compose_concat(values)
    raise ValueError(f"unknown composition '{op}'")


class AttentionBoundInputs(BaseModel):
    """Weight-error bounds and norms of the query and key projections."""

    sigma_q: float = Field(ge=0)
    sigma_k: float = Field(ge=0)
    alpha_q: float = Field(ge=0)
    alpha_k: float = Field(ge=0)


def attention_bound(inputs: AttentionBoundInputs) -> float:
    """Bound on the query-key product error."""
    return inputs.sigma_k * inputs.alpha_q + inputs.sigma_q * inputs.alpha_k + inputs.sigma_k * inputs.sigma_q


def softmax_bound(eps: float) -> float:
    """Bound on the softmax output error given a logit error eps."""
    if eps < 0:
        raise ValueError(f"logit error bound must be non-negative, got {eps}")
    return 1.0 - math.exp(-2.0 * eps)


__all__ = [
    "AttentionBoundInputs",
    "BoundReport",
    "ErrorStats",
    "LayerBound",
    "SoundnessViolation",
    "SpectralEstimate",
    "UnsupportedActivationError",
    "UnsupportedBitWidthError",
    "activation_envelope",
    "attention_bound",
    "bound_report",
    "certified_channel_bound",
    "check_soundness",
    "compose",
    "compose_add",
    "compose_concat",
    "empirical_max_error",
    "equal_budget_comparison",
    "error_statistics",
    "layer_bounds",
    "layer_error_curve",
    "lemma1_bound",
    "lemma2_bound",
    "literal_lemma1_bound",
    "literal_lemma2_bound",
    "literal_network_bound",
    "measured_channel_error",
    "network_bound",
    "operator_norm",
    "output_error",
    "sample_inputs",
    "softmax_bound",
    "spectral_norm",
    "spectral_norm_estimate",
    "weight_rmse",
]
