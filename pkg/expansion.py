"""
Residual expansions of weights and inputs.

A weight tensor W is expanded into residues R^(1..K):

    R^(1) = Q(W)
    R^(k) = Q(W - sum_{j<k} Q^-1(R^(j)))

each with per-channel scales computed on the residual it quantizes, so the
reconstruction error shrinks geometrically with k. The sparse variant keeps,
at every order k >= 2, only the output channels with the largest L1 residual
norm; norms are recomputed on the current residual, so a channel skipped at
one order can be picked at the next. The per-layer budget gamma_l (1.0 = one
full extra residue) is spread linearly over the network, favouring the layers
closest to the output.

Inputs are expanded the same way with static per-tensor scales: order 1 uses
the calibrated scale and order k uses s / (2^(a-1) - 1)^(k-1).
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from config import RexError
from model_io import ExpandedLayer, ExpandedModel, LayerSpec, Model, Residue
from quantizer import (
    QuantConfig,
    QuantizedTensor,
    QuantOperator,
    channel_view,
    dequantize,
    get_operator,
    quantize,
    scale_divisor,
)

logger = logging.getLogger(__name__)

OperatorLike = Union[str, QuantOperator]

__all__ = [
    "ExpansionError",
    "InputExpansion",
    "Residue",
    "ExpandedLayer",
    "SparseMask",
    "allocate_budget",
    "budget_for_target_bits",
    "channel_quota",
    "expand_input",
    "expand_model",
    "expand_weights",
    "expand_weights_sparse",
    "input_scales",
    "reconstruct",
    "sparse_mask",
]


class ExpansionError(RexError, ValueError):
    """Raised for invalid orders, budgets or calibration scales."""


def _resolve(operator: OperatorLike, **options: object) -> QuantOperator:
    if isinstance(operator, str):
        return get_operator(operator, **options)
    return operator


def _check_order(K: int) -> None:
    if K < 1:
        raise ExpansionError(f"expansion order must be >= 1, got {K}")


# ---------------------------------------------------------------------------
# Dense expansion
# ---------------------------------------------------------------------------
def expand_weights(
    W: np.ndarray, cfg: QuantConfig, K: int, operator: OperatorLike = "uniform", **options: object
) -> List[Residue]:
    """All K residues of W, every one dense."""
    _check_order(K)
    op = _resolve(operator, **options)
    w = np.asarray(W, dtype=np.float64)
    residues: List[Residue] = []
    acc = np.zeros_like(w)
    for q in op.lead_residues(W, cfg, K)[:K]:
        residue = Residue(order=len(residues) + 1, q=q)
        residues.append(residue)
        acc = acc + residue.values()
    while len(residues) < K:
        residual = w - acc
        residue = Residue(order=len(residues) + 1, q=op.residual(residual, cfg))
        residues.append(residue)
        acc = acc + residue.values()
        logger.debug("order %d: max residual %.3e", residue.order, float(np.max(np.abs(w - acc), initial=0.0)))
    return residues


def reconstruct(residues: Sequence[Residue]) -> np.ndarray:
    """Sum of the dequantized residues; masked channels count only where kept."""
    if not residues:
        raise ExpansionError("cannot reconstruct from an empty residue list")
    total = residues[0].values()
    for residue in residues[1:]:
        total = total + residue.values()
    return total


# ---------------------------------------------------------------------------
# Sparse expansion
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SparseMask:
    """Channels kept at one order, with the norms and threshold that selected them."""

    kept: np.ndarray
    threshold: float
    norms: np.ndarray

    @property
    def dense(self) -> bool:
        return self.kept.size == self.norms.size


def channel_quota(gamma: float, n_channels: int, K: int, first_sparse: int = 2) -> int:
    """round(gamma * n_o / m) clamped to [0, n_o], m the number of sparse orders.

    Orders first_sparse..K are sparse, so m = K - first_sparse + 1; 0 when m < 1.
    """
    sparse_orders = K - first_sparse + 1
    if sparse_orders < 1:
        return 0
    quota = int(np.rint(gamma * n_channels / sparse_orders))
    return min(max(quota, 0), n_channels)


def sparse_mask(
    residual: np.ndarray, gamma: float, k: int, K: int, first_sparse: int = 2
) -> SparseMask:
    """Top-quota output channels of ``residual`` by L1 norm; ties go to the lower index."""
    if not 2 <= first_sparse <= k <= K:
        raise ExpansionError(f"sparse orders run from {first_sparse} to K={K}, got k={k}")
    if not (gamma >= 0 and math.isfinite(gamma)):
        raise ExpansionError(f"budget must be a finite non-negative fraction, got {gamma}")
    norms = np.abs(channel_view(np.asarray(residual, dtype=np.float64))).sum(axis=1)
    quota = channel_quota(gamma, norms.size, K, first_sparse)
    ranking = np.argsort(-norms, kind="stable")
    kept = np.sort(ranking[:quota])
    threshold = float(norms[ranking[quota - 1]]) if quota else math.inf
    return SparseMask(kept=kept, threshold=threshold, norms=norms)


def _masked(q: QuantizedTensor, kept: np.ndarray) -> QuantizedTensor:
    rows = channel_view(q.codes).copy()
    drop = np.ones(rows.shape[0], dtype=bool)
    drop[kept] = False
    rows[drop] = 0
    return QuantizedTensor(rows.reshape(q.shape), q.scales, q.bits, q.grid)


def expand_weights_sparse(
    W: np.ndarray,
    cfg: QuantConfig,
    K: int,
    gamma: float,
    operator: OperatorLike = "uniform",
    **options: object,
) -> List[Residue]:
    """K residues where every order after the operator's leading ones is channel-sparse.

    A residue that keeps no channel is still returned (with an empty mask) so
    the result always has K entries.
    """
    _check_order(K)
    op = _resolve(operator, **options)
    w = np.asarray(W, dtype=np.float64)
    residues: List[Residue] = []
    acc = np.zeros_like(w)
    for q in op.lead_residues(W, cfg, K)[:K]:
        residue = Residue(order=len(residues) + 1, q=q)
        residues.append(residue)
        acc = acc + residue.values()
    first_sparse = len(residues) + 1
    for k in range(first_sparse, K + 1):
        residual = w - acc
        mask = sparse_mask(residual, gamma, k, K, first_sparse)
        q = op.residual(residual, cfg)
        if mask.dense:
            residue = Residue(order=k, q=q)
        else:
            residue = Residue(order=k, q=_masked(q, mask.kept), mask=mask.kept)
        residues.append(residue)
        acc = acc + residue.values()
        logger.debug("order %d: kept %d/%d channels", k, mask.kept.size, mask.norms.size)
    return residues


# ---------------------------------------------------------------------------
# Budgets
# ---------------------------------------------------------------------------
def allocate_budget(gamma_total: float, L: int, K: int) -> List[float]:
    """Linear split gamma_l = gamma_total * 2l / (L + 1), clamped to [0, K - 1].

    Whatever a clamped layer cannot take is handed to the remaining layers in
    proportion to their linear weights.
    """
    if not (gamma_total >= 0 and math.isfinite(gamma_total)):
        raise ExpansionError(f"budget must be a finite non-negative fraction, got {gamma_total}")
    if L <= 0:
        return []
    cap = float(max(K - 1, 0))
    weights = np.arange(1, L + 1, dtype=np.float64) * 2.0 / (L + 1)
    budgets = gamma_total * weights
    free = np.ones(L, dtype=bool)
    while True:
        over = free & (budgets > cap)
        if not over.any():
            break
        surplus = float((budgets[over] - cap).sum())
        budgets[over] = cap
        free &= ~over
        if not free.any():
            logger.info("budget %.3f exceeds what order %d can use; %.3f left unspent", gamma_total, K, surplus)
            break
        budgets[free] += surplus * weights[free] / weights[free].sum()
    return [float(b) for b in budgets]


def budget_for_target_bits(expansion_bits: int, target_bits: int) -> float:
    """Largest overhead fraction for which b-bit expansions stay under a target bit-width's cost."""
    return target_bits / expansion_bits - 1.0


# ---------------------------------------------------------------------------
# Input expansion
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class InputExpansion:
    """K per-tensor quantizations I^(1..K) of one activation tensor."""

    orders: Tuple[QuantizedTensor, ...]

    @property
    def scales(self) -> List[float]:
        return [float(q.scales[0]) for q in self.orders]

    def dequantized(self) -> np.ndarray:
        total = dequantize(self.orders[0])
        for q in self.orders[1:]:
            total = total + dequantize(q)
        return total


def input_scales(calib_scale: float, act_bits: int, K: int) -> List[float]:
    """Static per-order input scales s / (2^(a-1) - 1)^(k-1), rounded to float32."""
    divisor = scale_divisor(act_bits)
    tiny = float(np.finfo(np.float32).tiny)
    return [
        max(float(np.float32(calib_scale / divisor ** k)), tiny) for k in range(K)
    ]


def expand_input(
    I: np.ndarray, cfg: QuantConfig, K: int, calib_scale: Optional[float]
) -> InputExpansion:
    """Expand an activation tensor into K orders with static calibrated scales."""
    _check_order(K)
    if calib_scale is None or not (calib_scale > 0 and math.isfinite(calib_scale)):
        raise ExpansionError(f"input expansion needs a positive calibrated scale, got {calib_scale}")
    x = np.asarray(I, dtype=np.float64)
    per_tensor = cfg.model_copy(update={"granularity": "per-tensor"})
    orders: List[QuantizedTensor] = []
    acc = np.zeros_like(x)
    for scale in input_scales(calib_scale, cfg.bits, K):
        q = quantize(x - acc, np.array([scale], dtype=np.float32), per_tensor)
        orders.append(q)
        acc = acc + dequantize(q)
    return InputExpansion(orders=tuple(orders))


# ---------------------------------------------------------------------------
# Whole-model expansion
# ---------------------------------------------------------------------------
def _expand_layer(
    layer: LayerSpec, cfg: QuantConfig, K: int, gamma: Optional[float], op: QuantOperator
) -> ExpandedLayer:
    if gamma is None:
        residues = expand_weights(layer.weight, cfg, K, op)
    else:
        residues = expand_weights_sparse(layer.weight, cfg, K, gamma, op)
    # a residue that keeps no channel contributes nothing
    residues = [r for r in residues if r.mask is None or r.mask.size]
    logger.info(
        "%s: %d residues, gamma=%s, order-1 scale range [%.3e, %.3e]",
        layer.name, len(residues), "dense" if gamma is None else f"{gamma:.3f}",
        float(residues[0].q.scales.min()), float(residues[0].q.scales.max()),
    )
    return ExpandedLayer(shape=layer.shape, residues=tuple(residues), bits=cfg.bits,
                         gamma=gamma, bias=layer.bias)


def expand_model(
    model: Model,
    cfg: QuantConfig,
    order: int,
    budget: Optional[float] = None,
    operator: OperatorLike = "uniform",
    threads: int = 1,
    **options: object,
) -> ExpandedModel:
    """Expand every layer of ``model``.

    ``budget`` is the total overhead as a fraction (0.5 = 50%); None expands
    every order densely. Layers are independent and run on ``threads`` workers;
    the result does not depend on the thread count.
    """
    _check_order(order)
    op = _resolve(operator, **options)
    L = len(model.layers)
    budgets: List[Optional[float]]
    if budget is None:
        budgets = [None] * L
    else:
        budgets = list(allocate_budget(budget, L, order))

    def _one(item: Tuple[LayerSpec, Optional[float]]) -> ExpandedLayer:
        return _expand_layer(item[0], cfg, order, item[1], op)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        layers = list(pool.map(_one, zip(model.layers, budgets)))

    metadata = {
        "granularity": cfg.granularity,
        "budget_total": budget,
        "source": dict(model.metadata),
    }
    fraction = getattr(op, "outlier_fraction", None)
    if fraction is not None:
        metadata["outlier_fraction"] = fraction
    return ExpandedModel(
        layers=tuple(layers),
        bits=cfg.bits,
        order=order,
        budgets=tuple(budgets),
        operator=op.name,
        metadata=metadata,
    )
