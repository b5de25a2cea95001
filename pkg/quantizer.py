"""
Quantization operators.

The base operator is symmetric, static, round-half-to-even quantization with
one scale per output channel (or one per tensor):

    s_i   = max|W_i| / (2^(b-1) - 1)          (denominator 1 when b == 1)
    codes = clamp(rint(W_i / s_i), -2^(b-1), 2^(b-1) - 1)

An all-zero channel gets s_i = 1, so its codes are 0 and it reconstructs
exactly. Scales are rounded to float32 before the codes are computed, which
makes a stored expansion reproduce its dequantized values bit for bit.

Operators are looked up by id (``"uniform"``, ``"outlier-split"``) so the
expansion code never needs to know which one it is running. An operator may
emit more than one leading residue: the outlier operator returns the clipped
inlier quantization followed by a sparse binary residue holding the extreme
weights.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config import RexError

logger = logging.getLogger(__name__)

Granularity = Literal["per-channel", "per-tensor"]

UNIFORM_GRID = "uniform"
BINARY_GRID = "binary"


class QuantizationError(RexError, ValueError):
    """Raised for invalid scales, bit-widths or non-finite inputs."""


class UnknownOperatorError(QuantizationError, LookupError):
    """Raised when an operator id is not registered."""


def qmin(bits: int) -> int:
    return -(1 << (bits - 1))


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def scale_divisor(bits: int) -> int:
    """Denominator of the max-abs scale rule; 1 for the 1-bit grid."""
    return max(qmax(bits), 1)


class QuantConfig(BaseModel):
    """Bit-width and granularity of the base operator."""

    model_config = ConfigDict(frozen=True)

    bits: int = Field(4, ge=1, le=8)
    granularity: Granularity = "per-channel"
    symmetric: bool = True
    rounding: Literal["half-even"] = "half-even"

    @field_validator("symmetric")
    @classmethod
    def _symmetric_only(cls, value: bool) -> bool:
        if not value:
            raise ValueError("only symmetric quantization is supported")
        return value


def channel_view(x: np.ndarray) -> np.ndarray:
    """2-D view with one row per output channel (a vector is one channel)."""
    x = np.asarray(x)
    if x.ndim <= 1:
        return x.reshape(1, -1)
    return x.reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# Quantized tensors
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus the per-channel (or per-tensor) scales that map them back.

    ``grid`` is ``"uniform"`` for codes in [-2^(b-1), 2^(b-1)-1] and
    ``"binary"`` for the sparse sign residue, whose codes are in {-1, 0, +1}
    with 0 meaning "no entry".
    """

    codes: np.ndarray
    scales: np.ndarray
    bits: int
    grid: str = UNIFORM_GRID

    def __post_init__(self) -> None:
        raw = np.asarray(self.codes)
        if raw.dtype.kind not in "iu":
            raise QuantizationError(f"codes must be integers, got {raw.dtype}")
        if not 1 <= self.bits <= 8:
            raise QuantizationError(f"bit-width {self.bits} outside [1, 8]")
        lo, hi = self.code_range
        if raw.size and (raw.min() < lo or raw.max() > hi):
            raise QuantizationError(
                f"codes outside [{lo}, {hi}] for {self.bits}-bit {self.grid} grid"
            )
        scales = np.asarray(self.scales, dtype=np.float32).reshape(-1)
        n_channels = channel_view(raw).shape[0]
        if scales.size not in (1, n_channels):
            raise QuantizationError(
                f"{scales.size} scales for a tensor with {n_channels} channels"
            )
        if not np.all(np.isfinite(scales) & (scales > 0)):
            raise QuantizationError("scales must be finite and positive")
        object.__setattr__(self, "codes", raw.astype(np.int8))
        object.__setattr__(self, "scales", scales)

    @property
    def code_range(self) -> tuple:
        if self.grid == BINARY_GRID:
            return (-1, 1)
        if self.grid != UNIFORM_GRID:
            raise QuantizationError(f"unknown grid '{self.grid}'")
        return (qmin(self.bits), qmax(self.bits))

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    @property
    def n_channels(self) -> int:
        return channel_view(self.codes).shape[0]

    def channel_scales(self) -> np.ndarray:
        """Scales broadcast to one float64 entry per channel."""
        return np.broadcast_to(self.scales.astype(np.float64), (self.n_channels,)).copy()


def compute_scale(W: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Max-abs symmetric scales, float32, one per channel (or one per tensor)."""
    w = channel_view(np.asarray(W, dtype=np.float64))
    if not np.all(np.isfinite(w)):
        raise QuantizationError("cannot compute scales of a non-finite tensor")
    if w.shape[1] == 0:
        peak = np.zeros(w.shape[0])
    else:
        peak = np.max(np.abs(w), axis=1)
    if cfg.granularity == "per-tensor":
        peak = np.array([peak.max() if peak.size else 0.0])
    scales = (peak / scale_divisor(cfg.bits)).astype(np.float32)
    # zero channels (and float32 underflow)
    scales[scales == 0] = 1.0
    return scales


def quantize(W: np.ndarray, scales: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
    """Round-half-to-even quantization of W with the given positive scales."""
    w = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise QuantizationError("cannot quantize a non-finite tensor")
    rows = channel_view(w)
    s = np.asarray(scales, dtype=np.float32).reshape(-1)
    if s.size not in (1, rows.shape[0]):
        raise QuantizationError(f"{s.size} scales for {rows.shape[0]} channels")
    if not np.all(np.isfinite(s) & (s > 0)):
        raise QuantizationError("scales must be finite and positive")
    codes = np.rint(rows / s.astype(np.float64)[:, None])
    codes = np.clip(codes, qmin(cfg.bits), qmax(cfg.bits)).astype(np.int8)
    return QuantizedTensor(codes.reshape(w.shape), s.copy(), cfg.bits)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """codes * scale, elementwise, as float64."""
    rows = channel_view(q.codes).astype(np.float64) * q.channel_scales()[:, None]
    return rows.reshape(q.codes.shape)


# ---------------------------------------------------------------------------
# Outlier splitting
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class OutlierSplit:
    """Clipped inlier quantization plus a binary residue for the clipped-off excess."""

    inlier: QuantizedTensor
    outliers: QuantizedTensor
    fraction: float
    clip: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        """Sorted flat indices of the outlier entries."""
        return np.flatnonzero(self.outliers.codes)

    @property
    def outlier_codes(self) -> np.ndarray:
        return self.outliers.codes

    @property
    def outlier_scale(self) -> np.ndarray:
        return self.outliers.scales

    @property
    def density(self) -> float:
        size = self.outliers.codes.size
        return float(self.indices.size) / size if size else 0.0

    def reconstruct(self) -> np.ndarray:
        return dequantize(self.inlier) + dequantize(self.outliers)


def outlier_split(W: np.ndarray, cfg: QuantConfig, p: float) -> OutlierSplit:
    """Split W into a clipped b-bit part and a sparse sign residue.

    Per channel (or over the whole tensor for per-tensor granularity) the
    floor(p * n + 1/2) largest magnitudes are candidate outliers; ties go to the
    lower index. The clip level c is the largest remaining magnitude (0 when every
    entry is a candidate), and only candidates strictly above c become outliers. Each outlier is stored as
    sign(w) with a per-channel scale equal to the mean of |w| - c over that
    channel's outliers. A channel without outliers keeps scale 1 and is left
    unclipped.
    """
    if not 0.0 < p < 1.0:
        raise QuantizationError(f"outlier fraction must be in (0, 1), got {p}")
    w = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise QuantizationError("cannot split a non-finite tensor")
    rows = channel_view(w)
    if cfg.granularity == "per-tensor":
        rows = rows.reshape(1, -1)
    n_rows, n_cols = rows.shape
    mag = np.abs(rows)

    codes = np.zeros(rows.shape, dtype=np.int8)
    out_scale = np.ones(n_rows, dtype=np.float32)
    clip = mag.max(axis=1) if n_cols else np.zeros(n_rows)

    # nearest rank: at most p * n + 1/2 outliers per channel
    n_out = int(np.floor(p * n_cols + 0.5))
    if n_out > 0:
        order = np.argsort(-mag, axis=1, kind="stable")
        top = order[:, :n_out]
        if n_out < n_cols:
            clip = np.take_along_axis(mag, order[:, n_out:n_out + 1], axis=1)[:, 0]
        else:
            clip = np.zeros(n_rows)
        chosen = np.take_along_axis(mag, top, axis=1) > clip[:, None]
        is_out = np.zeros(rows.shape, dtype=bool)
        np.put_along_axis(is_out, top, chosen, axis=1)

        counts = is_out.sum(axis=1)
        excess = np.where(is_out, mag - clip[:, None], 0.0).sum(axis=1)
        has = counts > 0
        out_scale[has] = (excess[has] / counts[has]).astype(np.float32)
        out_scale = np.maximum(out_scale, np.finfo(np.float32).tiny)
        codes[is_out] = np.sign(rows[is_out]).astype(np.int8)
        logger.debug("outlier split: %d outliers over %d channels", int(counts.sum()), n_rows)

    clipped = np.clip(rows, -clip[:, None], clip[:, None]).reshape(w.shape)
    inlier = quantize(clipped, compute_scale(clipped, cfg), cfg)
    outliers = QuantizedTensor(codes.reshape(w.shape), out_scale, bits=1, grid=BINARY_GRID)
    return OutlierSplit(inlier=inlier, outliers=outliers, fraction=p, clip=clip)


# ---------------------------------------------------------------------------
# Operator registry
# ---------------------------------------------------------------------------
class QuantOperator(Protocol):
    name: str

    def __call__(self, W: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
        ...

    def lead_residues(
        self, W: np.ndarray, cfg: QuantConfig, max_residues: int
    ) -> List[QuantizedTensor]:
        ...

    def residual(self, W: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
        """Quantize what the leading residues left over (orders past the lead)."""
        ...


class UniformOperator:
    """The base max-abs operator."""

    name = "uniform"

    def __init__(self, **_options: object) -> None:
        # options meant for other operators are accepted and ignored
        pass

    def __call__(self, W: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
        return quantize(W, compute_scale(W, cfg), cfg)

    def lead_residues(
        self, W: np.ndarray, cfg: QuantConfig, max_residues: int = 1
    ) -> List[QuantizedTensor]:
        return [self(W, cfg)]

    def residual(self, W: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
        return self(W, cfg)


class OutlierSplitOperator:
    """Clipped b-bit quantization followed by one binary outlier residue."""

    name = "outlier-split"

    def __init__(self, outlier_fraction: float = 0.002, **_options: object) -> None:
        if not 0.0 < outlier_fraction < 1.0:
            raise QuantizationError(
                f"outlier fraction must be in (0, 1), got {outlier_fraction}"
            )
        self.outlier_fraction = outlier_fraction

    def __call__(self, W: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
        return outlier_split(W, cfg, self.outlier_fraction).inlier

    def lead_residues(
        self, W: np.ndarray, cfg: QuantConfig, max_residues: int = 2
    ) -> List[QuantizedTensor]:
        # with room for a single residue the unclipped base quantization is better
        if max_residues < 2:
            return [quantize(W, compute_scale(W, cfg), cfg)]
        split = outlier_split(W, cfg, self.outlier_fraction)
        if split.indices.size == 0:
            return [split.inlier]
        return [split.inlier, split.outliers]

    def residual(self, W: np.ndarray, cfg: QuantConfig) -> QuantizedTensor:
        # outliers are already taken out by the leading residues
        return quantize(W, compute_scale(W, cfg), cfg)


OperatorFactory = Callable[..., QuantOperator]

_OPERATORS: Dict[str, OperatorFactory] = {
    UniformOperator.name: UniformOperator,
    OutlierSplitOperator.name: OutlierSplitOperator,
}


def register_operator(name: str, factory: OperatorFactory) -> None:
    """Make an operator available under ``name`` (e.g. for the CLI ``--operator`` flag)."""
    _OPERATORS[name] = factory


def available_operators() -> List[str]:
    return sorted(_OPERATORS)


def get_operator(name: str, **options: object) -> QuantOperator:
    try:
        factory = _OPERATORS[name]
    except KeyError:
        raise UnknownOperatorError(
            f"unknown quantization operator '{name}' "
            f"(available: {', '.join(available_operators())})"
        ) from None
    return factory(**options)


def quantize_op(
    W: np.ndarray, cfg: QuantConfig, operator: str = "uniform", **options: object
) -> QuantizedTensor:
    """Quantize W with the operator registered under ``operator``."""
    return get_operator(operator, **options)(W, cfg)
