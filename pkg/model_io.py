"""
Model containers and their on-disk formats.

Full-precision model directory (format version 1):

    model.json   UTF-8 manifest: one entry per layer with its geometry plus
                 ``weight_offset``/``weight_len`` and, when the layer has a
                 bias, ``bias_offset``/``bias_len`` (bytes into weights.bin)
    weights.bin  concatenated little-endian float32 tensors, no header

Expanded model directory:

    expansion.json  bit-width, order, operator, budgets, calibration, and per
                    layer the residue list with offsets into the two blobs
    codes.bin       int8 codes, one byte per value whatever the logical bit-width
    scales.bin      little-endian float32 scale vectors (and layer biases)
    masks.json      per residue the sorted kept-channel list ([] = dense)

Activations between layers are flattened channel-major (C, H, W), so a conv2d
layer may feed a dense layer whose input width equals C * H * W.

Tensor files used by ``infer`` are a single ASCII shape line (``"4,16"``)
followed by raw little-endian float32 data.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import RexError
from quantizer import BINARY_GRID, UNIFORM_GRID, QuantizationError, QuantizedTensor, dequantize

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MODEL_MANIFEST = "model.json"
MODEL_WEIGHTS = "weights.bin"
EXPANSION_MANIFEST = "expansion.json"
EXPANSION_CODES = "codes.bin"
EXPANSION_SCALES = "scales.bin"
EXPANSION_MASKS = "masks.json"

_F32 = np.dtype("<f4")

ACTIVATIONS = ("relu", "none", "sigmoid", "tanh")


class ModelFormatError(RexError, ValueError):
    """Raised when a model directory or tensor file is missing, truncated or invalid."""


class LayerSpecError(ModelFormatError):
    """Raised for inconsistent layer geometry or layer-spec strings."""


# ---------------------------------------------------------------------------
# Layer geometry
# ---------------------------------------------------------------------------
class LayerShape(BaseModel):
    """Geometry of one layer, without its tensors."""

    model_config = ConfigDict(frozen=True)

    name: str = ""
    kind: Literal["dense", "conv2d"]
    in_channels: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    kernel: int = Field(1, ge=1)
    stride: int = Field(1, ge=1)
    spatial: int = Field(1, ge=1)
    activation: Literal["relu", "none", "sigmoid", "tanh"] = "none"
    bias: bool = False

    @model_validator(mode="after")
    def _check_geometry(self) -> "LayerShape":
        if self.kind == "dense" and (self.kernel, self.stride, self.spatial) != (1, 1, 1):
            raise ValueError("dense layers have kernel = stride = spatial = 1")
        if self.kind == "conv2d" and self.kernel > self.spatial:
            raise ValueError(f"kernel {self.kernel} larger than input side {self.spatial}")
        return self

    @property
    def out_spatial(self) -> int:
        if self.kind == "dense":
            return 1
        return (self.spatial - self.kernel) // self.stride + 1

    @property
    def in_features(self) -> int:
        return self.in_channels * self.spatial ** 2

    @property
    def out_features(self) -> int:
        return self.out_channels * self.out_spatial ** 2

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel ** 2

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "dense":
            return (self.out_channels, self.in_channels)
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def overlap(self) -> int:
        """Max number of patches along one axis that share an input pixel."""
        return math.ceil(self.kernel / self.stride) if self.kind == "conv2d" else 1


def parse_layer_specs(text: str) -> List[LayerShape]:
    """Parse ``dense:IN:OUT[:relu][:bias]`` and ``conv2d:IN:OUT:K:S:D[:relu][:bias]`` lists.

    The activation flag may be relu, none, sigmoid or tanh. Layers are comma
    separated; an empty string is an empty model.
    """
    shapes: List[LayerShape] = []
    for index, token in enumerate(t.strip() for t in text.split(",") if t.strip()):
        parts = token.split(":")
        kind = parts[0].lower()
        n_numbers = {"dense": 2, "conv2d": 5}.get(kind)
        if n_numbers is None:
            raise LayerSpecError(f"unknown layer kind in '{token}'")
        numbers, flags = parts[1:1 + n_numbers], parts[1 + n_numbers:]
        try:
            values = [int(v) for v in numbers]
        except ValueError:
            raise LayerSpecError(f"non-integer dimension in '{token}'") from None
        if len(values) != n_numbers:
            raise LayerSpecError(f"'{token}' needs {n_numbers} dimensions")
        activation, has_bias = "none", False
        for flag in (f.lower() for f in flags):
            if flag in ACTIVATIONS:
                activation = flag
            elif flag == "bias":
                has_bias = True
            else:
                raise LayerSpecError(f"unknown flag '{flag}' in '{token}'")
        fields: Dict[str, Any] = {
            "name": f"layer{index}",
            "kind": kind,
            "in_channels": values[0],
            "out_channels": values[1],
            "activation": activation,
            "bias": has_bias,
        }
        if kind == "conv2d":
            fields.update(kernel=values[2], stride=values[3], spatial=values[4])
        try:
            shapes.append(LayerShape(**fields))
        except ValidationError as exc:
            raise LayerSpecError(f"invalid layer '{token}': {exc.errors()[0]['msg']}") from None
    return shapes


# ---------------------------------------------------------------------------
# Full-precision model
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class LayerSpec:
    """One dense or conv2d layer with its float32 weight and optional bias."""

    name: str
    kind: str
    in_channels: int
    out_channels: int
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    kernel: int = 1
    stride: int = 1
    spatial: int = 1
    activation: str = "none"

    def __post_init__(self) -> None:
        shape = self.shape
        weight = np.asarray(self.weight, dtype=np.float32)
        if weight.shape != shape.weight_shape:
            raise LayerSpecError(
                f"{self.name}: weight shape {weight.shape} != {shape.weight_shape}"
            )
        object.__setattr__(self, "weight", weight)
        if self.bias is not None:
            bias = np.asarray(self.bias, dtype=np.float32).reshape(-1)
            if bias.size != self.out_channels:
                raise LayerSpecError(
                    f"{self.name}: bias length {bias.size} != {self.out_channels}"
                )
            object.__setattr__(self, "bias", bias)

    @property
    def shape(self) -> LayerShape:
        try:
            return LayerShape(
                name=self.name,
                kind=self.kind,
                in_channels=self.in_channels,
                out_channels=self.out_channels,
                kernel=self.kernel,
                stride=self.stride,
                spatial=self.spatial,
                activation=self.activation,
                bias=self.bias is not None,
            )
        except ValidationError as exc:
            raise LayerSpecError(f"{self.name}: {exc.errors()[0]['msg']}") from None

    def weight_matrix(self) -> np.ndarray:
        """Weight as (n_o, n_i * d * d)."""
        return self.weight.reshape(self.out_channels, -1)


def check_layer_chain(shapes: Sequence[LayerShape]) -> None:
    """Raise LayerSpecError unless each layer's output feeds the next layer's input."""
    for prev, nxt in zip(shapes, shapes[1:]):
        if prev.out_features != nxt.in_features:
            raise LayerSpecError(
                f"{prev.name} produces {prev.out_features} features, "
                f"{nxt.name} expects {nxt.in_features}"
            )
        if prev.kind == nxt.kind == "conv2d" and (
            prev.out_channels != nxt.in_channels or prev.out_spatial != nxt.spatial
        ):
            raise LayerSpecError(f"{prev.name} -> {nxt.name}: feature-map geometry mismatch")


@dataclass(frozen=True)
class Model:
    """Sequential network: an ordered tuple of layers plus free-form metadata."""

    layers: Tuple[LayerSpec, ...] = ()
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        check_layer_chain([layer.shape for layer in self.layers])

    @property
    def in_features(self) -> Optional[int]:
        return self.layers[0].shape.in_features if self.layers else None

    @property
    def out_features(self) -> Optional[int]:
        return self.layers[-1].shape.out_features if self.layers else None


def _write_json(path: str, payload: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise ModelFormatError(f"missing file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: invalid JSON ({exc})") from None


def _read_blob(path: str) -> bytes:
    if not os.path.isfile(path):
        raise ModelFormatError(f"missing file: {path}")
    with open(path, "rb") as fh:
        return fh.read()


def _check_version(manifest: Dict[str, Any], path: str) -> None:
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version!r}")


def _shape_fields(shape: LayerShape) -> Dict[str, Any]:
    return shape.model_dump(exclude={"bias"})


def save_model(model: Model, path: str) -> None:
    """Write ``model.json`` + ``weights.bin`` into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    blob = bytearray()
    entries = []
    for layer in model.layers:
        entry = _shape_fields(layer.shape)
        raw = np.ascontiguousarray(layer.weight, dtype=_F32).tobytes()
        entry["weight_offset"], entry["weight_len"] = len(blob), len(raw)
        blob += raw
        if layer.bias is not None:
            raw = np.ascontiguousarray(layer.bias, dtype=_F32).tobytes()
            entry["bias_offset"], entry["bias_len"] = len(blob), len(raw)
            blob += raw
        entries.append(entry)
    manifest = {
        "version": FORMAT_VERSION,
        "flatten": "chw",
        "metadata": model.metadata,
        "layers": entries,
    }
    _write_json(os.path.join(path, MODEL_MANIFEST), manifest)
    with open(os.path.join(path, MODEL_WEIGHTS), "wb") as fh:
        fh.write(bytes(blob))
    logger.info("saved model with %d layers to %s", len(model.layers), path)


def _f32_region(blob: bytes, offset: int, length: int, count: int, what: str) -> np.ndarray:
    if length != count * _F32.itemsize:
        raise ModelFormatError(
            f"{what}: manifest declares {length} bytes, geometry needs {count * _F32.itemsize}"
        )
    if offset < 0 or offset + length > len(blob):
        raise ModelFormatError(
            f"{what}: length mismatch, bytes [{offset}, {offset + length}) "
            f"outside a {len(blob)}-byte blob"
        )
    values = np.frombuffer(blob, dtype=_F32, count=count, offset=offset).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise ModelFormatError(f"{what}: non-finite values")
    return values


def load_model(path: str) -> Model:
    """Read a model directory written by :func:`save_model`, validating every invariant."""
    manifest_path = os.path.join(path, MODEL_MANIFEST)
    manifest = _read_json(manifest_path)
    _check_version(manifest, manifest_path)
    blob = _read_blob(os.path.join(path, MODEL_WEIGHTS))

    try:
        layers, declared = _manifest_layers(manifest, blob)
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{manifest_path}: incomplete layer entry ({exc})") from None
    if declared != len(blob):
        raise ModelFormatError(
            f"{path}: length mismatch, manifest declares {declared} bytes, "
            f"{MODEL_WEIGHTS} has {len(blob)}"
        )
    return Model(layers=tuple(layers), metadata=dict(manifest.get("metadata", {})))


def _manifest_layers(manifest: Dict[str, Any], blob: bytes) -> Tuple[List[LayerSpec], int]:
    layers: List[LayerSpec] = []
    declared = 0
    for index, entry in enumerate(manifest.get("layers", [])):
        fields = {
            k: entry[k]
            for k in ("name", "kind", "in_channels", "out_channels", "kernel",
                      "stride", "spatial", "activation")
            if k in entry
        }
        fields["bias"] = "bias_offset" in entry
        try:
            shape = LayerShape(**fields)
        except ValidationError as exc:
            raise ModelFormatError(
                f"layer {index}: {exc.errors()[0]['msg']} ({entry.get('kind')!r})"
            ) from None
        count = int(np.prod(shape.weight_shape))
        weight = _f32_region(
            blob, int(entry["weight_offset"]), int(entry["weight_len"]), count,
            f"{shape.name} weight",
        ).reshape(shape.weight_shape)
        declared += int(entry["weight_len"])
        bias = None
        if shape.bias:
            bias = _f32_region(
                blob, int(entry["bias_offset"]), int(entry["bias_len"]), shape.out_channels,
                f"{shape.name} bias",
            )
            declared += int(entry["bias_len"])
        layers.append(
            LayerSpec(
                name=shape.name, kind=shape.kind, in_channels=shape.in_channels,
                out_channels=shape.out_channels, weight=weight, bias=bias,
                kernel=shape.kernel, stride=shape.stride, spatial=shape.spatial,
                activation=shape.activation,
            )
        )
    return layers, declared


def generate_synthetic_model(
    shapes: Sequence[LayerShape], seed: int, bias_scale: float = 0.1
) -> Model:
    """Seeded Gaussian model with every layer's operator norm scaled to at most 1.

    Dense layers are divided by their largest singular value; conv2d layers by
    the singular value of the (n_o, n_i*d*d) matrix times the patch overlap
    factor ceil(d/s), which bounds the convolution's operator norm.
    """
    if seed < 0:
        raise LayerSpecError(f"seed must be non-negative, got {seed}")
    check_layer_chain(list(shapes))
    rng = np.random.default_rng(seed)
    layers = []
    for index, shape in enumerate(shapes):
        weight = rng.standard_normal(shape.weight_shape)
        norm = np.linalg.norm(weight.reshape(shape.out_channels, -1), 2) * shape.overlap
        if norm > 0:
            weight /= norm
        bias = rng.standard_normal(shape.out_channels) * bias_scale if shape.bias else None
        layers.append(
            LayerSpec(
                name=shape.name or f"layer{index}", kind=shape.kind,
                in_channels=shape.in_channels, out_channels=shape.out_channels,
                weight=weight, bias=bias, kernel=shape.kernel, stride=shape.stride,
                spatial=shape.spatial, activation=shape.activation,
            )
        )
    return Model(
        layers=tuple(layers),
        metadata={"generator": "gaussian", "normalization": "spectral", "seed": int(seed)},
    )


# ---------------------------------------------------------------------------
# Expanded model
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Residue:
    """One quantized residue R^(k); ``mask`` lists the kept output channels (None = dense)."""

    order: int
    q: QuantizedTensor
    mask: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.order < 1:
            raise QuantizationError(f"residue order must be >= 1, got {self.order}")
        if self.mask is not None:
            mask = np.unique(np.asarray(self.mask, dtype=np.int64))
            if mask.size and (mask[0] < 0 or mask[-1] >= self.q.n_channels):
                raise QuantizationError(f"mask index outside [0, {self.q.n_channels})")
            object.__setattr__(self, "mask", mask)

    @property
    def dense(self) -> bool:
        return self.mask is None

    @property
    def kept_fraction(self) -> float:
        if self.mask is None:
            return 1.0
        return self.mask.size / self.q.n_channels

    def values(self) -> np.ndarray:
        """Dequantized residue with masked-out channels zeroed."""
        deq = dequantize(self.q)
        if self.mask is None:
            return deq
        rows = deq.reshape(self.q.n_channels, -1)
        kept = np.zeros_like(rows)
        kept[self.mask] = rows[self.mask]
        return kept.reshape(deq.shape)


@dataclass(frozen=True)
class ExpandedLayer:
    """The K residues of one layer plus the geometry and bias needed to run it."""

    shape: LayerShape
    residues: Tuple[Residue, ...]
    bits: int
    gamma: Optional[float] = None
    bias: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "residues", tuple(self.residues))
        if not self.residues:
            raise QuantizationError(f"{self.shape.name}: an expanded layer needs a residue")
        for residue in self.residues:
            if residue.mask is not None and residue.mask.size == 0:
                raise QuantizationError(
                    f"{self.shape.name}: residue {residue.order} keeps no channel; drop it"
                )
            if residue.q.shape != self.shape.weight_shape:
                raise QuantizationError(
                    f"{self.shape.name}: residue shape {residue.q.shape} "
                    f"!= {self.shape.weight_shape}"
                )
        if self.bias is not None:
            object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float32).reshape(-1))

    @property
    def name(self) -> str:
        return self.shape.name


@dataclass(frozen=True)
class ExpandedModel:
    """Expanded counterpart of a Model.

    ``act_scales`` holds, when calibrated, the order-1 activation scale of each
    layer input followed by the scale of the final output (L + 1 entries).
    Higher input orders use s / (2^(a-1) - 1)^(k-1) with a = ``act_bits``.
    """

    layers: Tuple[ExpandedLayer, ...]
    bits: int
    order: int
    budgets: Tuple[Optional[float], ...] = ()
    operator: str = "uniform"
    act_bits: Optional[int] = None
    act_scales: Optional[Tuple[float, ...]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "budgets", tuple(self.budgets))
        check_layer_chain([layer.shape for layer in self.layers])
        for layer in self.layers:
            if not 1 <= len(layer.residues) <= self.order:
                raise QuantizationError(
                    f"{layer.name}: {len(layer.residues)} residues for order {self.order}"
                )
        if self.act_scales is not None:
            scales = tuple(float(s) for s in self.act_scales)
            if len(scales) != len(self.layers) + 1:
                raise QuantizationError(
                    f"{len(scales)} activation scales for {len(self.layers)} layers"
                )
            if not all(math.isfinite(s) and s > 0 for s in scales):
                raise QuantizationError("activation scales must be finite and positive")
            object.__setattr__(self, "act_scales", scales)

    @property
    def calibrated(self) -> bool:
        return self.act_bits is not None and self.act_scales is not None

    def with_calibration(self, act_bits: int, act_scales: Sequence[float]) -> "ExpandedModel":
        return replace(self, act_bits=act_bits, act_scales=tuple(act_scales))


def save_expanded(expanded: ExpandedModel, path: str) -> None:
    """Write the four expanded-model files into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    codes_blob = bytearray()
    scales_blob = bytearray()
    layer_entries = []
    mask_entries = []
    for layer in expanded.layers:
        residue_entries = []
        layer_masks = []
        for residue in layer.residues:
            codes = np.ascontiguousarray(residue.q.codes, dtype=np.int8).tobytes()
            scales = np.ascontiguousarray(residue.q.scales, dtype=_F32).tobytes()
            residue_entries.append({
                "order": residue.order,
                "bits": residue.q.bits,
                "grid": residue.q.grid,
                "codes_offset": len(codes_blob),
                "codes_len": len(codes),
                "scales_offset": len(scales_blob),
                "scales_len": len(scales),
            })
            codes_blob += codes
            scales_blob += scales
            layer_masks.append([] if residue.mask is None else [int(i) for i in residue.mask])
        entry: Dict[str, Any] = {
            "shape": _shape_fields(layer.shape),
            "bits": layer.bits,
            "gamma": layer.gamma,
            "residues": residue_entries,
        }
        if layer.bias is not None:
            raw = np.ascontiguousarray(layer.bias, dtype=_F32).tobytes()
            entry["bias_offset"], entry["bias_len"] = len(scales_blob), len(raw)
            scales_blob += raw
        layer_entries.append(entry)
        mask_entries.append(layer_masks)

    manifest = {
        "version": FORMAT_VERSION,
        "bits": expanded.bits,
        "order": expanded.order,
        "operator": expanded.operator,
        "budgets": list(expanded.budgets),
        "act_bits": expanded.act_bits,
        "act_scales": None if expanded.act_scales is None else list(expanded.act_scales),
        "metadata": expanded.metadata,
        "layers": layer_entries,
    }
    _write_json(os.path.join(path, EXPANSION_MANIFEST), manifest)
    _write_json(os.path.join(path, EXPANSION_MASKS), {"version": FORMAT_VERSION, "layers": mask_entries})
    with open(os.path.join(path, EXPANSION_CODES), "wb") as fh:
        fh.write(bytes(codes_blob))
    with open(os.path.join(path, EXPANSION_SCALES), "wb") as fh:
        fh.write(bytes(scales_blob))
    logger.info("saved %d expanded layers to %s", len(expanded.layers), path)


def _int8_region(blob: bytes, offset: int, length: int, what: str) -> np.ndarray:
    if offset < 0 or offset + length > len(blob):
        raise ModelFormatError(f"{what}: codes [{offset}, {offset + length}) outside codes.bin")
    return np.frombuffer(blob, dtype=np.int8, count=length, offset=offset).copy()


def load_expanded(path: str) -> ExpandedModel:
    """Read an expanded model directory, rejecting codes outside their logical range."""
    manifest_path = os.path.join(path, EXPANSION_MANIFEST)
    manifest = _read_json(manifest_path)
    _check_version(manifest, manifest_path)
    masks = _read_json(os.path.join(path, EXPANSION_MASKS)).get("layers", [])
    codes_blob = _read_blob(os.path.join(path, EXPANSION_CODES))
    scales_blob = _read_blob(os.path.join(path, EXPANSION_SCALES))

    layers: List[ExpandedLayer] = []
    try:
        for index, entry in enumerate(manifest["layers"]):
            shape_fields = dict(entry["shape"])
            shape_fields["bias"] = "bias_offset" in entry
            shape = LayerShape(**shape_fields)
            layer_masks = masks[index] if index < len(masks) else []
            residues = []
            for r_index, r in enumerate(entry["residues"]):
                what = f"{shape.name} residue {r['order']}"
                codes = _int8_region(codes_blob, int(r["codes_offset"]), int(r["codes_len"]), what)
                if codes.size != int(np.prod(shape.weight_shape)):
                    raise ModelFormatError(f"{what}: {codes.size} codes for {shape.weight_shape}")
                bits, grid = int(r["bits"]), r.get("grid", UNIFORM_GRID)
                if not 1 <= bits <= 8:
                    raise ModelFormatError(f"{what}: bit-width {bits} outside [1, 8]")
                lo, hi = (-1, 1) if grid == BINARY_GRID else (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
                bad = codes[(codes < lo) | (codes > hi)]
                if bad.size:
                    raise ModelFormatError(
                        f"{what}: code {int(bad[0])} outside [{lo}, {hi}] for {bits}-bit {grid} grid"
                    )
                n_scales = int(r["scales_len"]) // _F32.itemsize
                scales = _f32_region(scales_blob, int(r["scales_offset"]), int(r["scales_len"]),
                                     n_scales, f"{what} scales")
                mask = layer_masks[r_index] if r_index < len(layer_masks) else []
                residues.append(
                    Residue(
                        order=int(r["order"]),
                        q=QuantizedTensor(codes.reshape(shape.weight_shape), scales, bits, grid),
                        mask=np.asarray(mask, dtype=np.int64) if mask else None,
                    )
                )
            bias = None
            if shape.bias:
                bias = _f32_region(scales_blob, int(entry["bias_offset"]), int(entry["bias_len"]),
                                   shape.out_channels, f"{shape.name} bias")
            layers.append(
                ExpandedLayer(shape=shape, residues=tuple(residues), bits=int(entry["bits"]),
                              gamma=entry.get("gamma"), bias=bias)
            )
        act_scales = manifest.get("act_scales")
        return ExpandedModel(
            layers=tuple(layers),
            bits=int(manifest["bits"]),
            order=int(manifest["order"]),
            budgets=tuple(manifest.get("budgets", [])),
            operator=manifest.get("operator", "uniform"),
            act_bits=manifest.get("act_bits"),
            act_scales=None if act_scales is None else tuple(act_scales),
            metadata=dict(manifest.get("metadata", {})),
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, QuantizationError) as exc:
        raise ModelFormatError(f"{path}: invalid expanded model ({exc})") from None


# ---------------------------------------------------------------------------
# Tensor files
# ---------------------------------------------------------------------------
def write_tensor_file(path: str, array: np.ndarray) -> None:
    """Write an ASCII shape line followed by little-endian float32 data."""
    data = np.ascontiguousarray(array, dtype=_F32)
    header = ",".join(str(n) for n in data.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_tensor_file(path: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise ModelFormatError(f"missing file: {path}")
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        text = header.decode("ascii").strip()
        shape = tuple(int(n) for n in text.split(",")) if text else ()
    except (UnicodeDecodeError, ValueError):
        raise ModelFormatError(f"{path}: malformed shape line") from None
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != count * _F32.itemsize:
        raise ModelFormatError(
            f"{path}: shape {shape} needs {count * _F32.itemsize} bytes, found {len(payload)}"
        )
    values = np.frombuffer(payload, dtype=_F32).astype(np.float32).reshape(shape)
    if not np.all(np.isfinite(values)):
        raise ModelFormatError(f"{path}: non-finite values")
    return values
