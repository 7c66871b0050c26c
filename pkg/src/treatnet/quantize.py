"""Post-training quantization and the CNM1 binary model format.

File layout (all integers little-endian)::

    magic "CNM1" | version u16 | scheme u8 | layer_count u16
    layer_count x { kind u8 | size u32 | rate f32 | tensor_count u8
                    tensor_count x { dtype u8 | ndim u8 | dims u32[ndim]
                                     | scale_count u32 | scales f32[]
                                     | raw element bytes } }
    input H u32 | W u32 | C u32 | seed u64 | bn_eps f64
    | class_count u8 | class_count x { name_len u8 | utf-8 name }

Tensor order within a layer follows ``PARAM_ORDER``. QI8 tensors are always
quantized along their last axis.
"""

from __future__ import annotations

import enum
import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ModelFormatError,
    ShapeError,
    TreatNetError,
    TruncatedFileError,
    UnknownSchemeError,
    UnsupportedVersionError,
)
from .graph import CLASS_NAMES, LayerKind, LayerSpec, Mode, ModelGraph, fold_batchnorm, forward
from .tensor import DType, Tensor, quantize_symmetric

MAGIC = b"CNM1"
FORMAT_VERSION = 1

PARAM_ORDER = {
    LayerKind.CONV3X3: ("kernel", "bias"),
    LayerKind.BATCHNORM: ("gamma", "beta", "moving_mean", "moving_var"),
    LayerKind.DENSE: ("weight", "bias"),
}
WEIGHT_NAMES = ("kernel", "weight")


class QuantScheme(enum.IntEnum):
    STANDARD32 = 0
    FLOAT16 = 1
    DYNAMIC_INT8 = 2

    @classmethod
    def parse(cls, text) -> "QuantScheme":
        key = str(text).strip().lower().replace("-", "").replace("_", "")
        aliases = {"standard32": cls.STANDARD32, "standard": cls.STANDARD32, "f32": cls.STANDARD32,
                   "float32": cls.STANDARD32, "float16": cls.FLOAT16, "f16": cls.FLOAT16,
                   "dynamicint8": cls.DYNAMIC_INT8, "dynamic": cls.DYNAMIC_INT8,
                   "int8": cls.DYNAMIC_INT8}
        if key not in aliases:
            raise ConfigError(f"unknown scheme {text!r}; choose standard32, float16 or dynamic_int8")
        return aliases[key]

    @property
    def label(self):
        return {0: "standard32", 1: "float16", 2: "dynamic_int8"}[int(self)]


def _expected_dtype(scheme, name):
    if scheme is QuantScheme.FLOAT16:
        return DType.F16
    if scheme is QuantScheme.DYNAMIC_INT8 and name in WEIGHT_NAMES:
        return DType.QI8
    return DType.F32


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    tensors: tuple[dict[str, Tensor], ...]
    scheme: QuantScheme
    class_names: tuple[str, ...] = CLASS_NAMES
    seed: int = 0
    bn_eps: float = 1e-3

    def __post_init__(self):
        if len(self.layers) != len(self.tensors):
            raise ShapeError(f"{len(self.tensors)} tensor groups for {len(self.layers)} layers")
        for i, (spec, group) in enumerate(zip(self.layers, self.tensors)):
            names = PARAM_ORDER.get(spec.kind, ())
            if set(group) != set(names):
                raise ShapeError(f"layer {i} ({spec}) has tensors {sorted(group)}, expected {list(names)}")
            for name in names:
                want = _expected_dtype(self.scheme, name)
                if group[name].dtype is not want:
                    raise TreatNetError(
                        f"layer {i} {name}: {group[name].dtype.name} storage under scheme "
                        f"{self.scheme.label} (expected {want.name})"
                    )
        # dequantized graph doubles as a shape check
        _ = self.graph

    @functools.cached_property
    def graph(self) -> ModelGraph:
        """Dequantized float32 graph in INFER mode."""
        params = [{k: np.array(t.to_f32()) for k, t in g.items()} for g in self.tensors]
        return ModelGraph(self.input_shape, list(self.layers), params, mode=Mode.INFER,
                          seed=self.seed, bn_eps=self.bn_eps)

    def param_bytes(self) -> int:
        return sum(t.data.nbytes for g in self.tensors for t in g.values())


def quantize(model: ModelGraph, scheme: QuantScheme, class_names=CLASS_NAMES) -> QuantizedModel:
    """Fold batch norm (when present) and store parameters under ``scheme``."""
    scheme = QuantScheme(scheme)
    if model.mode is not Mode.INFER:
        raise ConfigError("quantize needs a model in INFER mode")
    if any(s.kind is LayerKind.BATCHNORM for s in model.layers):
        model = fold_batchnorm(model)
    tensors = []
    for spec, group in zip(model.layers, model.params):
        out = {}
        for name in PARAM_ORDER.get(spec.kind, ()):
            w = np.asarray(group[name], dtype=np.float32)
            kind = _expected_dtype(scheme, name)
            if kind is DType.F16:
                out[name] = Tensor(w.shape, DType.F16, w.astype(np.float16))
            elif kind is DType.QI8:
                out[name] = quantize_symmetric(w, channel_axis=-1)
            else:
                out[name] = Tensor(w.shape, DType.F32, w)
        tensors.append(out)
    return QuantizedModel(model.input_shape, tuple(model.layers), tuple(tensors), scheme,
                          tuple(class_names), model.seed, model.bn_eps)


def quantized_forward(qm: QuantizedModel, batch, logits=False) -> np.ndarray:
    return forward(qm.graph, batch, logits=logits)


def quantized_predict(qm: QuantizedModel, batch, batch_size=64) -> np.ndarray:
    outs = [quantized_forward(qm, batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)]
    return np.concatenate(outs)


# -- serialization -----------------------------------------------------------

_HEAD = struct.Struct("<4sHBH")
_LAYER = struct.Struct("<BIfB")
_TENSOR_HEAD = struct.Struct("<BB")
_META = struct.Struct("<IIIQd")


def _tensor_bytes(t: Tensor) -> bytes:
    parts = [_TENSOR_HEAD.pack(int(t.dtype), len(t.shape)),
             struct.pack(f"<{len(t.shape)}I", *t.shape)]
    scales = t.scales if t.scales is not None else np.zeros(0, np.float32)
    parts.append(struct.pack("<I", scales.size))
    parts.append(scales.astype("<f4").tobytes())
    parts.append(t.data.astype(t.data.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def to_bytes(qm: QuantizedModel) -> bytes:
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, int(qm.scheme), len(qm.layers))]
    for spec, group in zip(qm.layers, qm.tensors):
        names = PARAM_ORDER.get(spec.kind, ())
        parts.append(_LAYER.pack(int(spec.kind), spec.size, spec.rate, len(names)))
        parts.extend(_tensor_bytes(group[name]) for name in names)
    parts.append(_META.pack(*qm.input_shape, qm.seed, qm.bn_eps))
    parts.append(struct.pack("<B", len(qm.class_names)))
    for name in qm.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<B", len(raw)) + raw)
    return b"".join(parts)


def model_size_bytes(qm: QuantizedModel) -> int:
    """Length of :func:`to_bytes` output, computed from the layout."""
    size = _HEAD.size
    for spec, group in zip(qm.layers, qm.tensors):
        size += _LAYER.size
        for t in group.values():
            n_scales = 0 if t.scales is None else t.scales.size
            size += _TENSOR_HEAD.size + 4 * len(t.shape) + 4 + 4 * n_scales + t.data.nbytes
    size += _META.size + 1 + sum(1 + len(n.encode("utf-8")) for n in qm.class_names)
    return size


def serialize(qm: QuantizedModel, path) -> int:
    data = to_bytes(qm)
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        end = self.pos + n
        if end > len(self.data):
            raise TruncatedFileError(
                f"file truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"{len(self.data) - self.pos} available"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, st: struct.Struct, what):
        return st.unpack(self.take(st.size, what))


_NP = {DType.F32: "<f4", DType.F16: "<f2", DType.QI8: "i1"}


def _read_tensor(r: _Reader, where):
    dtype_code, ndim = r.unpack(_TENSOR_HEAD, f"{where} header")
    try:
        dtype = DType(dtype_code)
    except ValueError:
        raise ModelFormatError(f"{where}: unknown element type {dtype_code}") from None
    if ndim == 0:
        raise ModelFormatError(f"{where}: zero-rank tensor")
    dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{where} dims"))
    (n_scales,) = struct.unpack("<I", r.take(4, f"{where} scale count"))
    scales = np.frombuffer(r.take(4 * n_scales, f"{where} scales"), dtype="<f4")
    count = math.prod(dims)
    itemsize = np.dtype(_NP[dtype]).itemsize
    raw = np.frombuffer(r.take(count * itemsize, f"{where} data"), dtype=_NP[dtype])
    try:
        if dtype is DType.QI8:
            return Tensor(dims, dtype, raw, scales=scales, channel_axis=ndim - 1)
        if n_scales:
            raise ModelFormatError(f"{where}: {dtype.name} tensor carries scales")
        return Tensor(dims, dtype, raw)
    except ModelFormatError:
        raise
    except TreatNetError as exc:
        raise ModelFormatError(f"{where}: {exc}") from None


def from_bytes(data: bytes) -> QuantizedModel:
    r = _Reader(bytes(data))
    if len(data) < 4 or data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(bytes(data)):
            raise TruncatedFileError(f"file truncated inside magic ({len(data)} bytes)")
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    _, version, scheme_code, n_layers = r.unpack(_HEAD, "header")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} is not supported (want {FORMAT_VERSION})")
    try:
        scheme = QuantScheme(scheme_code)
    except ValueError:
        raise UnknownSchemeError(f"unknown quantization scheme code {scheme_code}") from None
    layers, tensors = [], []
    for i in range(n_layers):
        kind_code, size, rate, n_tensors = r.unpack(_LAYER, f"layer {i} record")
        try:
            spec = LayerSpec(LayerKind(kind_code), size=size, rate=float(np.float32(rate)))
        except (ValueError, TreatNetError) as exc:
            raise ModelFormatError(f"layer {i}: invalid layer record ({exc})") from None
        names = PARAM_ORDER.get(spec.kind, ())
        if n_tensors != len(names):
            raise ModelFormatError(f"layer {i} ({spec}): {n_tensors} tensors, expected {len(names)}")
        tensors.append({name: _read_tensor(r, f"layer {i} {name}") for name in names})
        layers.append(spec)
    h, w, c, seed, bn_eps = r.unpack(_META, "metadata")
    (n_names,) = r.unpack(struct.Struct("<B"), "class count")
    names = []
    for j in range(n_names):
        (length,) = r.unpack(struct.Struct("<B"), f"class name {j} length")
        try:
            names.append(r.take(length, f"class name {j}").decode("utf-8"))
        except UnicodeDecodeError:
            raise ModelFormatError(f"class name {j} is not valid UTF-8") from None
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after model")
    try:
        return QuantizedModel((h, w, c), tuple(layers), tuple(tensors), scheme, tuple(names),
                              seed, bn_eps)
    except ModelFormatError:
        raise
    except TreatNetError as exc:
        raise ModelFormatError(f"inconsistent model: {exc}") from None


def deserialize(path) -> QuantizedModel:
    return from_bytes(Path(path).read_bytes())
