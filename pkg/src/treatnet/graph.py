"""Linear-chain model description, the ConvNet builder, execution and fusion."""

from __future__ import annotations

import copy
import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, UnsupportedPatternError

CLASS_NAMES = ("lying", "sitting", "standing")
SUPPORTED_RESOLUTIONS = (32, 64, 256)
CONVNET_FILTERS = (32, 64, 128, 256)
DENSE_UNITS = 128
DROPOUT_RATE = 0.20
BN_EPS = 1e-3
BN_MOMENTUM = 0.99


class LayerKind(enum.IntEnum):
    CONV3X3 = 1
    BATCHNORM = 2
    RELU = 3
    MAXPOOL2 = 4
    DROPOUT = 5
    FLATTEN = 6
    DENSE = 7
    SOFTMAX = 8
    GLOBAL_AVG_POOL = 9


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    size: int = 0  # conv filters or dense units
    rate: float = 0.0  # dropout probability

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind in (LayerKind.CONV3X3, LayerKind.DENSE) and self.size < 1:
            raise ConfigError(f"{self.kind.name} needs size >= 1, got {self.size}")
        if self.kind is LayerKind.DROPOUT and not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")

    def __str__(self):
        if self.kind in (LayerKind.CONV3X3, LayerKind.DENSE):
            return f"{self.kind.name}({self.size})"
        if self.kind is LayerKind.DROPOUT:
            return f"DROPOUT({self.rate:g})"
        return self.kind.name


def Conv3x3(filters):
    return LayerSpec(LayerKind.CONV3X3, size=filters)


def Dense(units):
    return LayerSpec(LayerKind.DENSE, size=units)


def Dropout(rate):
    return LayerSpec(LayerKind.DROPOUT, rate=rate)


BatchNorm = LayerSpec(LayerKind.BATCHNORM)
ReLU = LayerSpec(LayerKind.RELU)
MaxPool2 = LayerSpec(LayerKind.MAXPOOL2)
Flatten = LayerSpec(LayerKind.FLATTEN)
Softmax = LayerSpec(LayerKind.SOFTMAX)
GlobalAvgPool = LayerSpec(LayerKind.GLOBAL_AVG_POOL)

TRAINABLE = {
    LayerKind.CONV3X3: ("kernel", "bias"),
    LayerKind.BATCHNORM: ("gamma", "beta"),
    LayerKind.DENSE: ("weight", "bias"),
}
RUNNING_STATS = ("moving_mean", "moving_var")


def infer_shapes(input_shape, layers) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer; raises on any malformed chain."""
    shape = tuple(int(d) for d in input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeError(f"input shape must be (H, W, C) with positive dims, got {shape}")
    shapes = []
    for i, spec in enumerate(layers):
        kind = spec.kind
        where = f"layer {i} ({spec}) with input {shape}"
        if kind in (LayerKind.CONV3X3, LayerKind.MAXPOOL2, LayerKind.FLATTEN,
                    LayerKind.GLOBAL_AVG_POOL) and len(shape) != 3:
            raise ShapeError(f"{where}: needs an (H, W, C) input")
        if kind in (LayerKind.DENSE, LayerKind.SOFTMAX) and len(shape) != 1:
            raise ShapeError(f"{where}: needs a flat input")
        if kind is LayerKind.CONV3X3:
            shape = (shape[0], shape[1], spec.size)
        elif kind is LayerKind.MAXPOOL2:
            if shape[0] % 2 or shape[1] % 2:
                raise ShapeError(f"{where}: spatial dims must be even")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif kind is LayerKind.FLATTEN:
            shape = (shape[0] * shape[1] * shape[2],)
        elif kind is LayerKind.GLOBAL_AVG_POOL:
            shape = (shape[2],)
        elif kind is LayerKind.DENSE:
            shape = (spec.size,)
        elif kind is LayerKind.SOFTMAX and i != len(layers) - 1:
            raise ShapeError(f"{where}: softmax must be the last layer")
        shapes.append(shape)
    return shapes


@dataclass(eq=False)
class ModelGraph:
    """Ordered layers plus their parameters.

    ``params[i]`` maps parameter names to arrays for layer ``i``. BatchNorm
    layers also hold their running statistics there (not trainable).
    """

    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    mode: Mode = Mode.INFER
    seed: int = 0
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM
    version: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = list(self.layers)
        self.shapes = infer_shapes(self.input_shape, self.layers)
        if len(self.params) != len(self.layers):
            raise ShapeError(f"{len(self.params)} parameter groups for {len(self.layers)} layers")
        for i, (spec, group) in enumerate(zip(self.layers, self.params)):
            for name, shape in _param_shapes(spec, self._in_shape(i)).items():
                if name not in group:
                    raise ShapeError(f"layer {i} ({spec}) is missing parameter {name!r}")
                if tuple(group[name].shape) != shape:
                    raise ShapeError(
                        f"layer {i} ({spec}) parameter {name!r} has shape "
                        f"{tuple(group[name].shape)}, expected {shape}"
                    )
        if self.rng is None:
            self.rng = np.random.default_rng([self.seed, 1])

    def _in_shape(self, i):
        return self.input_shape if i == 0 else self.shapes[i - 1]

    @property
    def output_shape(self):
        return self.shapes[-1] if self.shapes else self.input_shape

    @property
    def dtype(self):
        for group in self.params:
            for arr in group.values():
                return arr.dtype
        return np.dtype(np.float32)

    def trainable(self):
        """Yield ``(layer_index, name, array)`` for every trainable parameter."""
        for i, spec in enumerate(self.layers):
            for name in TRAINABLE.get(spec.kind, ()):
                yield i, name, self.params[i][name]

    def train(self):
        self.mode = Mode.TRAIN
        return self

    def eval(self):
        self.mode = Mode.INFER
        return self

    def copy(self):
        new = copy.copy(self)
        new.layers = list(self.layers)
        new.params = [{k: v.copy() for k, v in g.items()} for g in self.params]
        new.rng = copy.deepcopy(self.rng)
        return new

    def astype(self, dtype):
        """Copy with every parameter cast (float64 is used for gradient checks)."""
        new = self.copy()
        new.params = [{k: v.astype(dtype) for k, v in g.items()} for g in new.params]
        return new

    def conv_layer_indices(self):
        return [i for i, s in enumerate(self.layers) if s.kind is LayerKind.CONV3X3]


def _param_shapes(spec, in_shape):
    if spec.kind is LayerKind.CONV3X3:
        return {"kernel": (3, 3, in_shape[-1], spec.size), "bias": (spec.size,)}
    if spec.kind is LayerKind.BATCHNORM:
        c = (in_shape[-1],)
        return {"gamma": c, "beta": c, "moving_mean": c, "moving_var": c}
    if spec.kind is LayerKind.DENSE:
        return {"weight": (in_shape[0], spec.size), "bias": (spec.size,)}
    return {}


def init_params(input_shape, layers, seed, dtype=np.float32):
    """He-uniform conv/dense weights, zero biases, identity BatchNorm."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(input_shape, layers)
    params = []
    for i, spec in enumerate(layers):
        in_shape = tuple(input_shape) if i == 0 else shapes[i - 1]
        group = {}
        for name, shape in _param_shapes(spec, in_shape).items():
            if name in ("kernel", "weight"):
                fan_in = int(np.prod(shape[:-1]))
                limit = np.sqrt(6.0 / fan_in)
                group[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
            elif name in ("gamma", "moving_var"):
                group[name] = np.ones(shape, dtype=dtype)
            else:
                group[name] = np.zeros(shape, dtype=dtype)
        params.append(group)
    return params


def build_model(input_shape, layers, seed=0, dtype=np.float32) -> ModelGraph:
    layers = list(layers)
    return ModelGraph(tuple(input_shape), layers, init_params(input_shape, layers, seed, dtype),
                      seed=seed)


def convnet_layers(filters=CONVNET_FILTERS, dense_units=DENSE_UNITS, dropout=DROPOUT_RATE,
                   num_classes=len(CLASS_NAMES)):
    layers = []
    for f in filters:
        layers += [Conv3x3(f), BatchNorm, ReLU, MaxPool2, Dropout(dropout)]
    layers += [Flatten, Dense(dense_units), ReLU, Dense(num_classes), Softmax]
    return layers


def build_convnet(resolution: int = 256, seed: int = 0) -> ModelGraph:
    """The four-block ConvNet classifier for square RGB inputs."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ConfigError(
            f"unsupported resolution {resolution}; supported: {list(SUPPORTED_RESOLUTIONS)}"
        )
    return build_model((resolution, resolution, 3), convnet_layers(), seed=seed)


def build_reduced_convnet(resolution=8, blocks=2, filters=None, dense_units=16, seed=0,
                          dtype=np.float32) -> ModelGraph:
    """Smaller variant of :func:`build_convnet` for tests and gradient checks."""
    filters = tuple(filters or CONVNET_FILTERS[:blocks])
    if len(filters) != blocks:
        raise ConfigError(f"{blocks} blocks but {len(filters)} filter counts")
    layers = convnet_layers(filters, dense_units)
    return build_model((resolution, resolution, 3), layers, seed=seed, dtype=dtype)


# -- execution ---------------------------------------------------------------

@dataclass
class _Saved:
    kind: LayerKind
    data: tuple = ()


class ActivationCache:
    """Forward intermediates needed by :func:`treatnet.autodiff.backward`."""

    _ids = itertools.count()

    def __init__(self):
        self.entries: list[_Saved] = []
        self.outputs: list[np.ndarray] = []
        self.model_ref = None
        self.model_version = None
        self.batch_size = None
        self.stopped_before_softmax = False
        self.consumed = False
        self.token = next(self._ids)


def _bn_forward(x, group, model, train, update_stats):
    axes = tuple(range(x.ndim - 1))
    gamma, beta = group["gamma"], group["beta"]
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            m = model.bn_momentum
            group["moving_mean"] *= m
            group["moving_mean"] += (1 - m) * mean.astype(group["moving_mean"].dtype)
            group["moving_var"] *= m
            group["moving_var"] += (1 - m) * var.astype(group["moving_var"].dtype)
        inv_std = 1.0 / np.sqrt(var + model.bn_eps)
        xhat = (x - mean) * inv_std
        return (gamma * xhat + beta).astype(x.dtype), (xhat, inv_std, gamma, True)
    mean, var = group["moving_mean"], group["moving_var"]
    out = T.batchnorm(x, gamma, beta, mean, var, model.bn_eps)
    inv_std = (1.0 / np.sqrt(var + model.bn_eps)).astype(x.dtype)
    # normalized input is rebuilt lazily in backward from (x, mean)
    return out, ((x, mean), inv_std, gamma, False)


def _dropout_forward(x, rate, rng):
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    return x * mask, mask


def forward(model: ModelGraph, batch: np.ndarray, *, cache: ActivationCache | None = None,
            logits: bool = False, rng: np.random.Generator | None = None,
            update_stats: bool = False, params=None) -> np.ndarray:
    """Run the chain on an (N, H, W, C) batch.

    Returns softmax probabilities, or pre-softmax scores with ``logits=True``.
    In TRAIN mode BatchNorm uses batch statistics (running statistics are only
    touched with ``update_stats``) and dropout draws masks from ``rng`` or the
    model's own generator. ``params`` overrides ``model.params`` (used by
    quantized execution).
    """
    x = np.asarray(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(
            f"batch shape {x.shape} does not match model input (N, {', '.join(map(str, model.input_shape))})"
        )
    params = model.params if params is None else params
    dtype = model.dtype if params is model.params else params_dtype(params)
    x = x.astype(dtype, copy=False)
    train = model.mode is Mode.TRAIN
    rng = rng if rng is not None else model.rng
    if cache is not None:
        cache.model_ref = model
        cache.model_version = model.version
        cache.batch_size = x.shape[0]
        cache.stopped_before_softmax = logits
    for i, spec in enumerate(model.layers):
        kind = spec.kind
        group = params[i]
        saved = ()
        if kind is LayerKind.CONV3X3:
            saved = (x,)
            x = T.conv2d(x, group["kernel"], group["bias"])
        elif kind is LayerKind.BATCHNORM:
            x, saved = _bn_forward(x, group, model, train, update_stats)
        elif kind is LayerKind.RELU:
            x = T.relu(x)
            saved = (x,)
        elif kind is LayerKind.MAXPOOL2:
            shape = x.shape
            x, idx = T.maxpool2d_argmax(x)
            saved = (idx, shape)
        elif kind is LayerKind.DROPOUT:
            if train:
                x, mask = _dropout_forward(x, spec.rate, rng)
                saved = (mask,)
        elif kind is LayerKind.FLATTEN:
            saved = (x.shape,)
            x = x.reshape(x.shape[0], -1)
        elif kind is LayerKind.GLOBAL_AVG_POOL:
            saved = (x.shape,)
            x = T.global_avg_pool(x)
        elif kind is LayerKind.DENSE:
            saved = (x,)
            x = T.dense(x, group["weight"], group["bias"])
        elif kind is LayerKind.SOFTMAX:
            if logits:
                break
            x = T.softmax(x)
            saved = (x,)
        if cache is not None:
            cache.entries.append(_Saved(kind, saved))
            cache.outputs.append(x)
    return x


def params_dtype(params):
    for group in params:
        for arr in group.values():
            return arr.dtype
    return np.dtype(np.float32)


def predict(model: ModelGraph, batch, batch_size=64) -> np.ndarray:
    """Inference-mode probabilities, evaluated in chunks."""
    mode = model.mode
    model.mode = Mode.INFER
    try:
        outs = [forward(model, batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)]
    finally:
        model.mode = mode
    return np.concatenate(outs) if outs else np.zeros((0,) + model.output_shape)


# -- fusion ------------------------------------------------------------------

def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Merge every inference-mode BatchNorm into the convolution before it."""
    if model.mode is not Mode.INFER:
        raise ConfigError("fold_batchnorm needs a model in INFER mode")
    layers, params = [], []
    for i, spec in enumerate(model.layers):
        group = model.params[i]
        if spec.kind is not LayerKind.BATCHNORM:
            layers.append(spec)
            params.append({k: v.copy() for k, v in group.items()})
            continue
        if not layers or layers[-1].kind is not LayerKind.CONV3X3:
            prev = layers[-1] if layers else "input"
            raise UnsupportedPatternError(
                f"layer {i}: BATCHNORM follows {prev}, only CONV3X3 -> BATCHNORM can be folded"
            )
        conv = params[-1]
        dtype = conv["kernel"].dtype
        scale = group["gamma"].astype(np.float64) / np.sqrt(
            group["moving_var"].astype(np.float64) + model.bn_eps
        )
        conv["kernel"] = (conv["kernel"].astype(np.float64) * scale).astype(dtype)
        conv["bias"] = (
            (conv["bias"].astype(np.float64) - group["moving_mean"]) * scale + group["beta"]
        ).astype(dtype)
    return ModelGraph(model.input_shape, layers, params, mode=Mode.INFER, seed=model.seed,
                      bn_eps=model.bn_eps, bn_momentum=model.bn_momentum)


# -- accounting --------------------------------------------------------------

def param_count(model: ModelGraph) -> int:
    """Trainable parameters (BatchNorm running statistics excluded)."""
    return sum(int(arr.size) for _, _, arr in model.trainable())


def flop_count(model: ModelGraph) -> int:
    """Floating-point operations for one forward pass of a single sample.

    Multiply-accumulates count as two. BatchNorm costs a multiply and an add
    per element, ReLU one op per element, 2x2 max pooling three compares per
    output, softmax three ops per class.
    """
    total = 0
    in_shape = model.input_shape
    for spec, out_shape in zip(model.layers, model.shapes):
        n_out = int(np.prod(out_shape))
        if spec.kind is LayerKind.CONV3X3:
            total += out_shape[0] * out_shape[1] * spec.size * 9 * in_shape[2] * 2
        elif spec.kind is LayerKind.DENSE:
            total += in_shape[0] * spec.size * 2
        elif spec.kind is LayerKind.BATCHNORM:
            total += 2 * n_out
        elif spec.kind is LayerKind.RELU:
            total += n_out
        elif spec.kind is LayerKind.MAXPOOL2:
            total += 3 * n_out
        elif spec.kind is LayerKind.GLOBAL_AVG_POOL:
            total += int(np.prod(in_shape))
        elif spec.kind is LayerKind.SOFTMAX:
            total += 3 * n_out
        in_shape = out_shape
    return total
