"""GradCAM and Integrated Gradients over pre-softmax class scores."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import backward
from .data import resize_bilinear, write_pgm
from .errors import ConfigError, ShapeError
from .graph import ActivationCache, LayerKind, Mode, ModelGraph, forward


@dataclass
class AttributionMap:
    values: np.ndarray  # (H, W)
    method: str  # "gradcam" or "integrated_gradients"
    target_class: int
    steps: int | None = None
    baseline: str | None = None
    completeness_gap: float | None = None
    score_delta: float | None = None  # F(x) - F(baseline)
    pixel_attributions: np.ndarray | None = None  # (H, W, C), IG only
    layer_index: int | None = None  # GradCAM only


def _check_inputs(model, image, target_class):
    if model.mode is not Mode.INFER:
        raise ConfigError("attribution needs a model in INFER mode")
    image = np.asarray(image)
    if image.shape != model.input_shape:
        raise ShapeError(f"image shape {image.shape} does not match model input {model.input_shape}")
    n_classes = model.output_shape[-1]
    if not 0 <= int(target_class) < n_classes:
        raise ConfigError(f"target class {target_class} out of range [0, {n_classes})")
    return image


def class_score_gradients(model: ModelGraph, batch, target_class: int):
    """Logit of ``target_class`` and its input gradient for every row of ``batch``."""
    cache = ActivationCache()
    logits = forward(model, batch, cache=cache, logits=True)
    seed = np.zeros_like(logits)
    seed[:, target_class] = 1.0
    grads = backward(model, cache, grad_output=seed, input_grad=True, param_grads=False)
    return logits[:, target_class], grads.input


def integrated_gradients(model: ModelGraph, image, target_class: int, steps: int = 64,
                         baseline=None, chunk: int = 32) -> AttributionMap:
    """Midpoint Riemann sum of gradients along the straight path baseline -> image."""
    image = _check_inputs(model, image, target_class)
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if baseline is None:
        baseline = np.zeros_like(image)
        desc = "zeros"
    else:
        baseline = np.asarray(baseline)
        desc = "custom"
        if baseline.shape != image.shape:
            raise ShapeError(f"baseline shape {baseline.shape} != image shape {image.shape}")
    x = image.astype(np.float64)
    b = baseline.astype(np.float64)
    diff = x - b
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    total = np.zeros_like(x)
    for start in range(0, steps, chunk):
        a = alphas[start:start + chunk, None, None, None]
        points = (b + a * diff).astype(model.dtype)
        _, g = class_score_gradients(model, points, target_class)
        total += g.astype(np.float64).sum(axis=0)
    attributions = diff * (total / steps)
    ends, _ = class_score_gradients(model, np.stack([x, b]).astype(model.dtype), target_class)
    delta = float(ends[0]) - float(ends[1])
    gap = abs(float(attributions.sum()) - delta)
    return AttributionMap(attributions.sum(axis=-1), "integrated_gradients", int(target_class),
                          steps=steps, baseline=desc, completeness_gap=gap, score_delta=delta,
                          pixel_attributions=attributions)


def default_gradcam_layer(model: ModelGraph) -> int:
    """ReLU output of the last convolution block."""
    convs = model.conv_layer_indices()
    if not convs:
        raise ConfigError("model has no convolution layers")
    last = convs[-1]
    i = last + 1
    while i < len(model.layers) and model.layers[i].kind in (LayerKind.BATCHNORM, LayerKind.RELU):
        i += 1
    return i - 1


def _conv_output_layers(model):
    ok = set()
    for c in model.conv_layer_indices():
        ok.add(c)
        i = c + 1
        while i < len(model.layers) and model.layers[i].kind in (LayerKind.BATCHNORM, LayerKind.RELU):
            ok.add(i)
            i += 1
    return ok


def gradcam(model: ModelGraph, image, target_class: int, layer_index: int | None = None) -> AttributionMap:
    image = _check_inputs(model, image, target_class)
    if layer_index is None:
        layer_index = default_gradcam_layer(model)
    if layer_index not in _conv_output_layers(model):
        raise ConfigError(
            f"layer {layer_index} is not a convolution output; choose one of "
            f"{sorted(_conv_output_layers(model))}"
        )
    cache = ActivationCache()
    logits = forward(model, image[None], cache=cache, logits=True)
    seed = np.zeros_like(logits)
    seed[0, target_class] = 1.0
    grads = backward(model, cache, grad_output=seed, param_grads=False,
                     keep_activations=(layer_index,))
    acts = cache.outputs[layer_index][0].astype(np.float64)
    d_acts = grads.activations[layer_index][0].astype(np.float64)
    weights = d_acts.mean(axis=(0, 1))
    cam = np.maximum((acts * weights).sum(axis=-1), 0.0)
    cam = np.maximum(resize_bilinear(cam, image.shape[:2]), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return AttributionMap(cam, "gradcam", int(target_class), layer_index=layer_index)


# Piecewise-linear blue -> cyan -> yellow -> red lookup, 256 entries.
_LUT_STOPS = np.array([[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def colormap_lut(n: int = 256) -> np.ndarray:
    pos = np.linspace(0, len(_LUT_STOPS) - 1, n)
    lo = np.floor(pos).astype(int).clip(0, len(_LUT_STOPS) - 2)
    frac = (pos - lo)[:, None]
    return _LUT_STOPS[lo] * (1 - frac) + _LUT_STOPS[lo + 1] * frac


def overlay(image, heat, alpha: float = 0.5) -> np.ndarray:
    """Blend a [0, 1] heatmap, colored through the fixed LUT, over an RGB image."""
    heat = np.clip(np.asarray(heat, dtype=np.float64), 0.0, 1.0)
    colored = colormap_lut()[np.rint(heat * 255).astype(int)]
    return ((1 - alpha) * np.asarray(image, dtype=np.float64) + alpha * colored).astype(np.float32)


def write_attribution(amap: AttributionMap, pgm_path, csv_path=None) -> None:
    write_pgm(pgm_path, amap.values)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in amap.values:
                w.writerow([repr(float(v)) for v in row])
