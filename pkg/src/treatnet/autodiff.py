"""Reverse-mode gradients, Adam, cross-entropy, training and evaluation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError, StaleCacheError
from .graph import ActivationCache, LayerKind, Mode, ModelGraph, forward, predict

log = logging.getLogger(__name__)

NUM_CLASSES = 3
PROB_FLOOR = 1e-12


def _check_labels(labels, n=None, num_classes=NUM_CLASSES):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be a 1-d integer array, got {labels.dtype} {labels.shape}")
    if n is not None and labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {n}")
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        raise ConfigError(f"label {labels[bad][0]} out of range [0, {num_classes})")
    return labels


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log-likelihood; probabilities are floored at 1e-12."""
    probs = np.asarray(probs)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


@dataclass
class Gradients:
    params: list[dict[str, np.ndarray]]
    input: np.ndarray | None = None
    activations: dict[int, np.ndarray] = field(default_factory=dict)
    logits: np.ndarray | None = None


def logit_gradient(probs, labels):
    """Fused softmax + cross-entropy gradient at the logits, ``(p - y) / N``."""
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    return g / len(labels)


def backward(model: ModelGraph, cache: ActivationCache, labels=None, *, grad_output=None,
             input_grad: bool = False, param_grads: bool = True,
             keep_activations=()) -> Gradients:
    """Backpropagate through the layers recorded in ``cache``.

    With ``labels`` the loss is the mean cross-entropy of the cached softmax
    output. Otherwise ``grad_output`` is the gradient of some scalar with
    respect to whatever the cached forward returned (logits if it stopped
    before the softmax). ``keep_activations`` lists layer indices whose
    output gradients should be returned.
    """
    if cache.consumed:
        raise StaleCacheError("activation cache was already consumed by a backward pass")
    if cache.model_ref is not model or cache.model_version != model.version:
        raise StaleCacheError("activation cache was produced by a different model state")
    if len(cache.entries) == 0 and model.layers:
        raise StaleCacheError("activation cache is empty")
    cache.consumed = True
    n_done = len(cache.entries)

    if labels is not None:
        if cache.stopped_before_softmax or model.layers[n_done - 1].kind is not LayerKind.SOFTMAX:
            raise ConfigError("loss gradients need a forward pass that ends in softmax")
        g = logit_gradient(cache.outputs[-1], np.asarray(labels))
        start = n_done - 2
    elif grad_output is not None:
        out = cache.outputs[-1]
        g = np.asarray(grad_output, dtype=out.dtype)
        if g.shape != out.shape:
            raise ShapeError(f"grad_output shape {g.shape} != forward output {out.shape}")
        start = n_done - 1
    else:
        raise ConfigError("backward needs labels or grad_output")

    keep = set(keep_activations)
    grads = Gradients(params=[{} for _ in model.layers])
    if labels is not None:
        grads.logits = g
    for i in range(start, -1, -1):
        if i in keep:
            grads.activations[i] = g
        spec = model.layers[i]
        saved = cache.entries[i].data
        need_dx = i > 0 or input_grad
        g = _layer_backward(spec, model, i, saved, g, grads.params[i], need_dx, param_grads)
    if input_grad:
        grads.input = g
    return grads


def _layer_backward(spec, model, i, saved, g, out, need_dx, param_grads):
    kind = spec.kind
    group = model.params[i]
    if kind is LayerKind.CONV3X3:
        (x,) = saved
        cout = spec.size
        g2 = g.reshape(-1, cout)
        if param_grads:
            out["kernel"] = (T.im2col(x).T @ g2).reshape(group["kernel"].shape)
            out["bias"] = g2.sum(axis=0)
        if not need_dx:
            return None
        return T.col2im(g2 @ group["kernel"].reshape(-1, cout).T, x.shape)
    if kind is LayerKind.BATCHNORM:
        xhat, inv_std, gamma, batch_stats = saved
        axes = tuple(range(g.ndim - 1))
        if not batch_stats:
            x, mean = xhat
            xhat = (x - mean) * inv_std
        if param_grads:
            out["gamma"] = (g * xhat).sum(axis=axes)
            out["beta"] = g.sum(axis=axes)
        if not need_dx:
            return None
        if not batch_stats:
            return g * (gamma * inv_std)
        m = g.size // g.shape[-1]
        sum_g = g.sum(axis=axes)
        sum_gx = (g * xhat).sum(axis=axes)
        return (gamma * inv_std / m) * (m * g - sum_g - xhat * sum_gx)
    if kind is LayerKind.RELU:
        (y,) = saved
        return g * (y > 0)
    if kind is LayerKind.MAXPOOL2:
        idx, shape = saved
        n, h, w, c = shape
        slots = np.zeros(idx.shape + (4,), dtype=g.dtype)
        np.put_along_axis(slots, idx[..., None], g[..., None], axis=-1)
        # (N, h2, w2, C, 2, 2) -> (N, h2, 2, w2, 2, C)
        return slots.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)
    if kind is LayerKind.DROPOUT:
        return g * saved[0] if saved else g
    if kind is LayerKind.FLATTEN:
        return g.reshape(saved[0])
    if kind is LayerKind.GLOBAL_AVG_POOL:
        n, h, w, c = saved[0]
        return np.broadcast_to(g[:, None, None, :] / (h * w), (n, h, w, c)).copy()
    if kind is LayerKind.DENSE:
        (x,) = saved
        if param_grads:
            out["weight"] = x.T @ g
            out["bias"] = g.sum(axis=0)
        return g @ group["weight"].T if need_dx else None
    if kind is LayerKind.SOFTMAX:
        (p,) = saved
        return p * (g - (g * p).sum(axis=-1, keepdims=True))
    raise ConfigError(f"no backward rule for {spec}")


def loss_and_grads(model, batch, labels, rng=None, update_stats=False):
    cache = ActivationCache()
    probs = forward(model, batch, cache=cache, rng=rng, update_stats=update_stats)
    grads = backward(model, cache, labels)
    return cross_entropy(probs, labels), probs, grads


class Adam:
    """Adam with bias-corrected moments. Updates parameter arrays in place."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict) -> None:
        """``params`` and ``grads`` map the same keys to same-shaped arrays."""
        for key, p in params.items():
            if key not in grads:
                raise ShapeError(f"no gradient for parameter {key!r}")
            if grads[key].shape != p.shape:
                raise ShapeError(
                    f"gradient for {key!r} has shape {grads[key].shape}, parameter {p.shape}"
                )
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, p in params.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def step_model(self, model: ModelGraph, grads: Gradients) -> None:
        params = {(i, name): arr for i, name, arr in model.trainable()}
        flat = {(i, name): grads.params[i][name] for i, name in params}
        self.step(params, flat)
        model.version += 1


# -- training ----------------------------------------------------------------

@dataclass
class Dataset:
    """Images (N, H, W, 3) in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ShapeError(
                f"dataset images {self.images.shape} and labels {self.labels.shape} disagree"
            )

    def __len__(self):
        return len(self.labels)


@dataclass
class TrainConfig:
    epochs: int = 35
    batch_size: int = 32
    lr: float = 1e-4
    augment: bool = True
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    CSV_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_HEADER)
        for e in self.epochs:
            writer.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.train_acc:.6f}",
                             f"{e.val_loss:.6f}", f"{e.val_acc:.6f}"])
        return buf.getvalue()


def train(model: ModelGraph, train_set: Dataset, val_set: Dataset,
          config: TrainConfig = TrainConfig(), augment_fn=None, progress=None) -> TrainReport:
    """Mini-batch Adam on sparse cross-entropy; leaves the model in INFER mode.

    ``augment_fn(image, rng)`` is applied per training sample when
    ``config.augment`` is set.
    """
    if config.epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {config.epochs}")
    if config.batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {config.batch_size}")
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation splits must be non-empty")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng, aug_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    opt = Adam(lr=config.lr)
    report = TrainReport()
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = shuffle_rng.permutation(n)
        loss_sum = correct = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = train_set.images[idx]
            if config.augment and augment_fn is not None:
                batch = np.stack([augment_fn(img, aug_rng) for img in batch])
            labels = train_set.labels[idx]
            loss, probs, grads = loss_and_grads(model, batch, labels, drop_rng, update_stats=True)
            opt.step_model(model, grads)
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels).sum())
        model.eval()
        val_probs = predict(model, val_set.images)
        stats = EpochStats(
            epoch,
            loss_sum / n,
            correct / n,
            cross_entropy(val_probs, val_set.labels),
            float((val_probs.argmax(axis=1) == val_set.labels).mean()),
        )
        report.epochs.append(stats)
        log.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch,
                 stats.train_loss, stats.train_acc, stats.val_loss, stats.val_acc)
        if progress is not None:
            progress(stats)
    model.eval()
    return report


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # confusion[true, predicted]


def confusion_matrix(y_true, y_pred, num_classes=NUM_CLASSES):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def evaluate(model: ModelGraph, split: Dataset, predict_fn=None) -> EvalResult:
    if len(split) == 0:
        raise DataError("cannot evaluate on an empty split")
    probs = predict_fn(split.images) if predict_fn else predict(model, split.images)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(split.labels, pred, probs.shape[1])
    return EvalResult(float(np.trace(cm) / cm.sum()), cm)
