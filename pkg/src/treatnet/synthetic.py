"""Generated three-class image set with known object regions.

lying -> one dominant horizontal bar, sitting -> a centred blob,
standing -> one dominant vertical bar. Each sample comes with a boolean mask of
the pixels covered by the generating shape.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Dataset


def _render(label, rng, size):
    img = rng.uniform(0.0, 0.25, size=(size, size, 3))
    img += rng.uniform(0.0, 0.15, size=(1, 1, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    if label == 1:
        r = rng.uniform(0.12, 0.2) * size
        cy = size / 2 + rng.uniform(-0.08, 0.08) * size
        cx = size / 2 + rng.uniform(-0.08, 0.08) * size
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        length = int(rng.uniform(0.55, 0.8) * size)
        thick = int(rng.uniform(0.1, 0.16) * size)
        along = int(rng.integers(0, size - length + 1))
        across = int(rng.integers(int(0.15 * size), int(0.85 * size) - thick + 1))
        mask = np.zeros((size, size), dtype=bool)
        if label == 0:
            mask[across:across + thick, along:along + length] = True
        else:
            mask[along:along + length, across:across + thick] = True
    color = rng.uniform(0.6, 1.0, size=3)
    img[mask] = color + rng.normal(0.0, 0.03, size=(int(mask.sum()), 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def make_synthetic(n: int, size: int = 64, seed: int = 0):
    """``n`` samples with labels cycling 0, 1, 2. Returns (Dataset, masks)."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 3
    images, masks = [], []
    for label in labels:
        img, mask = _render(int(label), rng, size)
        images.append(img)
        masks.append(mask)
    order = rng.permutation(n)
    images = np.stack(images)[order] if n else np.zeros((0, size, size, 3), np.float32)
    masks = np.stack(masks)[order] if n else np.zeros((0, size, size), bool)
    return Dataset(images, labels[order]), masks


def synthetic_splits(size=64, seed=0, n_train=600, n_val=80, n_test=120):
    """Independent train/val/test draws (default 600/80/120)."""
    seeds = np.random.SeedSequence(seed).spawn(3)
    out = {}
    for name, n, s in zip(("train", "val", "test"), (n_train, n_val, n_test), seeds):
        out[name] = make_synthetic(n, size, int(s.generate_state(1)[0]))
    return out
