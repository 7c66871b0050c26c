"""Manifests, PPM images, resizing, augmentation and the stratified split."""

from __future__ import annotations

import csv
import enum
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Dataset
from .errors import DataError, ManifestError, PPMError, PPMMagicError, PPMMaxvalError, PPMTruncatedError


class Label(enum.IntEnum):
    LYING = 0
    SITTING = 1
    STANDING = 2
    UNDEFINED = 3

    @classmethod
    def parse(cls, text: str) -> "Label":
        key = text.strip().lower()
        key = _LABEL_ALIASES.get(key, key)
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValueError(f"unknown label {text!r}") from None


_LABEL_ALIASES = {"lying down": "lying", "lie": "lying", "sit": "sitting", "stand": "standing"}


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Label

    @property
    def undefined(self) -> bool:
        return self.label is Label.UNDEFINED


def load_manifest(path, check_files: bool = True) -> list[ManifestEntry]:
    """Read a ``path,label`` CSV. Relative image paths resolve against the manifest.

    Undefined entries are kept (see ``ManifestEntry.undefined``); callers filter
    them before splitting.
    """
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: manifest is empty")
    header = [h.strip().lower() for h in rows[0]]
    if header != ["path", "label"]:
        raise ManifestError(f"expected header 'path,label', got {','.join(rows[0])!r}", line=1)
    if len(rows) == 1:
        raise ManifestError(f"{path}: manifest has no entries")
    entries, seen = [], {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ManifestError(f"expected 2 fields, got {len(row)}", line=lineno)
        rel, label_text = row[0].strip(), row[1]
        try:
            label = Label.parse(label_text)
        except ValueError as exc:
            raise ManifestError(str(exc), line=lineno) from None
        full = os.path.normpath(base / rel)
        if full in seen:
            raise ManifestError(f"duplicate path {rel!r} (first on line {seen[full]})", line=lineno)
        seen[full] = lineno
        if check_files and not os.path.isfile(full):
            raise ManifestError(f"missing image file {rel!r}", line=lineno)
        entries.append(ManifestEntry(full, label))
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for e in entries:
            rel = os.path.relpath(e.path, path.parent)
            w.writerow([rel, e.label.name.lower()])


def class_counts(entries) -> dict[Label, int]:
    counts = {label: 0 for label in Label}
    for e in entries:
        counts[e.label] += 1
    return counts


# -- splitting ---------------------------------------------------------------

SPLIT_FRACTIONS = (0.75, 0.10, 0.15)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = SPLIT_FRACTIONS
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be three values summing to 1, got {self.fractions}")
        if any(f < 0 for f in self.fractions):
            raise DataError(f"split fractions must be non-negative, got {self.fractions}")


def stratified_split(entries, spec: SplitSpec = SplitSpec()) -> dict[str, list[ManifestEntry]]:
    """Per class: round(f_train*n) to train, round(f_val*n) to val, rest to test."""
    entries = list(entries)
    if any(e.undefined for e in entries):
        raise DataError("filter out undefined entries before splitting")
    rng = np.random.default_rng(spec.seed)
    by_class: dict[Label, list[ManifestEntry]] = {}
    for e in entries:
        by_class.setdefault(e.label, []).append(e)
    out = {"train": [], "val": [], "test": []}
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < 3:
            raise DataError(f"class {label.name.lower()} has {len(members)} samples, need at least 3")
        members = [members[i] for i in rng.permutation(len(members))]
        n = len(members)
        n_train = round(spec.fractions[0] * n)
        n_val = min(round(spec.fractions[1] * n), n - n_train)
        out["train"] += members[:n_train]
        out["val"] += members[n_train:n_train + n_val]
        out["test"] += members[n_train + n_val:]
    for name in out:
        part = out[name]
        out[name] = [part[i] for i in rng.permutation(len(part))]
    return out


# -- PPM ---------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary P6 with maxval 255 -> float32 (H, W, 3) in [0, 1]."""
    if not data.startswith(b"P6"):
        raise PPMMagicError(f"not a binary PPM (P6): starts with {data[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PPMError("incomplete PPM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise PPMError(f"non-numeric PPM header field in {fields!r}") from None
    if width < 1 or height < 1:
        raise PPMError(f"invalid PPM dimensions {width}x{height}")
    if maxval != 255:
        raise PPMMaxvalError(f"unsupported maxval {maxval}, only 255 is accepted")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PPMError("missing whitespace after PPM header")
    pos += 1
    expected = width * height * 3
    body = data[pos:pos + expected]
    if len(body) < expected:
        raise PPMTruncatedError(expected, len(body))
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float32) / np.float32(255.0)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"PPM needs an (H, W, 3) image, got {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + image.tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def write_pgm(path, values: np.ndarray) -> None:
    """Min-max scale a 2-d array to 0..255 and write binary P5."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    pix = np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (v.shape[1], v.shape[0]) + pix.tobytes())


# -- resampling --------------------------------------------------------------

def _half_pixel_coords(n_out, n_in):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(image: np.ndarray, size) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping.

    ``size`` is an int (square) or ``(height, width)``. Works on (H, W) or
    (H, W, C) arrays.
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3) or image.shape[0] == 0 or image.shape[1] == 0:
        raise DataError(f"cannot resize image of shape {image.shape}")
    out_h, out_w = (size, size) if np.isscalar(size) else size
    if out_h < 1 or out_w < 1:
        raise DataError(f"invalid target size {size}")
    in_h, in_w = image.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return image.copy()
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32
    img = image.astype(np.float64)
    y0, y1, fy = _half_pixel_coords(out_h, in_h)
    x0, x1, fx = _half_pixel_coords(out_w, in_w)
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(dtype)


def _sample_zero_fill(img, ys, xs):
    """Bilinear sample at float coordinates; out-of-image neighbours read as 0."""
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    out = np.zeros(ys.shape + img.shape[2:], dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.zeros_like(out)
            vals[ok] = img[yy[ok], xx[ok]]
            out += wy * wx * vals
    return out


@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: float = 8.0
    hflip_prob: float = 0.5
    translate_frac: float = 0.05

    def __post_init__(self):
        if not 0 <= self.rotation_deg <= 8.0:
            raise DataError(f"rotation must be within +/-8 degrees, got {self.rotation_deg}")
        if not 0 <= self.hflip_prob <= 1:
            raise DataError(f"flip probability must be in [0, 1], got {self.hflip_prob}")
        if not 0 <= self.translate_frac < 1:
            raise DataError(f"translation fraction must be in [0, 1), got {self.translate_frac}")


def hflip(image):
    return image[:, ::-1].copy()


def augment(image: np.ndarray, label, spec: AugmentSpec, rng: np.random.Generator):
    """Random rotation about the centre, shift, then optional mirror. Label unchanged.

    Four draws per call, always in the same order, so a seeded generator gives
    reproducible batches.
    """
    angle = math.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    flip = rng.random() < spec.hflip_prob
    h, w = image.shape[:2]
    ty = rng.uniform(-spec.translate_frac, spec.translate_frac) * h
    tx = rng.uniform(-spec.translate_frac, spec.translate_frac) * w
    out = image
    if angle != 0.0 or tx != 0.0 or ty != 0.0:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
        # inverse map: undo shift, then rotate back by -angle
        dy, dx = yy - ty - cy, xx - tx - cx
        c, s = math.cos(angle), math.sin(angle)
        src_y = c * dy - s * dx + cy
        src_x = s * dy + c * dx + cx
        out = _sample_zero_fill(image, src_y, src_x).astype(image.dtype)
    if flip:
        out = hflip(out)
    elif out is image:
        out = image.copy()
    return out, label


def augment_image(spec: AugmentSpec = AugmentSpec()):
    """Adapter for :func:`treatnet.autodiff.train`'s ``augment_fn`` hook."""
    def fn(image, rng):
        return augment(image, None, spec, rng)[0]
    return fn


# -- assembling arrays -------------------------------------------------------

def load_images(entries, resolution: int) -> Dataset:
    """Decode, resize and stack entries; undefined entries are rejected."""
    images, labels = [], []
    for e in entries:
        if e.undefined:
            raise DataError(f"undefined entry {e.path} cannot be used as a sample")
        img = resize_bilinear(read_ppm(e.path), resolution)
        images.append(np.clip(img, 0.0, 1.0))
        labels.append(int(e.label))
    if not images:
        return Dataset(np.zeros((0, resolution, resolution, 3), np.float32), np.zeros(0, np.int64))
    return Dataset(np.stack(images), np.array(labels))
