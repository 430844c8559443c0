"""Procedural desk-scale image corpus: coloured shapes on textured backgrounds.

Images are addressed by ``synth:<seed>/<split>/<class>/<index>`` references
and rendered on demand, so a manifest of synthetic records needs no files
on disk. Class ``c`` is a fixed (shape, colour) pair.
"""

from __future__ import annotations

import math
import zlib

import numpy as np
from PIL import Image, ImageDraw

from .dataset import DatasetManifest, Record
from .errors import ParameterError

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 80, 230),
    "yellow": (235, 215, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 200, 210),
}
IMAGE_SIZE = 32
PREFIX = "synth:"


def class_spec(c: int) -> tuple[str, str]:
    n_s, n_c = len(SHAPES), len(COLORS)
    if not 0 <= c < n_s * n_c:
        raise ParameterError(f"synthetic corpus supports at most {n_s * n_c} classes")
    shape = SHAPES[c % n_s]
    color = list(COLORS)[(c + c // n_s) % n_c]
    return shape, color


def class_names(num_classes: int) -> tuple[str, ...]:
    return tuple(f"{color}_{shape}" for shape, color in map(class_spec, range(num_classes)))


def make_ref(seed, split, class_id, index) -> str:
    return f"{PREFIX}{seed}/{split}/{class_id}/{index}"


def parse_ref(ref: str):
    if not ref.startswith(PREFIX):
        raise ParameterError(f"not a synthetic reference: {ref!r}")
    seed, split, cid, idx = ref[len(PREFIX):].split("/")
    return int(seed), split, int(cid), int(idx)


def _draw_shape(draw, shape, cx, cy, r, fill):
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)
    elif shape == "cross":
        w = max(1, r // 3)
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=fill)
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=fill)
    elif shape == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=fill, width=max(2, r // 3))
    elif shape == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=fill)
    elif shape == "hbar":
        draw.rectangle([cx - r, cy - max(1, r // 2), cx + r, cy + max(1, r // 2)], fill=fill)
    elif shape == "vbar":
        draw.rectangle([cx - max(1, r // 2), cy - r, cx + max(1, r // 2), cy + r], fill=fill)
    else:
        raise ParameterError(f"unknown shape {shape!r}")


def render(ref: str, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render a synthetic reference to a ``(3, size, size)`` uint8 array."""
    _, _, cid, _ = parse_ref(ref)
    rng = np.random.default_rng(zlib.crc32(ref.encode()))
    shape, color = class_spec(cid)

    # textured background: smooth random gradient plus per-pixel grain
    base = rng.uniform(60, 190, size=3)
    tilt = rng.uniform(-40, 40, size=(3, 2))
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    bg = base[:, None, None] + tilt[:, 0, None, None] * yy + tilt[:, 1, None, None] * xx
    freq = rng.uniform(2, 6)
    phase = rng.uniform(0, 2 * math.pi)
    bg += 12 * np.sin(2 * math.pi * freq * (xx + yy) + phase)
    bg += rng.normal(0, 10, size=bg.shape)
    img = Image.fromarray(np.clip(bg, 0, 255).astype(np.uint8).transpose(1, 2, 0))

    r = int(rng.integers(size // 5, size // 3 + 1))
    cx = int(rng.integers(r + 1, size - r - 1))
    cy = int(rng.integers(r + 1, size - r - 1))
    jitter = rng.normal(0, 15, size=3)
    fill = tuple(int(v) for v in np.clip(np.array(COLORS[color]) + jitter, 0, 255))
    _draw_shape(ImageDraw.Draw(img), shape, cx, cy, r, fill)

    arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)
    arr = arr + rng.normal(0, 6, size=arr.shape)
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def source_manifest(num_classes, per_class, seed=0, split="train") -> DatasetManifest:
    """``per_class`` references for every class (an int or a per-class list)."""
    if isinstance(per_class, int):
        per_class = [per_class] * num_classes
    records = tuple(
        Record(make_ref(seed, split, c, i), c)
        for c in range(num_classes)
        for i in range(per_class[c])
    )
    return DatasetManifest(records, class_names(num_classes), split)
