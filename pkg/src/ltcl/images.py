"""Image loading and the train/eval input transforms."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import synthetic
from .errors import ShapeError

MEAN = 0.5
STD = 0.25


def load_image(ref: str, root=None, size: int | None = None) -> np.ndarray:
    """Return a ``(3, H, W)`` uint8 array for a manifest reference."""
    if ref.startswith(synthetic.PREFIX):
        return synthetic.render(ref, size or synthetic.IMAGE_SIZE)
    path = Path(ref)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).copy()


class ImageStore:
    """Memoising loader; all images of one store share a resolution."""

    def __init__(self, root=None, size: int | None = None):
        self.root = root
        self.size = size
        self._cache: dict[str, np.ndarray] = {}

    def get(self, ref: str) -> np.ndarray:
        img = self._cache.get(ref)
        if img is None:
            img = load_image(ref, self.root, self.size)
            if self.size is None:
                self.size = img.shape[-1]
            if img.shape[1:] != (self.size, self.size):
                raise ShapeError(f"{ref}: image is {img.shape[1:]}, expected {self.size}x{self.size}")
            self._cache[ref] = img
        return img

    def stack(self, refs) -> torch.Tensor:
        refs = list(refs)
        if not refs:
            s = self.size or synthetic.IMAGE_SIZE
            return torch.empty((0, 3, s, s), dtype=torch.uint8)
        return torch.from_numpy(np.stack([self.get(r) for r in refs]))


def to_input(images: torch.Tensor) -> torch.Tensor:
    """uint8 images -> normalised float32 network input."""
    return (images.float() / 255.0 - MEAN) / STD


def random_crop_flip(images: torch.Tensor, generator: torch.Generator, pad: int = 4) -> torch.Tensor:
    """Random crop with zero padding plus horizontal flip, per image."""
    B, _, H, W = images.shape
    if B == 0:
        return images
    padded = F.pad(images, (pad, pad, pad, pad))
    dy = torch.randint(0, 2 * pad + 1, (B,), generator=generator)
    dx = torch.randint(0, 2 * pad + 1, (B,), generator=generator)
    flip = torch.rand(B, generator=generator) < 0.5
    out = torch.empty_like(images)
    for i in range(B):
        crop = padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out
