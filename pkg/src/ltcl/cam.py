"""CAM-guided CutMix for tail-class exemplars.

A tail image's class activation map picks out its discriminative region;
that region is pasted into the most similar head-class exemplar and the
label is mixed by pasted area.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, ShapeError, StateError
from .images import to_input

logger = logging.getLogger(__name__)

MAX_SIGMA_DRAWS = 4  # first draw + 3 resamples


@dataclass
class ActivationMap:
    values: torch.Tensor  # (h, w) float64 in [0, 1]
    source_class: int


@dataclass
class ThresholdedMap:
    values: torch.Tensor
    sigma: float

    @property
    def mask(self) -> torch.Tensor:
        return self.values > 0

    @property
    def retained(self) -> int:
        return int(self.mask.sum())


@dataclass
class SyntheticSample:
    image: torch.Tensor  # (3, h, w), same dtype as the parents
    soft_label: torch.Tensor  # (num_seen,) float64
    parents: tuple[int, int]  # (tail label, head label)
    sigma: float
    mask: torch.Tensor = field(repr=False)
    synthetic: bool = True

    @property
    def area_ratio(self) -> float:
        return float(self.mask.sum()) / self.mask.numel()


def compute_cam(feature_maps, class_weight, target_size=None, source_class=-1) -> ActivationMap:
    """Weighted channel sum, rectified, resized bilinearly and min-max scaled to [0, 1].

    A constant map (including an all-negative one) becomes all zeros.
    """
    maps = torch.as_tensor(feature_maps).detach().to(torch.float64)
    v = torch.as_tensor(class_weight).detach().to(torch.float64)
    if maps.dim() != 3 or v.dim() != 1 or maps.shape[0] != v.shape[0]:
        raise ShapeError(f"feature maps {tuple(maps.shape)} vs weight row {tuple(v.shape)}")
    raw = torch.einsum("k,khw->hw", v, maps).clamp_min(0)
    if target_size is not None and tuple(target_size) != tuple(raw.shape):
        raw = F.interpolate(raw[None, None], size=tuple(target_size), mode="bilinear",
                            align_corners=False)[0, 0]
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        values = torch.zeros_like(raw)
    else:
        values = (raw - lo) / (hi - lo)
    return ActivationMap(values, int(source_class))


def threshold_cam(cam, sigma: float) -> ThresholdedMap:
    """Keep CAM values at or above ``sigma``; zero the rest."""
    if not 0.0 < sigma < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {sigma}")
    values = cam.values if isinstance(cam, ActivationMap) else torch.as_tensor(cam)
    return ThresholdedMap(torch.where(values >= sigma, values, torch.zeros_like(values)), sigma)


def cutmix_synthesize(x_t, x_h, mask):
    """Pixels of ``x_t`` where ``mask`` is set, ``x_h`` elsewhere (every channel)."""
    if x_t.shape != x_h.shape:
        raise ShapeError(f"tail image {tuple(x_t.shape)} vs head image {tuple(x_h.shape)}")
    mask = torch.as_tensor(mask).bool()
    if mask.shape != x_t.shape[-2:]:
        raise ShapeError(f"mask {tuple(mask.shape)} vs image {tuple(x_t.shape[-2:])}")
    return torch.where(mask, x_t, x_h)


def mix_labels(y_t: int, y_h: int, replaced_area, total_area, num_seen: int) -> torch.Tensor:
    if not 0 <= replaced_area <= total_area or total_area <= 0:
        raise ParameterError(f"replaced area {replaced_area} outside [0, {total_area}]")
    ratio = replaced_area / total_area
    label = torch.zeros(num_seen, dtype=torch.float64)
    label[y_h] += 1.0 - ratio
    label[y_t] += ratio
    return label


def most_similar(query, pool_features) -> int:
    """Index of the pool row with the largest cosine similarity to ``query``.

    Ties go to the lowest index.
    """
    if len(pool_features) == 0:
        raise StateError("candidate pool is empty")
    q = torch.as_tensor(query, dtype=torch.float64)
    P = torch.as_tensor(pool_features, dtype=torch.float64)
    sims = (P @ q) / (P.norm(dim=1) * q.norm()).clamp_min(1e-12)
    return int(np.argmax(sims.numpy()))


def select_candidate(x_t, pool, extractor):
    """Return ``(index, image)`` of the pool image most similar to ``x_t`` under ``extractor``.

    ``extractor`` maps an image batch to ``(B, d)`` features.
    """
    if len(pool) == 0:
        raise StateError("candidate pool is empty; skip augmentation for this class")
    with torch.no_grad():
        feats = extractor(torch.stack([x_t, *pool]))
    idx = most_similar(feats[0], feats[1:])
    return idx, pool[idx]


def _draw_sigma(rng) -> float:
    while True:
        s = float(rng.uniform(0.0, 1.0))
        if s > 0.0:
            return s


def synthesize_one(x_t, y_t, maps_t, weight_row, x_h, y_h, num_seen, rng) -> SyntheticSample:
    """One CAM-CutMix sample from a tail image and its chosen head partner."""
    size = tuple(x_t.shape[-2:])
    cam = compute_cam(maps_t, weight_row, size, y_t)
    peak = float(cam.values.max())
    thr = None
    if peak > 0:
        for _ in range(MAX_SIGMA_DRAWS):
            thr = threshold_cam(cam, _draw_sigma(rng))
            if thr.retained:
                break
        else:
            thr = threshold_cam(cam, 0.5 * peak)
        mask = thr.mask
        sigma = thr.sigma
    else:
        # flat CAM carries no location cue: keep the whole tail image
        mask = torch.ones(size, dtype=torch.bool)
        sigma = 0.0
    image = cutmix_synthesize(x_t, x_h, mask)
    label = mix_labels(y_t, y_h, int(mask.sum()), mask.numel(), num_seen)
    return SyntheticSample(image, label, (y_t, y_h), sigma, mask)


@torch.no_grad()
def _features_and_maps(bundle, images, batch_size=256):
    feats, maps = [], []
    for i in range(0, len(images), batch_size):
        f, m = bundle.extract(to_input(images[i:i + batch_size]))
        feats.append(f)
        maps.append(m)
    return torch.cat(feats), torch.cat(maps)


def augment_tail_class(label, stored, needed, head_pool, bundle, rng, num_seen=None):
    """Build ``needed`` synthetic samples for one tail class.

    ``stored`` are the class's real exemplar images (uint8, ``(3, h, w)``),
    ``head_pool`` a list of ``(image, label)`` pairs. Tail exemplars are
    used round-robin; each sample draws its own threshold. Returns
    ``(samples, warning)`` where ``warning`` is ``None`` on success.
    """
    n = len(stored)
    if n < 1:
        raise ParameterError("augmentation needs at least one stored exemplar")
    if needed <= 0:
        return [], None
    if not head_pool:
        msg = f"class {label}: no head-class candidates, augmentation skipped"
        logger.warning(msg)
        return [], msg
    num_seen = bundle.num_seen if num_seen is None else num_seen
    was_training = bundle.training
    bundle.eval()
    try:
        tail_imgs = torch.stack(list(stored))
        pool_imgs = torch.stack([img for img, _ in head_pool])
        tail_feats, tail_maps = _features_and_maps(bundle, tail_imgs)
        pool_feats, _ = _features_and_maps(bundle, pool_imgs)
        weight_row = bundle.weight[label].detach()
        out = []
        for k in range(needed):
            j = k % n
            h = most_similar(tail_feats[j], pool_feats)
            x_h, y_h = head_pool[h]
            out.append(synthesize_one(tail_imgs[j], label, tail_maps[j], weight_row,
                                      x_h, int(y_h), num_seen, rng))
    finally:
        bundle.train(was_training)
    return out, None


def dump_synthetics(samples, out_dir, prefix="synthetic"):
    """Write images, masks and a JSON sidecar per sample for visual audit."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        stem = out / f"{prefix}_{i:04d}"
        img = s.image.to(torch.uint8).permute(1, 2, 0).numpy()
        Image.fromarray(img).save(f"{stem}.png")
        Image.fromarray((s.mask.numpy() * 255).astype(np.uint8)).save(f"{stem}_mask.png")
        side = {
            "sigma": s.sigma,
            "area_ratio": s.area_ratio,
            "tail_class": s.parents[0],
            "head_class": s.parents[1],
            "soft_label": {str(k): float(v) for k, v in enumerate(s.soft_label) if v > 0},
        }
        Path(f"{stem}.json").write_text(json.dumps(side, indent=2), encoding="utf-8")
        paths.append(Path(f"{stem}.png"))
    return paths
