"""Herding exemplar selection, the per-class exemplar buffer and balanced replay sets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .cam import augment_tail_class
from .errors import ParameterError, StateError
from .images import to_input

SELECTORS = ("herding", "random")


@dataclass(frozen=True)
class Exemplar:
    image_ref: str
    label: int  # classifier row index
    image: torch.Tensor = field(repr=False, compare=False)
    synthetic: bool = False


def herding_select(features, M: int) -> list[int]:
    """Greedy herding order over L2-normalised features, ``min(n, M)`` long.

    Step ``k`` picks the unchosen row whose addition brings the running mean
    of the chosen rows closest to the class mean. Ties go to the lowest index.
    """
    if M < 1:
        raise ParameterError(f"budget must be >= 1, got {M}")
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ParameterError("herding needs a non-empty (n, d) feature matrix")
    n = len(X)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = X / np.maximum(norms, 1e-12)
    mu = X.mean(axis=0)
    chosen: list[int] = []
    available = np.ones(n, dtype=bool)
    running = np.zeros_like(mu)
    for k in range(1, min(n, M) + 1):
        dist = np.linalg.norm(mu[None, :] - (running[None, :] + X) / k, axis=1)
        dist[~available] = np.inf
        j = int(np.argmin(dist))
        chosen.append(j)
        available[j] = False
        running += X[j]
    return chosen


def random_select(n: int, M: int, rng) -> list[int]:
    if M < 1:
        raise ParameterError(f"budget must be >= 1, got {M}")
    return [int(i) for i in rng.choice(n, size=min(n, M), replace=False)]


class ExemplarBuffer:
    """Stored real exemplars, at most ``budget`` per class."""

    def __init__(self, budget: int):
        if budget < 1:
            raise ParameterError(f"memory budget must be >= 1, got {budget}")
        self.budget = budget
        self._store: dict[int, list[Exemplar]] = {}

    def __len__(self):
        return sum(len(v) for v in self._store.values())

    def __contains__(self, label):
        return label in self._store

    @property
    def classes(self) -> list[int]:
        return sorted(self._store)

    def counts(self) -> dict[int, int]:
        return {c: len(self._store[c]) for c in self.classes}

    def exemplars(self, label) -> list[Exemplar]:
        return list(self._store[label])

    def set_class(self, label: int, exemplars):
        exemplars = list(exemplars)
        if len(exemplars) > self.budget:
            raise StateError(f"class {label}: {len(exemplars)} exemplars exceed budget {self.budget}")
        for ex in exemplars:
            if ex.synthetic:
                raise StateError("synthetic samples are never stored in the buffer")
            if ex.label != label:
                raise StateError(f"exemplar labelled {ex.label} filed under class {label}")
        self._store[label] = exemplars

    def fingerprint(self) -> str:
        h = hashlib.sha256(str(self.budget).encode())
        for c in self.classes:
            for ex in self._store[c]:
                h.update(f"{c}\t{ex.image_ref}\t{ex.synthetic}\n".encode())
                h.update(ex.image.contiguous().numpy().tobytes())
        return h.hexdigest()

    def stats(self) -> dict:
        counts = self.counts()
        return {
            "classes": len(counts),
            "stored": sum(counts.values()),
            "full_classes": sum(1 for v in counts.values() if v >= self.budget),
            "min_count": min(counts.values(), default=0),
        }

    def to_records(self) -> list[dict]:
        return [{"image_ref": ex.image_ref, "label": ex.label}
                for c in self.classes for ex in self._store[c]]

    @classmethod
    def from_records(cls, budget, records, load_image):
        buf = cls(budget)
        grouped: dict[int, list[Exemplar]] = {}
        for r in records:
            img = torch.as_tensor(load_image(r["image_ref"]))
            grouped.setdefault(int(r["label"]), []).append(Exemplar(r["image_ref"], int(r["label"]), img))
        for label, exs in grouped.items():
            buf.set_class(label, exs)
        return buf


@torch.no_grad()
def extract_features(bundle, images, batch_size=256) -> torch.Tensor:
    was_training = bundle.training
    bundle.eval()
    try:
        out = [bundle.extract(to_input(images[i:i + batch_size]))[0]
               for i in range(0, len(images), batch_size)]
    finally:
        bundle.train(was_training)
    return torch.cat(out) if out else torch.empty(0, bundle.d)


def update_buffer(buffer: ExemplarBuffer, refs, images, labels, bundle, M=None,
                  selector="herding", rng=None) -> ExemplarBuffer:
    """Store up to ``M`` exemplars for every class present in the task data.

    Classes already in the buffer from earlier tasks are left as they are;
    calling again with the same data re-selects the same exemplars.
    """
    M = buffer.budget if M is None else M
    if M > buffer.budget:
        raise ParameterError(f"per-class selection {M} exceeds buffer budget {buffer.budget}")
    if selector not in SELECTORS:
        raise ParameterError(f"unknown selector {selector!r}")
    labels = torch.as_tensor(labels)
    for label in sorted(set(int(l) for l in labels.tolist())):
        idx = (labels == label).nonzero().flatten().tolist()
        if selector == "herding":
            feats = extract_features(bundle, images[idx])
            order = herding_select(feats.numpy(), M)
        else:
            if rng is None:
                raise ParameterError("random selection needs an rng")
            order = random_select(len(idx), M, rng)
        buffer.set_class(label, [Exemplar(refs[idx[j]], label, images[idx[j]]) for j in order])
    return buffer


@dataclass
class ReplaySet:
    images: torch.Tensor  # (K, 3, h, w) uint8
    targets: torch.Tensor  # (K, num_seen) float64 soft labels
    synthetic: torch.Tensor  # (K,) bool
    warnings: list[str] = field(default_factory=list)
    _anchor_counts: dict = field(default_factory=dict, repr=False)
    samples: list = field(default_factory=list, repr=False)  # SyntheticSample objects

    def __len__(self):
        return len(self.images)

    def per_class_counts(self) -> dict[int, float]:
        """Number of entries per anchor class (the tail parent for synthetics)."""
        return dict(self._anchor_counts)


def head_pool_for(buffer: ExemplarBuffer, label: int):
    """Exemplars of full classes other than ``label``; else those of the largest others."""
    counts = {c: n for c, n in buffer.counts().items() if c != label}
    if not counts:
        return []
    full = [c for c, n in counts.items() if n == buffer.budget]
    if not full:
        top = max(counts.values())
        full = [c for c, n in counts.items() if n == top]
    return [(ex.image, c) for c in sorted(full) for ex in buffer.exemplars(c)]


def raw_replay_set(buffer: ExemplarBuffer, num_seen: int) -> ReplaySet:
    """Buffer contents with one-hot labels and no augmentation."""
    imgs, tgts, anchors = [], [], {}
    for c in buffer.classes:
        for ex in buffer.exemplars(c):
            imgs.append(ex.image)
            t = torch.zeros(num_seen, dtype=torch.float64)
            t[c] = 1.0
            tgts.append(t)
        anchors[c] = len(buffer.exemplars(c))
    return _pack(imgs, tgts, [False] * len(imgs), [], anchors, num_seen)


def balanced_replay_set(buffer: ExemplarBuffer, bundle, seed=0, num_seen=None) -> ReplaySet:
    """Real exemplars (one-hot) plus CAM-CutMix synthetics topping each class up to the budget.

    Each class draws from its own RNG stream seeded by ``(seed, label)``.
    Synthetics are returned only; the buffer is not modified.
    """
    if len(buffer) == 0:
        raise StateError("replay set requested from an empty buffer")
    num_seen = bundle.num_seen if num_seen is None else num_seen
    base = raw_replay_set(buffer, num_seen)
    imgs = list(base.images)
    tgts = list(base.targets)
    synth = [False] * len(imgs)
    anchors = base.per_class_counts()
    warnings = []
    made = []
    for c in buffer.classes:
        stored = buffer.exemplars(c)
        needed = buffer.budget - len(stored)
        if needed <= 0:
            continue
        rng = np.random.default_rng([int(seed), int(c)])
        samples, warn = augment_tail_class(c, [ex.image for ex in stored], needed,
                                           head_pool_for(buffer, c), bundle, rng, num_seen)
        if warn:
            warnings.append(warn)
        for s in samples:
            imgs.append(s.image)
            tgts.append(s.soft_label)
            synth.append(True)
        made.extend(samples)
        anchors[c] += len(samples)
    out = _pack(imgs, tgts, synth, warnings, anchors, num_seen)
    out.samples = made
    return out


def _pack(imgs, tgts, synth, warnings, anchors, num_seen):
    if imgs:
        images = torch.stack(imgs)
        targets = torch.stack(tgts)
    else:
        images = torch.empty(0, 3, 0, 0, dtype=torch.uint8)
        targets = torch.empty(0, num_seen, dtype=torch.float64)
    return ReplaySet(images, targets, torch.tensor(synth, dtype=torch.bool), warnings, anchors)
