"""Manifests, long-tail count profiles and class-incremental task splits."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ManifestError, ParameterError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
PROFILE_KINDS = ("pareto", "exponential", "explicit")
SPLIT_RULES = ("even_plus_remainder_first", "explicit")


@dataclass(frozen=True)
class Record:
    image_ref: str
    class_id: int


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[Record, ...]
    class_names: tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        seen = set()
        for rec in self.records:
            if not 0 <= rec.class_id < len(self.class_names):
                raise ManifestError(
                    f"class_id {rec.class_id} out of range for {len(self.class_names)} classes"
                )
            if rec.image_ref in seen:
                raise ManifestError(f"duplicate image_ref {rec.image_ref!r}")
            seen.add(rec.image_ref)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.records)

    def class_counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for rec in self.records:
            counts[rec.class_id] += 1
        return counts

    def restrict(self, class_ids) -> "DatasetManifest":
        keep = set(class_ids)
        return DatasetManifest(
            tuple(r for r in self.records if r.class_id in keep), self.class_names, self.split
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.split.encode())
        h.update("\x1f".join(self.class_names).encode())
        for rec in self.records:
            h.update(f"\n{rec.image_ref}\t{rec.class_id}".encode())
        return h.hexdigest()


@dataclass(frozen=True)
class LongTailProfile:
    """Per-rank training counts, sorted from head (rank 0) to tail.

    ``rho`` is the realised ratio ``counts[0] / counts[-1]``; the value asked
    for is kept in ``requested_rho``.
    """

    counts: tuple[int, ...]
    profile_kind: str
    requested_rho: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.counts) < 2:
            raise ParameterError("a profile needs at least 2 classes")
        if any(b > a for a, b in zip(self.counts, self.counts[1:])):
            raise ParameterError("profile counts must be non-increasing")
        if self.counts[-1] < 1:
            raise ParameterError("every class needs at least one sample")
        if self.profile_kind not in PROFILE_KINDS:
            raise ParameterError(f"unknown profile kind {self.profile_kind!r}")

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def n_max(self) -> int:
        return self.counts[0]

    @property
    def n_min(self) -> int:
        return self.counts[-1]

    @property
    def rho(self) -> Fraction:
        return Fraction(self.n_max, self.n_min)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "counts": list(self.counts),
            "n_max": self.n_max,
            "n_min": self.n_min,
            "rho": str(self.rho),
            "requested_rho": self.requested_rho,
            "profile_kind": self.profile_kind,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LongTailProfile":
        prof = cls(tuple(doc["counts"]), doc["profile_kind"], doc.get("requested_rho"))
        for key, value in (("num_classes", prof.num_classes), ("n_max", prof.n_max),
                           ("n_min", prof.n_min)):
            if key in doc and doc[key] != value:
                raise ParameterError(f"profile field {key}={doc[key]} disagrees with counts")
        if "rho" in doc and Fraction(doc["rho"]) != prof.rho:
            raise ParameterError(f"profile rho {doc['rho']} disagrees with counts")
        return prof


@dataclass(frozen=True)
class Task:
    new_class_ids: frozenset[int]
    train_records: tuple[Record, ...]
    # classes in the order they are appended to the classifier
    class_order: tuple[int, ...] = ()


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[Task, ...]
    seed: int
    num_classes: int = 0
    split_rule: str = "even_plus_remainder_first"

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    @property
    def sizes(self) -> list[int]:
        return [len(t.new_class_ids) for t in self.tasks]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_classes": self.num_classes,
            "split_rule": self.split_rule,
            "sizes": self.sizes,
            "tasks": [list(t.class_order) for t in self.tasks],
        }


def round_half_down(x: float) -> int:
    """Nearest integer; exact .5 ties go to the smaller value."""
    return math.ceil(x - 0.5)


def build_longtail_profile(num_classes, n_max, rho, kind="exponential", counts=None):
    """Per-rank counts decaying from ``n_max`` to ``max(1, round(n_max / rho))``.

    ``exponential`` decays geometrically, ``pareto`` follows a power law in
    the rank with exponent ``ln(rho) / ln(C)``. ``explicit`` takes the
    counts directly (e.g. from a consumption-frequency table) and sorts
    them by rank.
    """
    if num_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {num_classes}")
    if kind not in PROFILE_KINDS:
        raise ParameterError(f"unknown profile kind {kind!r}")
    if kind == "explicit":
        if counts is None or len(counts) != num_classes:
            raise ParameterError("explicit profile needs one count per class")
        ranked = sorted((int(c) for c in counts), reverse=True)
        if n_max is not None and ranked[0] != n_max:
            raise ParameterError(f"explicit counts peak at {ranked[0]}, not n_max={n_max}")
        if rho is not None and Fraction(ranked[0], max(ranked[-1], 1)) != Fraction(rho):
            raise ParameterError("explicit counts do not realise the requested rho")
        return LongTailProfile(tuple(ranked), "explicit", None if rho is None else float(rho))

    if n_max < 1:
        raise ParameterError(f"n_max must be >= 1, got {n_max}")
    if rho < 1:
        raise ParameterError(f"imbalance ratio must be >= 1, got {rho}")
    C = num_classes
    tail = max(1, round_half_down(n_max / rho))
    out = []
    if kind == "exponential":
        for c in range(C):
            out.append(max(1, round_half_down(n_max * rho ** (-c / (C - 1)))))
    else:
        beta = math.log(rho) / math.log(C)
        for c in range(C):
            out.append(max(1, round_half_down(n_max * (c + 1) ** (-beta))))
    # pin the endpoints against float drift in the last class
    out[0] = n_max
    out[-1] = tail
    return LongTailProfile(tuple(out), kind, float(rho))


def seeded_permutation(n: int, seed: int) -> list[int]:
    return [int(i) for i in np.random.default_rng(seed).permutation(n)]


def apply_longtail(manifest: DatasetManifest, profile: LongTailProfile, class_order=None, seed=0):
    """Subsample a train manifest so class ``class_order[r]`` keeps ``counts[r]`` records.

    Sampling is without replacement and deterministic in ``seed``; the
    surviving records keep their original relative order. Test manifests
    are returned unchanged.
    """
    if manifest.split == "test":
        return manifest
    C = manifest.num_classes
    if profile.num_classes != C:
        raise ParameterError(f"profile has {profile.num_classes} classes, manifest has {C}")
    if class_order is None:
        class_order = seeded_permutation(C, seed)
    class_order = [int(c) for c in class_order]
    if sorted(class_order) != list(range(C)):
        raise ParameterError("class_order must be a permutation of the class ids")

    by_class: dict[int, list[int]] = {c: [] for c in range(C)}
    for i, rec in enumerate(manifest.records):
        by_class[rec.class_id].append(i)

    deficits = []
    for rank, c in enumerate(class_order):
        if len(by_class[c]) < profile.counts[rank]:
            deficits.append((c, manifest.class_names[c], len(by_class[c]), profile.counts[rank]))
    if deficits:
        lines = ", ".join(f"{name} (id {c}): have {have}, need {need}"
                          for c, name, have, need in deficits)
        raise ParameterError(f"not enough images for the long-tail profile: {lines}")

    rng = np.random.default_rng(seed)
    keep = []
    for rank, c in enumerate(class_order):
        idx = by_class[c]
        chosen = rng.choice(len(idx), size=profile.counts[rank], replace=False)
        keep.extend(idx[j] for j in chosen)
    keep.sort()
    return DatasetManifest(tuple(manifest.records[i] for i in keep), manifest.class_names, "train")


def partition_sizes(num_classes, num_tasks, split_rule="even_plus_remainder_first", counts=None):
    if num_tasks < 1 or num_tasks > num_classes:
        raise ParameterError(f"cannot split {num_classes} classes into {num_tasks} tasks")
    if split_rule == "even_plus_remainder_first":
        base, rem = divmod(num_classes, num_tasks)
        return [base + rem] + [base] * (num_tasks - 1)
    if split_rule == "explicit":
        if counts is None or len(counts) != num_tasks:
            raise ParameterError(f"explicit split needs {num_tasks} per-task counts")
        counts = [int(c) for c in counts]
        if any(c < 1 for c in counts):
            raise ParameterError("every task needs at least one class")
        if sum(counts) != num_classes:
            raise ParameterError(f"task counts sum to {sum(counts)}, expected {num_classes}")
        return counts
    raise ParameterError(f"unknown split rule {split_rule!r}")


def partition_tasks(manifest: DatasetManifest, num_tasks, seed=0,
                    split_rule="even_plus_remainder_first", counts=None) -> TaskSequence:
    C = manifest.num_classes
    sizes = partition_sizes(C, num_tasks, split_rule, counts)
    perm = seeded_permutation(C, seed)
    tasks = []
    start = 0
    for size in sizes:
        order = tuple(perm[start:start + size])
        start += size
        members = frozenset(order)
        recs = tuple(r for r in manifest.records if r.class_id in members)
        tasks.append(Task(members, recs, order))
    return TaskSequence(tuple(tasks), seed, C, split_rule)


def tasks_from_orders(manifest: DatasetManifest, orders, seed=0, split_rule="explicit"):
    """Rebuild a TaskSequence from stored per-task class lists."""
    flat = [c for order in orders for c in order]
    if sorted(flat) != list(range(manifest.num_classes)):
        raise ParameterError("stored task split is not a partition of the manifest classes")
    tasks = []
    for order in orders:
        members = frozenset(int(c) for c in order)
        recs = tuple(r for r in manifest.records if r.class_id in members)
        tasks.append(Task(members, recs, tuple(int(c) for c in order)))
    return TaskSequence(tuple(tasks), seed, manifest.num_classes, split_rule)


# Partition templates for the benchmark protocols; applied over user manifests.
PRESETS = {
    "food101lt-n5": {"num_classes": 101, "num_tasks": 5, "split_rule": "even_plus_remainder_first"},
    "food101lt-n10": {"num_classes": 101, "num_tasks": 10, "split_rule": "even_plus_remainder_first"},
    "food101lt-n20": {"num_classes": 101, "num_tasks": 20, "split_rule": "even_plus_remainder_first"},
    "vfnlt-n7": {"num_classes": 74, "num_tasks": 7, "split_rule": "explicit",
                 "counts": [14] + [10] * 6},
    "vfn186-n9": {"num_classes": 186, "num_tasks": 9, "split_rule": "explicit",
                  "counts": [26] + [20] * 8},
}


def preset_partition(name, manifest: DatasetManifest, seed=0) -> TaskSequence:
    try:
        preset = PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if manifest.num_classes != preset["num_classes"]:
        raise ParameterError(
            f"preset {name} expects {preset['num_classes']} classes, manifest has {manifest.num_classes}"
        )
    return partition_tasks(manifest, preset["num_tasks"], seed, preset["split_rule"],
                           preset.get("counts"))


# --- file formats -----------------------------------------------------------

def _parse_manifest_lines(lines, path=None):
    class_names: list[str] | None = None
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#classes:"):
                if class_names is not None:
                    raise ManifestError("repeated #classes header", lineno, path)
                body = line[len("#classes:"):].strip()
                class_names = [n.strip() for n in body.split(",")] if body else []
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"expected 3 tab-separated fields, got {len(parts)}", lineno, path)
        ref, cid, split = parts
        if not ref:
            raise ManifestError("empty image_ref", lineno, path)
        try:
            cid = int(cid)
        except ValueError:
            raise ManifestError(f"class_id {cid!r} is not an integer", lineno, path) from None
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}", lineno, path)
        rows.append((lineno, ref, cid, split))
    return class_names, rows


def load_manifests(path) -> dict[str, DatasetManifest]:
    """Parse a manifest file into one DatasetManifest per split present."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        class_names, rows = _parse_manifest_lines(fh, path)
    if class_names is None:
        if rows:
            raise ManifestError("missing '#classes:' header", 1, path)
        class_names = []
    if not rows:
        logger.warning("manifest %s has no records", path)
    seen: dict[str, set] = {s: set() for s in SPLITS}
    out: dict[str, list] = {}
    for lineno, ref, cid, split in rows:
        if not 0 <= cid < len(class_names):
            raise ManifestError(
                f"class_id {cid} unknown ({len(class_names)} classes declared)", lineno, path
            )
        if ref in seen[split]:
            raise ManifestError(f"duplicate image_ref {ref!r} in {split} split", lineno, path)
        seen[split].add(ref)
        out.setdefault(split, []).append(Record(ref, cid))
    return {s: DatasetManifest(tuple(recs), tuple(class_names), s) for s, recs in out.items()}


def load_manifest(path, split=None) -> DatasetManifest:
    manifests = load_manifests(path)
    if not manifests:
        with open(path, encoding="utf-8") as fh:
            names, _ = _parse_manifest_lines(fh, path)
        return DatasetManifest((), tuple(names or ()), split or "train")
    if split is None:
        if len(manifests) > 1:
            raise ManifestError(f"{path} holds several splits; pass split=")
        return next(iter(manifests.values()))
    if split not in manifests:
        return DatasetManifest((), next(iter(manifests.values())).class_names, split)
    return manifests[split]


def save_manifest(path, *manifests: DatasetManifest):
    names = manifests[0].class_names
    for m in manifests[1:]:
        if m.class_names != names:
            raise ParameterError("manifests written to one file must share class names")
    if any("," in n for n in names):
        raise ParameterError("class names may not contain commas")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#classes: " + ",".join(names) + "\n")
        for m in manifests:
            for rec in m.records:
                fh.write(f"{rec.image_ref}\t{rec.class_id}\t{m.split}\n")


def save_profile(path, profile: LongTailProfile, class_order: Sequence[int] | None = None):
    doc = profile.to_dict()
    if class_order is not None:
        doc["class_order"] = [int(c) for c in class_order]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_profile(path) -> LongTailProfile:
    return LongTailProfile.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_tasks(path, tasks: TaskSequence):
    Path(path).write_text(json.dumps(tasks.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_tasks(path, manifest: DatasetManifest) -> TaskSequence:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return tasks_from_orders(manifest, doc["tasks"], doc.get("seed", 0),
                             doc.get("split_rule", "explicit"))
