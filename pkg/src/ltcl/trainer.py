"""The continual-learning loop: per-task training, replay, distillation and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .cam import dump_synthetics
from .config import RunConfig
from .dataset import DatasetManifest, TaskSequence
from .distill import baseline_mixed_loss, fkd_loss, logit_kd_loss
from .errors import StateError
from .images import ImageStore, random_crop_flip, to_input
from .losses import (adaptive_lambda, balanced_softmax_loss, distribution_vector,
                     integrated_loss, soft_cross_entropy)
from .memory import ExemplarBuffer, balanced_replay_set, raw_replay_set, update_buffer
from .model import (ModelBundle, TeacherSnapshot, build_bundle, load_checkpoint,
                    save_checkpoint, snapshot_teacher)

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


def learning_rate(epoch: int, base_lr: float, decay_epochs: int, factor: float) -> float:
    return base_lr * factor ** (epoch // decay_epochs)


@dataclass
class TaskData:
    refs: list
    images: torch.Tensor  # (n, 3, h, w) uint8
    labels: torch.Tensor  # (n,) classifier row indices
    class_ids: tuple  # new classes, in classifier-row order

    def __len__(self):
        return len(self.refs)


@dataclass
class TrainState:
    bundle: ModelBundle
    buffer: ExemplarBuffer | None
    teacher: TeacherSnapshot | None = None
    cumulative_size: int = 0
    task_index: int = 0
    label_map: dict = field(default_factory=dict)  # class_id -> classifier row
    generator: torch.Generator = field(default_factory=torch.Generator)

    def check(self):
        if (self.teacher is not None) != (self.task_index >= 1):
            raise StateError("a teacher exists exactly when at least one task is done")


@dataclass
class TaskRecord:
    task_size: int
    cumulative_size: int
    lam: float
    replay_size: int
    synthetic_count: int
    warnings: list
    final_loss: float


def set_determinism(seed: int, deterministic: bool, num_threads: int = 1):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(num_threads)


def _targets(labels, num_seen):
    t = torch.zeros(len(labels), num_seen, dtype=torch.float64)
    t[torch.arange(len(labels)), labels] = 1.0
    return t


def train_task(state: TrainState, data: TaskData, cfg: RunConfig, synth_dump_dir=None):
    """Learn one task in place on ``state``; returns ``(state, TaskRecord)``."""
    state.check()
    m, t = cfg.method, cfg.trainer
    bundle, teacher = state.bundle, state.teacher
    clash = [c for c in data.class_ids if c in state.label_map]
    if clash:
        raise StateError(f"classes {clash} were already learned")
    for c in data.class_ids:
        state.label_map[c] = len(state.label_map)
    expected = [state.label_map[c] for c in data.class_ids]
    if sorted(set(data.labels.tolist())) != sorted(expected) and len(data):
        raise StateError("task labels do not match the task's classes")

    # (1) grow the classifier
    num_old = bundle.num_seen
    bundle.expand(len(data.class_ids), generator=state.generator)
    num_seen = bundle.num_seen

    # (2) replay set from the buffer, predictor for distillation
    replay = None
    if teacher is not None and state.buffer is not None and len(state.buffer):
        if m.use_cam_cutmix:
            replay = balanced_replay_set(state.buffer, bundle,
                                         seed=t.seed * 1009 + state.task_index, num_seen=num_seen)
        else:
            replay = raw_replay_set(state.buffer, num_seen)
        if synth_dump_dir is not None and replay.samples:
            dump_synthetics(replay.samples, Path(synth_dump_dir) / f"task{state.task_index + 1}")
    distill_mode = m.distill_config().mode
    use_fkd = m.use_fkd and teacher is not None and m.baseline == "none"
    use_logit_kd = teacher is not None and m.baseline == "logit_kd"
    if use_fkd and distill_mode != "logit":
        bundle.attach_predictor(teacher, cfg.model.predictor_noise, state.generator)

    # (3) effective set and its class distribution
    images = data.images
    targets = _targets(data.labels, num_seen)
    is_new = torch.ones(len(data), dtype=torch.bool)
    if replay is not None and len(replay):
        images = torch.cat([images, replay.images])
        targets = torch.cat([targets, replay.targets])
        is_new = torch.cat([is_new, torch.zeros(len(replay), dtype=torch.bool)])
    dist = distribution_vector([*data.labels.tolist(), *(replay.targets if replay is not None else [])],
                               num_seen)
    prior = dist.adjustment(m.bs_variant).float() if m.use_balanced_softmax else None

    task_size = len(data)
    cumulative = state.cumulative_size + task_size
    lam = adaptive_lambda(task_size, cumulative)

    # (4) optimisation
    params = [p for p in bundle.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=t.base_lr, momentum=t.momentum, weight_decay=t.weight_decay)
    targets = targets.float()
    n = len(images)
    bundle.train()
    last_loss = float("nan")
    for epoch in range(t.epochs_per_task):
        lr = learning_rate(epoch, t.base_lr, t.lr_decay_epochs, t.lr_decay_factor)
        for g in opt.param_groups:
            g["lr"] = lr
        order = torch.randperm(n, generator=state.generator)
        for start in range(0, n, t.batch_size):
            idx = order[start:start + t.batch_size]
            if len(idx) < 2:
                # BatchNorm cannot train on a single sample
                continue
            batch = images[idx]
            if t.augment:
                fresh = is_new[idx]
                if fresh.any():
                    batch = batch.clone()
                    batch[fresh] = random_crop_flip(batch[fresh], state.generator)
            x = to_input(batch)
            y = targets[idx]
            feats, _ = bundle.extract(x)
            logits = bundle.classify(feats)
            if prior is not None:
                cls_loss = balanced_softmax_loss(logits, y, prior, tol=1e-4)
            else:
                cls_loss = soft_cross_entropy(logits, y)
            if use_logit_kd:
                kd = logit_kd_loss(logits[:, :num_old], teacher.logits(x),
                                   m.distill_config().temperature)
                loss = baseline_mixed_loss(kd, cls_loss, m.distill_config().alpha)
            elif use_fkd:
                if distill_mode == "logit":
                    dl = logit_kd_loss(logits[:, :num_old], teacher.logits(x),
                                       m.distill_config().temperature)
                else:
                    dl = fkd_loss(feats, teacher.extract(x)[0], bundle.predictor, distill_mode)
                loss = integrated_loss(cls_loss, dl, lam)
            else:
                loss = cls_loss
            if not torch.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite loss at task {state.task_index + 1}, epoch {epoch}",
                    {"task": state.task_index + 1, "epoch": epoch, "lr": lr,
                     "cls_loss": cls_loss.detach().item(), "lambda": lam},
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            last_loss = loss.detach().item()

    # (5) the predictor only lives for the duration of the task
    bundle.detach_predictor()
    bundle.eval()

    # (6) exemplars for the new classes
    if state.buffer is not None:
        rng = np.random.default_rng([t.seed, state.task_index])
        update_buffer(state.buffer, data.refs, data.images, data.labels, bundle,
                      selector=m.selector, rng=rng)

    # (7) freeze the teacher for the next task, (8) bookkeeping
    state.teacher = snapshot_teacher(bundle)
    state.cumulative_size = cumulative
    state.task_index += 1
    record = TaskRecord(task_size, cumulative, lam, len(replay) if replay is not None else 0,
                        int(replay.synthetic.sum()) if replay is not None else 0,
                        list(replay.warnings) if replay is not None else [], last_loss)
    return state, record


def load_task_data(task, label_map_start, store: ImageStore, label_map=None):
    """Images and classifier-row labels for one task (new rows follow ``label_map_start``)."""
    rows = {c: label_map_start + i for i, c in enumerate(task.class_order)}
    if label_map is not None:
        rows = {c: label_map[c] for c in task.class_order}
    refs = [r.image_ref for r in task.train_records]
    labels = torch.tensor([rows[r.class_id] for r in task.train_records], dtype=torch.long)
    return TaskData(refs, store.stack(refs), labels, tuple(task.class_order))


def _fresh_state(cfg: RunConfig) -> TrainState:
    bundle = build_bundle(cfg.model.backbone, tuple(cfg.model.widths), cfg.dataset.image_size)
    gen = torch.Generator().manual_seed(cfg.trainer.seed)
    buffer = ExemplarBuffer(cfg.method.memory_budget) if cfg.method.uses_memory else None
    return TrainState(bundle, buffer, generator=gen)


def dataset_hash(train: DatasetManifest, test: DatasetManifest, tasks: TaskSequence) -> str:
    h = hashlib.sha256()
    h.update(train.content_hash().encode())
    h.update(test.content_hash().encode())
    h.update(json.dumps([list(t.class_order) for t in tasks]).encode())
    return h.hexdigest()[:16]


def _checkpoint_path(ckpt_dir: Path, config_hash: str, task_no: int) -> Path:
    return ckpt_dir / f"{config_hash}_task{task_no:03d}.pt"


def _write_checkpoint(path, state: TrainState, cfg: RunConfig, metrics, config_hash):
    if state.bundle.predictor is not None:
        raise StateError("predictor must be detached before checkpointing")
    meta = {
        "config_hash": config_hash,
        "task_index": state.task_index,
        "cumulative_size": state.cumulative_size,
        "label_map": {str(k): v for k, v in state.label_map.items()},
        "buffer": state.buffer.to_records() if state.buffer is not None else None,
        "rng_state": state.generator.get_state(),
        "metrics": metrics.to_dict(),
    }
    save_checkpoint(path, state.bundle, meta)


def _resume(ckpt_dir: Path, config_hash: str, cfg: RunConfig, store: ImageStore):
    found = sorted(ckpt_dir.glob(f"{config_hash}_task*.pt")) if ckpt_dir.exists() else []
    if not found:
        return None, None
    state = _fresh_state(cfg)
    meta = load_checkpoint(found[-1], state.bundle)
    if meta.get("config_hash") != config_hash:
        return None, None
    state.task_index = meta["task_index"]
    state.cumulative_size = meta["cumulative_size"]
    state.label_map = {int(k): v for k, v in meta["label_map"].items()}
    if meta["buffer"] is not None:
        state.buffer = ExemplarBuffer.from_records(cfg.method.memory_budget, meta["buffer"], store.get)
    state.generator.set_state(meta["rng_state"])
    state.teacher = snapshot_teacher(state.bundle)
    metrics = evaluation.MetricsLog.from_dict(meta["metrics"])
    logger.info("resuming from %s after task %d", found[-1].name, state.task_index)
    return state, metrics


def run_continual(cfg: RunConfig, train: DatasetManifest, test: DatasetManifest,
                  tasks: TaskSequence, store: ImageStore | None = None, out_dir=None,
                  resume=False) -> evaluation.MetricsLog:
    """Train on every task in order, evaluating on all seen classes after each one.

    With ``out_dir`` the report (and, if enabled, per-task checkpoints) are
    written there; a failing run still leaves a report marked ``aborted``.
    """
    t = cfg.trainer
    set_determinism(t.seed, t.deterministic, t.num_threads)
    store = store or ImageStore(cfg.dataset.root or None, cfg.dataset.image_size)
    config_hash = cfg.hash()
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out is not None else None

    state = metrics = None
    if resume and ckpt_dir is not None:
        state, metrics = _resume(ckpt_dir, config_hash, cfg, store)
    if state is None:
        state = _fresh_state(cfg)
        metrics = evaluation.MetricsLog(meta={
            "config_hash": config_hash,
            "dataset_hash": dataset_hash(train, test, tasks),
            "seed": t.seed,
            "num_tasks": len(tasks),
            "class_names": list(train.class_names),
            "method": method_label(cfg),
            "task_classes": [list(task.class_order) for task in tasks],
            "started": time.time(),
        })
    metrics.meta["status"] = "running"

    test_refs = [r.image_ref for r in test.records]
    test_images = store.stack(test_refs)
    test_classes = np.array([r.class_id for r in test.records])
    train_counts = dict(enumerate(train.class_counts()))

    try:
        for ti in range(state.task_index, len(tasks)):
            task = tasks[ti]
            t0 = time.time()
            data = load_task_data(task, len(state.label_map), store)
            dump_dir = out / "synthetics" if (out is not None and cfg.output.dump_synthetics) else None
            state, rec = train_task(state, data, cfg, dump_dir)
            _evaluate_into(metrics, state, tasks, test_images, test_classes, train_counts,
                           cfg.method.memory_budget)
            metrics.lambdas.append(rec.lam)
            metrics.task_sizes.append(rec.task_size)
            metrics.cumulative_sizes.append(rec.cumulative_size)
            stats = state.buffer.stats() if state.buffer is not None else {}
            stats.update({"replay_size": rec.replay_size, "synthetic": rec.synthetic_count,
                          "warnings": rec.warnings, "final_loss": rec.final_loss})
            metrics.buffer_stats.append(stats)
            metrics.wall_times.append(time.time() - t0)
            logger.info("task %d/%d: acc %.2f (lambda %.4f)", ti + 1, len(tasks),
                        metrics.task_accuracies[-1], rec.lam)
            if ckpt_dir is not None and cfg.output.checkpoints:
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                _write_checkpoint(_checkpoint_path(ckpt_dir, config_hash, state.task_index),
                                  state, cfg, metrics, config_hash)
    except BaseException as e:
        metrics.meta["status"] = "aborted"
        metrics.meta["error"] = f"{type(e).__name__}: {e}"
        if isinstance(e, TrainingAborted):
            metrics.meta["diagnostic"] = e.diagnostic
        if out is not None:
            evaluation.export_report(metrics, out)
        raise
    metrics.meta["status"] = "complete"
    metrics.meta["finished"] = time.time()
    if out is not None:
        evaluation.export_report(metrics, out)
    return metrics


def _evaluate_into(metrics, state, tasks, test_images, test_classes, train_counts, budget):
    seen = sorted(state.label_map)
    mask = np.isin(test_classes, seen)
    images = test_images[torch.from_numpy(mask)]
    labels = np.array([state.label_map[c] for c in test_classes[mask]])
    pred = evaluation.predict(state.bundle, images)
    metrics.task_accuracies.append(evaluation.accuracy_from_predictions(pred, labels))
    metrics.seen_classes.append(len(seen))
    row_to_class = {v: k for k, v in state.label_map.items()}
    by_row = evaluation.per_class_accuracy(pred, labels)
    class_acc = {row_to_class[r]: a for r, a in by_row.items()}
    metrics.per_class.append({str(c): class_acc[c] for c in sorted(class_acc)})
    row = []
    for j, task in enumerate(tasks):
        if j < state.task_index:
            accs = [class_acc[c] for c in task.class_order if c in class_acc]
            row.append(float(np.mean(accs)) if accs else None)
        else:
            row.append(None)
    metrics.task_matrix.append(row)
    metrics.head_tail.append(evaluation.head_tail_breakdown(class_acc, train_counts, budget))


def method_label(cfg: RunConfig) -> str:
    m = cfg.method
    if m.baseline != "none":
        return m.baseline
    off = [name for name, on in (("fkd", m.use_fkd), ("cam", m.use_cam_cutmix),
                                 ("bs", m.use_balanced_softmax)) if not on]
    return "full" if not off else "full-" + "-".join(off)
