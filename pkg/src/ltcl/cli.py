"""Command-line entry points: ``gen-data``, ``train`` and ``report``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from . import synthetic
from .config import load_config, resolve_baseline
from .dataset import (PRESETS, apply_longtail, build_longtail_profile, load_manifest,
                      load_manifests, load_tasks, partition_tasks, preset_partition,
                      save_manifest, save_profile, save_tasks, seeded_permutation)
from .errors import ConfigError, ManifestError, ParameterError
from .evaluation import load_report
from .trainer import TrainingAborted, run_continual

logger = logging.getLogger("ltcl")

ABLATIONS = {"fkd": "use_fkd", "cam": "use_cam_cutmix", "bs": "use_balanced_softmax"}


class CliError(Exception):
    pass


def _kv_pairs(tokens) -> dict:
    out = {}
    for tok in tokens:
        for part in tok.split(","):
            if not part:
                continue
            if "=" not in part:
                raise CliError(f"expected key=value, got {part!r}")
            k, v = part.split("=", 1)
            out[k.strip().replace("_", "-")] = v.strip()
    return out


def _int(d, key, default=None):
    if key not in d:
        if default is None:
            raise CliError(f"missing {key}=")
        return default
    try:
        return int(d[key])
    except ValueError:
        raise CliError(f"{key} must be an integer, got {d[key]!r}") from None


def _float(d, key, default=None):
    if key not in d:
        if default is None:
            raise CliError(f"missing {key}=")
        return default
    try:
        return float(d[key])
    except ValueError:
        raise CliError(f"{key} must be a number, got {d[key]!r}") from None


def _count_table(train, class_order=None) -> str:
    counts = train.class_counts()
    order = class_order if class_order is not None else sorted(range(len(counts)),
                                                               key=lambda c: -counts[c])
    lines = [f"{'rank':>4}  {'class':>5}  {'count':>6}  name"]
    for rank, c in enumerate(order):
        lines.append(f"{rank:>4}  {c:>5}  {counts[c]:>6}  {train.class_names[c]}")
    lines.append(f"total {sum(counts)} training images over {len(counts)} classes")
    return "\n".join(lines)


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get("LTCL_SEED", 0))
    out = Path(args.out or os.environ.get("LTCL_DATA_DIR") or "data")
    profile = class_order = None

    # build everything in memory first; nothing is written unless all of it validates
    if args.synthetic is not None:
        spec = _kv_pairs(args.synthetic)
        unknown = set(spec) - {"classes", "n-max", "rho", "tasks", "kind", "test-per-class", "seed",
                               "task-seed"}
        if unknown:
            raise CliError(f"unknown synthetic option(s): {sorted(unknown)}")
        C = _int(spec, "classes")
        seed = _int(spec, "seed", seed)
        profile = build_longtail_profile(C, _int(spec, "n-max"), _float(spec, "rho"),
                                         spec.get("kind", "exponential"))
        class_order = seeded_permutation(C, seed)
        per_class = [0] * C
        for rank, c in enumerate(class_order):
            per_class[c] = profile.counts[rank]
        source = synthetic.source_manifest(C, per_class, seed, "train")
        train = apply_longtail(source, profile, class_order, seed)
        test = synthetic.source_manifest(C, _int(spec, "test-per-class", 100), seed, "test")
        num_tasks = _int(spec, "tasks", args.tasks or 1)
        # separate stream so task membership is independent of class frequency rank
        task_seed = _int(spec, "task-seed", seed + 1)
        tasks = partition_tasks(train, num_tasks, task_seed, args.split_rule, _task_counts(args))
    else:
        if not args.source:
            raise CliError("no data source: pass --synthetic ... or --source MANIFEST")
        src = Path(args.source)
        if not src.exists():
            raise CliError(f"source manifest not found: {src}")
        splits = load_manifests(src)
        if "train" not in splits:
            raise CliError(f"{src} has no train records")
        train = splits["train"]
        test = load_manifest(args.test_source, "test") if args.test_source else splits.get("test")
        if test is None:
            test = load_manifest(src, "test")
        if args.profile:
            spec = _kv_pairs(args.profile)
            profile = build_longtail_profile(train.num_classes, _int(spec, "n-max"),
                                             _float(spec, "rho"), spec.get("kind", "pareto"))
            class_order = seeded_permutation(train.num_classes, seed)
            train = apply_longtail(train, profile, class_order, seed)
        if args.preset:
            tasks = preset_partition(args.preset, train, seed)
        else:
            if not args.tasks:
                raise CliError("pass --preset NAME or --tasks N")
            tasks = partition_tasks(train, args.tasks, seed, args.split_rule, _task_counts(args))

    out.mkdir(parents=True, exist_ok=True)
    save_manifest(out / "train.tsv", train)
    save_manifest(out / "test.tsv", test)
    if profile is not None:
        save_profile(out / "profile.json", profile, class_order)
    save_tasks(out / "tasks.json", tasks)
    cfg = {"dataset": {"train_manifest": "train.tsv", "test_manifest": "test.tsv",
                       "tasks_file": "tasks.json"},
           "tasks": {"num_tasks": len(tasks), "seed": tasks.seed},
           "output": {"out_dir": "runs/default"}}
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    print(_count_table(train, class_order))
    print("task sizes:", tasks.sizes)
    print(f"wrote {out}")
    return 0


def _task_counts(args):
    if not args.task_counts:
        return None
    try:
        return [int(x) for x in args.task_counts.split(",")]
    except ValueError:
        raise CliError(f"--task-counts must be comma-separated integers") from None


def load_run_inputs(cfg):
    """Manifests and task split named by a RunConfig."""
    ds = cfg.dataset
    train = load_manifest(ds.train_manifest, "train")
    if ds.test_manifest:
        test = load_manifest(ds.test_manifest, "test")
    else:
        test = load_manifest(ds.train_manifest, "test")
    if len(train) == 0:
        raise ConfigError(f"{ds.train_manifest} has no training records")
    if len(test) == 0:
        raise ConfigError("no test records found")
    if ds.tasks_file:
        tasks = load_tasks(ds.tasks_file, train)
    elif cfg.tasks.preset:
        tasks = preset_partition(cfg.tasks.preset, train, cfg.tasks.seed)
    else:
        tasks = partition_tasks(train, cfg.tasks.num_tasks, cfg.tasks.seed,
                                cfg.tasks.split_rule, cfg.tasks.counts)
    return train, test, tasks


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.baseline:
        cfg.method.baseline = args.baseline
    for name in args.ablate or []:
        setattr(cfg.method, ABLATIONS[name], False)
    if args.seed is not None:
        cfg.trainer.seed = args.seed
    if args.out:
        cfg.output.out_dir = args.out
    resolve_baseline(cfg).validate()
    train, test, tasks = load_run_inputs(cfg)

    out = Path(cfg.output.out_dir)
    try:
        metrics = run_continual(cfg, train, test, tasks, out_dir=out, resume=args.resume)
    except TrainingAborted as e:
        print(f"training aborted: {e}; partial report in {out}", file=sys.stderr)
        return 1
    for i, acc in enumerate(metrics.task_accuracies, 1):
        print(f"task {i}: top-1 {acc:.2f}%  (lambda {metrics.lambdas[i - 1]:.4f})")
    print(f"A_M = {metrics.average_accuracy:.2f}%  [{metrics.meta['method']}]  report: {out}")
    return 0


def cmd_report(args) -> int:
    runs = []
    for d in args.reports:
        try:
            m = load_report(d)
        except FileNotFoundError:
            raise CliError(f"no metrics.json in {d}") from None
        if m.meta.get("status") != "complete":
            raise CliError(f"{d}: report is not complete (status {m.meta.get('status')!r})")
        runs.append((str(d), m))
    ns = {m.num_tasks for _, m in runs}
    if len(ns) > 1:
        detail = ", ".join(f"{d}: N={m.num_tasks}" for d, m in runs)
        raise CliError(f"cannot merge reports with different task counts ({detail})")
    hashes = {m.meta.get("dataset_hash") for _, m in runs}
    comparable = len(hashes) == 1
    ref = runs[0][1].average_accuracy
    rows = sorted(runs, key=lambda r: -r[1].average_accuracy)
    header = ["run", "method", "seed", "A_M"] + (["delta"] if comparable and len(runs) > 1 else [])
    table = [header]
    for d, m in rows:
        row = [d, m.meta.get("method", ""), str(m.meta.get("seed", "")),
               f"{m.average_accuracy:.2f}"]
        if len(header) == 5:
            row.append(f"{m.average_accuracy - ref:+.2f}")
        table.append(row)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    for r in table:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    if not comparable:
        print("note: reports use different datasets; delta column omitted")
    if args.csv:
        Path(args.csv).write_text("\n".join(",".join(r) for r in table) + "\n", encoding="utf-8")
    if args.series:
        lines = ["task\t" + "\t".join(d for d, _ in runs)]
        for i in range(ns.pop()):
            lines.append(f"{i + 1}\t" + "\t".join(repr(m.task_accuracies[i]) for _, m in runs))
        Path(args.series).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltcl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build long-tailed manifests and task splits")
    g.add_argument("--synthetic", nargs="+", metavar="KEY=VALUE",
                   help="procedural corpus, e.g. classes=10 n-max=500 rho=50 tasks=5")
    g.add_argument("--source", help="manifest with train (and optionally test) records")
    g.add_argument("--test-source", help="separate test manifest")
    g.add_argument("--profile", nargs="+", metavar="KEY=VALUE",
                   help="long-tail subsampling of --source, e.g. kind=pareto n-max=750 rho=100")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--tasks", type=int)
    g.add_argument("--split-rule", default="even_plus_remainder_first",
                   choices=["even_plus_remainder_first", "explicit"])
    g.add_argument("--task-counts", help="comma-separated classes per task (explicit rule)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory (default $LTCL_DATA_DIR or ./data)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run continual learning from a config file")
    t.add_argument("-c", "--config", required=True)
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    t.add_argument("--baseline", choices=["finetune", "logit_kd"])
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="compare finished runs")
    r.add_argument("reports", nargs="+")
    r.add_argument("--csv")
    r.add_argument("--series")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, ParameterError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
