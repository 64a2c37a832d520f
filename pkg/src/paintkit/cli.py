"""Command-line surface: task generation, pretraining, fine-tuning, patching,
frontier metrics, and plot-ready report emission.

Configuration is a flat key=value text file; any key can be overridden on
the command line as `--key value`. Exit codes: 0 success, 1 usage/config
error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
import time
from dataclasses import replace

import numpy as np

from . import metrics as metrics_mod
from .metrics import Frontier, rep_matrix_from_csv
from .pipeline import PatchSpec, run_patch, split_task
from .tensors import (
    CheckpointError,
    cosine_similarity,
    l1_mean_distance,
    load_checkpoint,
    save_checkpoint,
)
from .toylab import TaskDataset, ToyModel, TrainConfig, finetune, generate_tasks, pretrain

USAGE_ERROR = 1
RUNTIME_ERROR = 2

KNOWN_KEYS = {
    # general
    "seed", "out_dir",
    # task generation
    "num_classes", "dim", "samples_per_class", "noise_scale", "tasks",
    "split_source", "split_seed",
    # training
    "iterations", "batch_size", "lr", "warmup", "weight_decay", "l2_init",
    "ema_decay", "snapshot_every", "constant_lr", "hidden", "embed_dim",
    "logit_scale",
    # patching
    "strategy", "alpha_grid", "search", "order_seeds", "budget",
    "group_weighting", "zs_checkpoint", "patching_tasks", "supported_tasks",
    "pretrain", "pretrain_tasks", "pretrain_iterations", "task",
    # metrics
    "frontier", "ckpt_a", "ckpt_b", "rep_a", "rep_b",
    # report
    "results_dir",
}


class ConfigError(Exception):
    pass


def parse_config(path=None, overrides=()):
    cfg = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                cfg[key.strip()] = value.strip()
    cfg.update(overrides)
    for key in cfg:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key: {key}")
    return cfg


def parse_overrides(tokens):
    overrides = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument: {tok}")
        key = tok[2:].replace("-", "_")
        if i + 1 >= len(tokens):
            raise ConfigError(f"missing value for --{key}")
        overrides[key] = tokens[i + 1]
        i += 2
    return overrides


def require(cfg, *keys):
    for key in keys:
        if key not in cfg:
            raise ConfigError(f"missing required key: {key}")
    return [cfg[k] for k in keys]


def parse_grid(text):
    """'start:stop:step' or comma-separated values."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        n = int(round((stop - start) / step))
        return [round(start + i * step, 10) for i in range(n + 1)]
    return [float(v) for v in text.split(",")]


def parse_partition(text):
    """Class partition like '0-9|10-14|15-19' or '0,1,2|3,4,5'."""
    groups = []
    for part in text.split("|"):
        ids = []
        for item in part.split(","):
            if "-" in item:
                lo, hi = item.split("-")
                ids.extend(range(int(lo), int(hi) + 1))
            else:
                ids.append(int(item))
        groups.append(ids)
    return groups


def atomic_write_text(path, text):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def train_config(cfg):
    kwargs = {}
    for key, cast in [
        ("iterations", int), ("batch_size", int), ("lr", float), ("warmup", int),
        ("weight_decay", float), ("seed", int), ("l2_init", float),
        ("snapshot_every", int), ("embed_dim", int), ("logit_scale", float),
    ]:
        if key in cfg:
            kwargs[key] = cast(cfg[key])
    if "ema_decay" in cfg:
        kwargs["ema_decay"] = float(cfg["ema_decay"])
    if "constant_lr" in cfg:
        kwargs["constant_lr"] = cfg["constant_lr"].lower() in ("1", "true", "yes")
    if "hidden" in cfg:
        kwargs["hidden"] = tuple(int(v) for v in cfg["hidden"].split(","))
    return TrainConfig(**kwargs)


def load_tasks(paths_text):
    return [TaskDataset.from_csv(p, name=os.path.splitext(os.path.basename(p))[0])
            for p in paths_text.split(",")]


def cmd_gen_tasks(cfg):
    (out_dir,) = require(cfg, "out_dir")
    os.makedirs(out_dir, exist_ok=True)
    if "split_source" in cfg:
        task = TaskDataset.from_csv(
            cfg["split_source"],
            name=os.path.splitext(os.path.basename(cfg["split_source"]))[0],
        )
        proto = split_task(task, int(cfg.get("split_seed", cfg.get("seed", 0))))
        for sub in (proto.task_a, proto.task_b):
            sub.to_csv(os.path.join(out_dir, f"{sub.name}.csv"))
            print(f"wrote {os.path.join(out_dir, sub.name + '.csv')}")
        return 0
    seed, num_classes, dim, spc, noise, partition = require(
        cfg, "seed", "num_classes", "dim", "samples_per_class", "noise_scale", "tasks"
    )
    tasks = generate_tasks(
        int(seed), int(num_classes), int(dim), int(spc), float(noise),
        parse_partition(partition),
    )
    for task in tasks:
        path = os.path.join(out_dir, f"{task.name}.csv")
        task.to_csv(path)
        print(f"wrote {path}")
    return 0


def cmd_pretrain(cfg):
    tasks_text, out_dir = require(cfg, "pretrain_tasks", "out_dir")
    os.makedirs(out_dir, exist_ok=True)
    tc = train_config(cfg)
    if "pretrain_iterations" in cfg:
        tc = replace(tc, iterations=int(cfg["pretrain_iterations"]))
    model = pretrain(tc, load_tasks(tasks_text))
    path = os.path.join(out_dir, "zero_shot.ckpt")
    save_checkpoint(model.ckpt, path)
    print(f"wrote {path}")
    return 0


def cmd_finetune(cfg):
    ckpt_path, task_text, out_dir = require(cfg, "zs_checkpoint", "task", "out_dir")
    os.makedirs(out_dir, exist_ok=True)
    model = ToyModel(load_checkpoint(ckpt_path))
    (task,) = load_tasks(task_text)
    record = finetune(model, task, train_config(cfg))
    path = os.path.join(out_dir, f"finetuned_{task.name}.ckpt")
    save_checkpoint(record.final, path)
    print(f"wrote {path}")
    return 0


def _result_json(result, strategy):
    return {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "strategy": strategy,
        "coefficients": list(result.coefficients),
        "val_accuracies": result.val_accuracies,
        "test_accuracies": result.test_accuracies,
        "averaged_val_accuracies": result.averaged_val_accuracies,
        "averaged_test_accuracies": result.averaged_test_accuracies,
        "frontier": {"unit": result.frontier.unit, "points": result.frontier.to_records()},
        "provenance": {k: v for k, v in result.provenance.items()},
    }


def cmd_patch(cfg):
    patching_text, supported_text, out_dir = require(
        cfg, "patching_tasks", "supported_tasks", "out_dir"
    )
    os.makedirs(out_dir, exist_ok=True)
    patching = load_tasks(patching_text)
    supported = load_tasks(supported_text)
    tc = train_config(cfg)
    if "zs_checkpoint" in cfg:
        model = ToyModel(load_checkpoint(cfg["zs_checkpoint"]))
    elif cfg.get("pretrain", "").lower() in ("1", "true", "yes"):
        ptc = tc
        if "pretrain_iterations" in cfg:
            ptc = replace(tc, iterations=int(cfg["pretrain_iterations"]))
        model = pretrain(ptc, load_tasks(require(cfg, "pretrain_tasks")[0]))
    else:
        raise ConfigError("missing required key: zs_checkpoint (or set pretrain=true)")

    spec = PatchSpec(
        model=model,
        patching_tasks=patching,
        supported_tasks=supported,
        strategy=cfg.get("strategy", "single"),
        alpha_grid=parse_grid(cfg["alpha_grid"]) if "alpha_grid" in cfg
        else PatchSpec.__dataclass_fields__["alpha_grid"].default_factory(),
        search=cfg.get("search", "grid"),
        order_seeds=tuple(int(s) for s in cfg.get("order_seeds", "0").split(",")),
        budget=int(cfg.get("budget", 50)),
        group_weighting=cfg.get("group_weighting", "").lower() in ("1", "true", "yes"),
        train=tc,
    )
    result = run_patch(spec)

    save_checkpoint(result.patched, os.path.join(out_dir, "patched.ckpt"))
    result.frontier.to_csv(os.path.join(out_dir, "frontier.csv"))
    atomic_write_json(os.path.join(out_dir, "patch_result.json"),
                      _result_json(result, spec.strategy))
    for seed, seed_result in zip(spec.order_seeds, result.per_seed):
        atomic_write_json(
            os.path.join(out_dir, f"patch_result_seed{seed}.json"),
            _result_json(seed_result, spec.strategy),
        )
    print(f"strategy={spec.strategy} coefficients={list(result.coefficients)}")
    print(f"wrote {os.path.join(out_dir, 'patch_result.json')}")
    return 0


def cmd_metrics(cfg):
    report = {}
    if "frontier" in cfg:
        for path in cfg["frontier"].split(","):
            f = Frontier.from_csv(path)
            entry = {
                "distance_to_endpoints": metrics_mod.distance_to_endpoints(f),
                "distance_to_optimal": metrics_mod.distance_to_optimal(f),
                "path_correction_cost": metrics_mod.path_correction_cost(f),
            }
            report[path] = entry
            for name, value in entry.items():
                print(f"{path} {name} {value:.6f}")
    if "ckpt_a" in cfg or "ckpt_b" in cfg:
        a_path, b_path = require(cfg, "ckpt_a", "ckpt_b")
        a, b = load_checkpoint(a_path), load_checkpoint(b_path)
        report["weights"] = {
            "cosine_similarity": cosine_similarity(a, b),
            "l1_mean_distance": l1_mean_distance(a, b),
        }
        for name, value in report["weights"].items():
            print(f"{name} {value:.6f}")
    if "rep_a" in cfg or "rep_b" in cfg:
        a_path, b_path = require(cfg, "rep_a", "rep_b")
        value = metrics_mod.cka(rep_matrix_from_csv(a_path), rep_matrix_from_csv(b_path))
        report["cka"] = value
        print(f"cka {value:.6f}")
    if not report:
        raise ConfigError("missing required key: frontier (or ckpt_a/ckpt_b, rep_a/rep_b)")
    if "out_dir" in cfg:
        os.makedirs(cfg["out_dir"], exist_ok=True)
        atomic_write_json(os.path.join(cfg["out_dir"], "metrics.json"), report)
    return 0


def cmd_report(cfg):
    (results_dir,) = require(cfg, "results_dir")
    out_dir = cfg.get("out_dir", results_dir)
    os.makedirs(out_dir, exist_ok=True)
    results = []
    for root, _, files in os.walk(results_dir):
        for name in sorted(files):
            if name.startswith("patch_result") and name.endswith(".json"):
                with open(os.path.join(root, name)) as f:
                    results.append((os.path.join(root, name), json.load(f)))
    if not results:
        print("no patch results found", file=sys.stderr)
        return RUNTIME_ERROR

    series = []
    for path, obj in results:
        rel = os.path.relpath(path, results_dir)
        label = os.path.splitext(rel)[0].replace(os.sep, "/")
        points = obj["frontier"]["points"]
        series.append((label, points))
    rows = [["series", "alpha", "supported_acc", "patching_acc"]]
    for label, points in series:
        for p in points:
            rows.append([label, p["alpha"], p["supported_acc"], p["patching_acc"]])

    # Average across experiments at shared alpha values.
    by_alpha = {}
    for _, points in series:
        for p in points:
            by_alpha.setdefault(p["alpha"], []).append((p["supported_acc"], p["patching_acc"]))
    for alpha in sorted(by_alpha):
        vals = by_alpha[alpha]
        if len(vals) == len(series):
            rows.append([
                "average", alpha,
                float(np.mean([v[0] for v in vals])),
                float(np.mean([v[1] for v in vals])),
            ])

    # Pass named baseline frontiers through when present.
    for root, _, files in os.walk(results_dir):
        for name in sorted(files):
            if name.startswith("baseline_") and name.endswith(".csv"):
                label = os.path.splitext(name)[0]
                f = Frontier.from_csv(os.path.join(root, name), unit="fraction")
                for p in f.points:
                    rows.append([label, p.alpha, p.supported_acc, p.patching_acc])

    scatter_path = os.path.join(out_dir, "scatter.csv")
    buf = []
    for row in rows:
        buf.append(",".join(str(v) for v in row))
    atomic_write_text(scatter_path, "\n".join(buf) + "\n")
    atomic_write_json(
        os.path.join(out_dir, "report.json"),
        {"experiments": [label for label, _ in series], "scatter_csv": scatter_path},
    )
    print(f"wrote {scatter_path}")
    return 0


COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "patch": cmd_patch,
    "metrics": cmd_metrics,
    "report": cmd_report,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="paintkit", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key=value config file")
    args, rest = parser.parse_known_args(argv)
    try:
        cfg = parse_config(args.config, parse_overrides(rest))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (CheckpointError, ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
