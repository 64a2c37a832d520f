"""End-to-end patching procedures: single, joint, sequential, and parallel
strategies, disjoint-class task splitting, and the broad-transfer protocol."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import Frontier, sweep_to_frontier
from .search import (
    SearchObjective,
    black_box_search,
    default_grid,
    grid_search_1d,
    uniform_search_parallel,
)
from .tensors import Checkpoint, lerp, multi_combine
from .toylab import TaskDataset, ToyModel, TrainConfig, evaluate, finetune, merge_tasks


def thread_cap(default=1):
    """Internal parallelism cap, settable via PAINTKIT_THREADS."""
    raw = os.environ.get("PAINTKIT_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return default


@dataclass
class PatchSpec:
    model: ToyModel
    patching_tasks: list
    supported_tasks: list
    strategy: str = "single"
    alpha_grid: list = field(default_factory=default_grid)
    search: str = "grid"  # parallel strategy: "uniform" or "blackbox"
    order_seeds: tuple = (0,)
    budget: int = 50
    group_weighting: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.patching_tasks:
            raise ValueError("need at least one patching task")
        if not self.supported_tasks:
            raise ValueError("need at least one supported task")
        if self.strategy == "sequential" and not self.order_seeds:
            raise ValueError("sequential strategy needs at least one order seed")


@dataclass
class PatchResult:
    patched: Checkpoint
    coefficients: tuple
    frontier: Frontier
    val_accuracies: dict
    test_accuracies: dict
    provenance: dict
    fine_tuned: list
    zero_shot: Checkpoint
    access_log: dict
    per_seed: list = field(default_factory=list)
    averaged_val_accuracies: dict = field(default_factory=dict)
    averaged_test_accuracies: dict = field(default_factory=dict)


def _objective_value(accs, supported, patching, group_weighting):
    if group_weighting:
        sup = np.mean([accs[t.name] for t in supported])
        pat = np.mean([accs[t.name] for t in patching])
        return (float(sup) + float(pat)) / 2.0
    return float(np.mean([accs[t.name] for t in supported + patching]))


def _eval_all(model, ckpt, tasks, split, log):
    m = model.with_weights(ckpt)
    return {t.name: evaluate(m, t, split, log) for t in tasks}


def _sweep_and_select(model, zs, ft, patching_tasks, supported_tasks, grid, group_weighting):
    """Sweep the alpha grid on validation splits, pick alpha, build frontier."""
    selection_log = []
    tasks = supported_tasks + patching_tasks
    records = {}

    def objective(coeffs):
        (alpha,) = coeffs
        accs = _eval_all(model, lerp(zs, ft, alpha), tasks, "val", selection_log)
        records[alpha] = accs
        return _objective_value(accs, supported_tasks, patching_tasks, group_weighting)

    result = grid_search_1d(SearchObjective(objective), grid)
    (alpha_star,) = result.best
    frontier = sweep_to_frontier(
        sorted(records.items()),
        [t.name for t in supported_tasks],
        [t.name for t in patching_tasks],
        unit="fraction",
    )
    return alpha_star, result, frontier, records, selection_log


def _single_result(model, zs, ft, ft_task_name, patching_tasks, supported_tasks, spec):
    alpha_star, search_result, frontier, records, selection_log = _sweep_and_select(
        model, zs, ft, patching_tasks, supported_tasks, spec.alpha_grid, spec.group_weighting
    )
    patched = lerp(zs, ft, alpha_star)
    report_log = []
    tasks = supported_tasks + patching_tasks
    test_accs = _eval_all(model, patched, tasks, "test", report_log)
    return PatchResult(
        patched=patched,
        coefficients=(alpha_star,),
        frontier=frontier,
        val_accuracies=records[alpha_star],
        test_accuracies=test_accs,
        provenance={
            "strategy": spec.strategy,
            "fine_tuned_on": ft_task_name,
            "alphas": [alpha_star],
            "search_evaluations": search_result.evaluations,
        },
        fine_tuned=[ft],
        zero_shot=zs,
        access_log={"selection": selection_log, "report": report_log},
    )


def patch_single(spec: PatchSpec) -> PatchResult:
    """Fine-tune on the single patching task, sweep the alpha grid against
    validation accuracy on all tasks, and return the selected interpolation."""
    if len(spec.patching_tasks) != 1:
        raise ValueError("patch_single expects exactly one patching task")
    task = spec.patching_tasks[0]
    zs = spec.model.ckpt
    ft = finetune(spec.model, task, spec.train).final
    return _single_result(
        spec.model, zs, ft, task.name, spec.patching_tasks, spec.supported_tasks, spec
    )


def patch_joint(spec: PatchSpec) -> PatchResult:
    """Merge the patching tasks into one fine-tuning task (labels keep their
    global ids); accuracies stay reported per original task."""
    if len(spec.patching_tasks) == 1:
        return patch_single(replace(spec, strategy="single"))
    merged = merge_tasks(spec.patching_tasks, name="joint")
    zs = spec.model.ckpt
    ft = finetune(spec.model, merged, spec.train).final
    return _single_result(
        spec.model, zs, ft, merged.name, spec.patching_tasks, spec.supported_tasks, spec
    )


def patch_sequential(spec: PatchSpec) -> PatchResult:
    """Iterate the patching procedure per order seed, feeding each step's
    patched model into the next; at step i the objective only touches
    validation sets of the supported tasks and the tasks seen so far."""
    per_seed = []
    for seed in spec.order_seeds:
        order = list(np.random.default_rng(seed).permutation(len(spec.patching_tasks)))
        current = spec.model
        seen = []
        steps = []
        selection_log = []
        for task_idx in order:
            task = spec.patching_tasks[task_idx]
            zs = current.ckpt
            ft = finetune(current, task, spec.train).final
            alpha_star, _, frontier, records, log = _sweep_and_select(
                current, zs, ft, seen + [task], spec.supported_tasks,
                spec.alpha_grid, spec.group_weighting,
            )
            selection_log.extend(log)
            patched = lerp(zs, ft, alpha_star)
            steps.append({"task": task.name, "alpha": alpha_star, "ft": ft, "frontier": frontier})
            current = current.with_weights(patched)
            seen.append(task)
        report_log = []
        tasks = spec.supported_tasks + spec.patching_tasks
        val_accs = _eval_all(spec.model, current.ckpt, tasks, "val", selection_log)
        test_accs = _eval_all(spec.model, current.ckpt, tasks, "test", report_log)
        per_seed.append(
            PatchResult(
                patched=current.ckpt,
                coefficients=tuple(s["alpha"] for s in steps),
                frontier=steps[-1]["frontier"],
                val_accuracies=val_accs,
                test_accuracies=test_accs,
                provenance={
                    "strategy": "sequential",
                    "order_seed": seed,
                    "task_order": [s["task"] for s in steps],
                    "alphas": [s["alpha"] for s in steps],
                },
                fine_tuned=[s["ft"] for s in steps],
                zero_shot=spec.model.ckpt,
                access_log={"selection": selection_log, "report": report_log},
            )
        )
    names = list(per_seed[0].test_accuracies)
    avg_val = {n: float(np.mean([r.val_accuracies[n] for r in per_seed])) for n in names}
    avg_test = {n: float(np.mean([r.test_accuracies[n] for r in per_seed])) for n in names}
    head = per_seed[0]
    return replace(
        head,
        per_seed=per_seed,
        averaged_val_accuracies=avg_val,
        averaged_test_accuracies=avg_test,
    )


def patch_parallel(spec: PatchSpec) -> PatchResult:
    """Fine-tune every patching task independently from the zero-shot model,
    then pick mixing coefficients by uniform or black-box search."""
    if len(spec.patching_tasks) == 1:
        return patch_single(replace(spec, strategy="single"))
    zs = spec.model.ckpt
    configs = [replace(spec.train, seed=spec.train.seed + i)
               for i in range(len(spec.patching_tasks))]
    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        fts = [
            r.final
            for r in pool.map(lambda tc: finetune(spec.model, tc[0], tc[1]),
                              zip(spec.patching_tasks, configs))
        ]

    selection_log = []
    tasks = spec.supported_tasks + spec.patching_tasks

    def score(ckpt):
        accs = _eval_all(spec.model, ckpt, tasks, "val", selection_log)
        return _objective_value(accs, spec.supported_tasks, spec.patching_tasks,
                                spec.group_weighting)

    if spec.search == "blackbox":
        obj = SearchObjective(lambda coeffs: score(multi_combine(zs, fts, coeffs)))
        result = black_box_search(obj, k=len(fts), budget=spec.budget,
                                  init=0.5, seed=spec.order_seeds[0])
    else:
        result = uniform_search_parallel(zs, fts, score, spec.alpha_grid)

    coeffs = result.best
    patched = multi_combine(zs, fts, coeffs)

    # Uniform-ray frontier for reporting, regardless of search method.
    frontier_records = []
    frontier_log = []
    for beta in spec.alpha_grid:
        ckpt = multi_combine(zs, fts, [beta / len(fts)] * len(fts))
        frontier_records.append(
            (beta, _eval_all(spec.model, ckpt, tasks, "val", frontier_log))
        )
    frontier = sweep_to_frontier(
        frontier_records,
        [t.name for t in spec.supported_tasks],
        [t.name for t in spec.patching_tasks],
        unit="fraction",
    )
    selection_log.extend(frontier_log)

    report_log = []
    val_accs = _eval_all(spec.model, patched, tasks, "val", selection_log)
    test_accs = _eval_all(spec.model, patched, tasks, "test", report_log)
    return PatchResult(
        patched=patched,
        coefficients=tuple(coeffs),
        frontier=frontier,
        val_accuracies=val_accs,
        test_accuracies=test_accs,
        provenance={
            "strategy": "parallel",
            "search": spec.search,
            "alphas": list(coeffs),
            "search_evaluations": result.evaluations,
            "best_value": result.best_value,
        },
        fine_tuned=fts,
        zero_shot=zs,
        access_log={"selection": selection_log, "report": report_log},
    )


def run_patch(spec: PatchSpec) -> PatchResult:
    strategies = {
        "single": patch_single,
        "joint": patch_joint,
        "sequential": patch_sequential,
        "parallel": patch_parallel,
    }
    if spec.strategy not in strategies:
        raise ValueError(f"unknown strategy {spec.strategy!r}")
    return strategies[spec.strategy](spec)


def reconstruct(result: PatchResult) -> Checkpoint:
    """Rebuild the patched checkpoint from its provenance; bit-exact."""
    strategy = result.provenance["strategy"]
    if strategy == "sequential":
        current = result.zero_shot
        for ft, alpha in zip(result.fine_tuned, result.provenance["alphas"]):
            current = lerp(current, ft, alpha)
        return current
    if strategy == "parallel":
        return multi_combine(result.zero_shot, result.fine_tuned,
                             result.provenance["alphas"])
    return lerp(result.zero_shot, result.fine_tuned[0], result.provenance["alphas"][0])


@dataclass
class SplitProtocol:
    source: str
    seed: int
    task_a: TaskDataset
    task_b: TaskDataset


def _subset_task(task, keep_classes, name):
    keep = np.isin(task.labels, list(keep_classes))
    new_index = np.full(len(task.labels), -1, dtype=np.int64)
    new_index[keep] = np.arange(int(keep.sum()))
    splits = {}
    for split, idx in task.splits.items():
        kept = [int(new_index[i]) for i in idx if keep[i]]
        splits[split] = kept
    return TaskDataset(
        name, task.inputs[keep], task.labels[keep], tuple(sorted(keep_classes)), splits
    )


def split_task(task: TaskDataset, seed: int) -> SplitProtocol:
    """Seeded partition of the class space into halves with disjoint ids
    (sizes differ by at most one class); examples follow their labels."""
    if len(task.class_ids) < 2:
        raise ValueError("cannot split a single-class task")
    ids = list(task.class_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    half = len(ids) // 2
    set_a, set_b = shuffled[:half], shuffled[half:]
    return SplitProtocol(
        source=task.name,
        seed=seed,
        task_a=_subset_task(task, set_a, f"{task.name}_A"),
        task_b=_subset_task(task, set_b, f"{task.name}_B"),
    )


def write_broad_transfer_csv(rows, path):
    """Broad-transfer report: one row per held-out task."""
    with open(path, "w") as f:
        f.write("task,unpatched_B,patched_B,delta\n")
        for row in rows:
            f.write(f"{row['task']},{row['unpatched_B']!r},"
                    f"{row['patched_B']!r},{row['delta']!r}\n")


def broad_transfer_eval(model, task_a, task_b, supported_tasks, spec_kwargs=None):
    """Patch on task A only (B never touches training or alpha selection),
    then measure the patched model on B's test split."""
    spec = PatchSpec(
        model=model,
        patching_tasks=[task_a],
        supported_tasks=supported_tasks,
        strategy="single",
        **(spec_kwargs or {}),
    )
    result = patch_single(spec)
    zs_on_b = evaluate(model, task_b, "test")
    patched_on_b = evaluate(model.with_weights(result.patched), task_b, "test")
    return {
        "task": task_b.name,
        "patched_on": task_a.name,
        "alpha": result.coefficients[0],
        "unpatched_B": zs_on_b,
        "patched_B": patched_on_b,
        "delta": patched_on_b - zs_on_b,
        "result": result,
    }
