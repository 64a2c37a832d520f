"""Desk-scale lab: synthetic Gaussian-cluster tasks, a small MLP classifier
with a frozen procedural class-embedding head (so any class id is usable
without training), an AdamW fine-tuning recipe with warmup + cosine
annealing, and the baseline trade-off frontiers (early stopping, L2-to-init,
learning-rate ladder, EMA)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import Frontier, FrontierPoint
from .tensors import Checkpoint

_EMBED_STREAM = 0x0E03BEDD  # fixed stream id so embeddings depend only on the class id


def class_embedding(class_id: int, dim: int) -> np.ndarray:
    """Deterministic unit-norm embedding for a global class id."""
    if class_id < 0:
        raise ValueError("class_id must be >= 0")
    rng = np.random.default_rng([_EMBED_STREAM, int(class_id)])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def head_matrix(class_ids, dim) -> np.ndarray:
    """Frozen head: one unit-norm embedding row per class id."""
    return np.stack([class_embedding(c, dim) for c in class_ids])


@dataclass
class TaskDataset:
    """Labeled examples with train/val/test splits in a global class-id space."""

    name: str
    inputs: np.ndarray
    labels: np.ndarray
    class_ids: tuple
    splits: dict

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if not set(self.labels.tolist()) <= set(self.class_ids):
            raise ValueError(f"task {self.name!r}: label outside class_ids")
        seen = set()
        for split, idx in self.splits.items():
            idx = np.asarray(idx, dtype=np.int64)
            self.splits[split] = idx
            if idx.size == 0:
                raise ValueError(f"task {self.name!r}: empty split {split!r}")
            overlap = seen & set(idx.tolist())
            if overlap:
                raise ValueError(f"task {self.name!r}: overlapping split indices")
            seen |= set(idx.tolist())

    @property
    def dim(self):
        return self.inputs.shape[1]

    def split_arrays(self, split):
        idx = self.splits[split]
        return self.inputs[idx], self.labels[idx]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "split", "label"] + [f"f{i}" for i in range(self.dim)])
            split_of = {}
            for split, idx in self.splits.items():
                for i in idx:
                    split_of[int(i)] = split
            for i in range(len(self.labels)):
                w.writerow(
                    [i, split_of.get(i, ""), int(self.labels[i])]
                    + [repr(float(v)) for v in self.inputs[i]]
                )

    @classmethod
    def from_csv(cls, path, name=None):
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header = rows[0]
        if header[:3] != ["id", "split", "label"]:
            raise ValueError(f"bad task CSV header in {path}")
        dim = len(header) - 3
        inputs, labels, splits = [], [], {"train": [], "val": [], "test": []}
        for row in rows[1:]:
            i, split, label = int(row[0]), row[1], int(row[2])
            inputs.append([float(v) for v in row[3 : 3 + dim]])
            labels.append(label)
            if split:
                splits.setdefault(split, []).append(i)
        labels = np.asarray(labels, dtype=np.int64)
        class_ids = tuple(sorted(set(labels.tolist())))
        return cls(
            name or str(path),
            np.asarray(inputs, dtype=np.float64),
            labels,
            class_ids,
            {k: v for k, v in splits.items() if v},
        )


def generate_tasks(seed, num_classes, dim, samples_per_class, noise_scale, partition):
    """Synthetic tasks: one Gaussian cluster per class, 80/10/10 splits.

    `partition` is a list of class-id sets (disjoint, ids in
    [0, num_classes)); one TaskDataset is produced per set.
    """
    if num_classes < 2 or dim < 1 or samples_per_class < 10:
        raise ValueError("need num_classes >= 2, dim >= 1, samples_per_class >= 10")
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    partition = [sorted(int(c) for c in group) for group in partition]
    flat = [c for group in partition for c in group]
    if len(flat) != len(set(flat)):
        raise ValueError("duplicate class across tasks")
    for group in partition:
        if len(group) < 2:
            raise ValueError("each task needs at least 2 classes")
        for c in group:
            if not 0 <= c < num_classes:
                raise ValueError(f"class id {c} outside [0, {num_classes})")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim)) * 2.0
    tasks = []
    for t, group in enumerate(partition):
        inputs, labels = [], []
        splits = {"train": [], "val": [], "test": []}
        for c in group:
            noise = rng.standard_normal((samples_per_class, dim)) * noise_scale
            start = len(labels)
            inputs.append(means[c] + noise)
            labels.extend([c] * samples_per_class)
            n_train = int(round(0.8 * samples_per_class))
            n_val = int(round(0.1 * samples_per_class))
            idx = np.arange(start, start + samples_per_class)
            splits["train"].extend(idx[:n_train])
            splits["val"].extend(idx[n_train : n_train + n_val])
            splits["test"].extend(idx[n_train + n_val :])
        tasks.append(
            TaskDataset(
                name=f"task{t}",
                inputs=np.concatenate(inputs),
                labels=np.asarray(labels),
                class_ids=tuple(group),
                splits=splits,
            )
        )
    return tasks


def merge_tasks(tasks, name="merged"):
    """Concatenate tasks into one (labels keep their global ids).

    Exact duplicate examples (same features and label) are rejected.
    """
    inputs = np.concatenate([t.inputs for t in tasks])
    labels = np.concatenate([t.labels for t in tasks])
    rows = {tuple(x) + (int(y),) for x, y in zip(tasks[0].inputs, tasks[0].labels)}
    for t in tasks[1:]:
        for x, y in zip(t.inputs, t.labels):
            row = tuple(x) + (int(y),)
            if row in rows:
                raise ValueError(f"duplicate example across tasks (label {y})")
            rows.add(row)
    class_ids = tuple(sorted({c for t in tasks for c in t.class_ids}))
    splits = {"train": [], "val": [], "test": []}
    offset = 0
    for t in tasks:
        for split in splits:
            splits[split].extend(t.splits[split] + offset)
        offset += len(t.labels)
    return TaskDataset(name, inputs, labels, class_ids, splits)


@dataclass
class TrainConfig:
    iterations: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    warmup: int = 50
    weight_decay: float = 0.1
    seed: int = 0
    l2_init: float = 0.0
    ema_decay: float | None = None
    snapshot_every: int = 0
    constant_lr: bool = False
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    hidden: tuple = (64, 64)
    embed_dim: int = 16
    logit_scale: float = 20.0

    def __post_init__(self):
        if self.warmup > self.iterations:
            raise ValueError("warmup must be <= iterations")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_schedule(step, config: TrainConfig) -> float:
    """Linear warmup from 0 to peak, then cosine annealing to exactly 0 at
    the final step (or constant at peak when constant_lr is set)."""
    peak = config.lr
    if config.warmup > 0 and step < config.warmup:
        return peak * step / config.warmup
    if config.constant_lr:
        return peak
    last = config.iterations - 1
    if last <= config.warmup:
        return 0.0 if step >= last and step > 0 else peak
    progress = (step - config.warmup) / (last - config.warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainRecord:
    final: Checkpoint
    snapshots: dict = field(default_factory=dict)
    ema_snapshots: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)


class ToyModel:
    """Small MLP encoder with tanh activations, unit-normalized output
    features, and a frozen procedural class-embedding head.

    logits(x) = logit_scale * normalize(encoder(x)) @ head(class_ids).T
    Trainable weights live in a float64 Checkpoint; the head never does.
    """

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        self.logit_scale = float(ckpt.meta["logit_scale"])
        self.embed_dim = int(ckpt.meta["embed_dim"])
        self.n_layers = int(ckpt.meta["n_layers"])

    @classmethod
    def init(cls, seed, in_dim, hidden=(64, 64), embed_dim=16, logit_scale=20.0):
        rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden, embed_dim]
        tensors = {}
        for i in range(len(dims) - 1):
            fan_in = dims[i]
            tensors[f"enc.w{i}"] = rng.standard_normal((dims[i + 1], dims[i])) / math.sqrt(fan_in)
            tensors[f"enc.b{i}"] = np.zeros(dims[i + 1])
        meta = {
            "logit_scale": repr(float(logit_scale)),
            "embed_dim": str(embed_dim),
            "n_layers": str(len(dims) - 1),
        }
        return cls(Checkpoint(tensors, meta))

    def with_weights(self, ckpt: Checkpoint):
        """Same architecture and head, different trainable weights."""
        return ToyModel(ckpt.with_meta(self.ckpt.meta))

    def _layers(self, ckpt=None):
        if ckpt is None:
            ckpt = self.ckpt
        return [(ckpt[f"enc.w{i}"], ckpt[f"enc.b{i}"]) for i in range(self.n_layers)]

    def encode(self, x, ckpt=None):
        """Unit-normalized encoder features for a batch of inputs."""
        h = np.asarray(x, dtype=np.float64)
        layers = self._layers(ckpt)
        for w, b in layers[:-1]:
            h = np.tanh(h @ w.T + b)
        w, b = layers[-1]
        z = h @ w.T + b
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        return z / norms

    def logits(self, x, class_ids, ckpt=None):
        head = head_matrix(class_ids, self.embed_dim)
        return self.logit_scale * self.encode(x, ckpt) @ head.T

    def loss_and_grad(self, ckpt, x, y_local, class_ids, init_ckpt=None, l2_init=0.0):
        """Mean cross-entropy over scaled-similarity logits, plus an optional
        l2_init * ||theta - theta_init||^2 penalty; returns (loss, grads)."""
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        head = head_matrix(class_ids, self.embed_dim)
        layers = self._layers(ckpt)

        acts = [x]
        h = x
        for w, b in layers[:-1]:
            h = np.tanh(h @ w.T + b)
            acts.append(h)
        w_out, b_out = layers[-1]
        z = h @ w_out.T + b_out
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        u = z / norms
        logits = self.logit_scale * u @ head.T

        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        p = exp / exp.sum(axis=1, keepdims=True)
        loss = float(-np.mean(shifted[np.arange(n), y_local] - np.log(exp.sum(axis=1))))

        dlogits = p.copy()
        dlogits[np.arange(n), y_local] -= 1.0
        dlogits /= n
        du = self.logit_scale * dlogits @ head
        dz = (du - (du * u).sum(axis=1, keepdims=True) * u) / norms

        grads = {}
        grads[f"enc.w{self.n_layers - 1}"] = dz.T @ h
        grads[f"enc.b{self.n_layers - 1}"] = dz.sum(axis=0)
        da = dz @ w_out
        for i in range(self.n_layers - 2, -1, -1):
            a = acts[i + 1]
            dzi = da * (1.0 - a * a)
            grads[f"enc.w{i}"] = dzi.T @ acts[i]
            grads[f"enc.b{i}"] = dzi.sum(axis=0)
            if i > 0:
                da = dzi @ layers[i][0]

        if l2_init > 0.0 and init_ckpt is not None:
            for name in ckpt.names():
                delta = ckpt[name] - init_ckpt[name]
                loss += float(l2_init * np.sum(delta * delta))
                grads[name] = grads[name] + 2.0 * l2_init * delta
        return loss, grads


def _local_labels(labels, class_ids):
    index = {c: i for i, c in enumerate(class_ids)}
    return np.asarray([index[int(y)] for y in labels], dtype=np.int64)


def finetune(model: ToyModel, task: TaskDataset, config: TrainConfig) -> TrainRecord:
    """AdamW with decoupled weight decay on cross-entropy; linear warmup then
    cosine annealing; optional L2-to-init penalty and EMA shadow weights."""
    rng = np.random.default_rng(config.seed)
    x_all, y_all = task.split_arrays("train")
    y_local = _local_labels(y_all, task.class_ids)

    params = {n: a.astype(np.float64).copy() for n, a in model.ckpt.items()}
    init = Checkpoint(params, model.ckpt.meta)
    m = {n: np.zeros_like(a) for n, a in params.items()}
    v = {n: np.zeros_like(a) for n, a in params.items()}
    ema = {n: a.copy() for n, a in params.items()} if config.ema_decay is not None else None
    b1, b2 = config.betas

    record = TrainRecord(final=init)
    if config.snapshot_every > 0:
        record.snapshots[0] = init
        if ema is not None:
            record.ema_snapshots[0] = init

    for step in range(config.iterations):
        idx = rng.choice(len(y_local), size=min(config.batch_size, len(y_local)), replace=False)
        ckpt = Checkpoint(params, model.ckpt.meta)
        loss, grads = model.loss_and_grad(
            ckpt, x_all[idx], y_local[idx], task.class_ids, init, config.l2_init
        )
        if not math.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}: {loss}")
        record.losses.append(loss)
        lr = lr_schedule(step, config)
        t = step + 1
        for name in params:
            g = grads[name]
            m[name] = b1 * m[name] + (1 - b1) * g
            v[name] = b2 * v[name] + (1 - b2) * g * g
            mhat = m[name] / (1 - b1**t)
            vhat = v[name] / (1 - b2**t)
            params[name] = params[name] - lr * (
                mhat / (np.sqrt(vhat) + config.eps) + config.weight_decay * params[name]
            )
        if ema is not None:
            d = config.ema_decay
            for name in params:
                ema[name] = d * ema[name] + (1 - d) * params[name]
        done = step + 1
        if config.snapshot_every > 0 and (
            done % config.snapshot_every == 0 or done == config.iterations
        ):
            record.snapshots[done] = Checkpoint(params, model.ckpt.meta)
            if ema is not None:
                record.ema_snapshots[done] = Checkpoint(ema, model.ckpt.meta)

    record.final = Checkpoint(params, model.ckpt.meta)
    if config.snapshot_every > 0:
        record.snapshots[config.iterations] = record.final
    return record


def pretrain(config: TrainConfig, base_tasks, in_dim=None) -> ToyModel:
    """Train a freshly initialized encoder on the union of base tasks;
    returns the zero-shot analog model."""
    if not base_tasks:
        raise ValueError("base_tasks must be nonempty")
    merged = merge_tasks(list(base_tasks), name="pretrain")
    in_dim = in_dim or merged.dim
    model = ToyModel.init(
        config.seed, in_dim, config.hidden, config.embed_dim, config.logit_scale
    )
    if config.iterations == 0:
        return model
    record = finetune(model, merged, config)
    return model.with_weights(record.final)


def evaluate(model: ToyModel, task: TaskDataset, split="test", access_log=None) -> float:
    """Fraction of argmax-correct predictions over the task's class set."""
    x, y = task.split_arrays(split)
    if access_log is not None:
        access_log.append((task.name, split))
    logits = model.logits(x, task.class_ids)
    pred = np.asarray(task.class_ids)[np.argmax(logits, axis=1)]
    return float(np.mean(pred == y))


_L2_LADDER = (10.0, 1.0, 0.1, 0.01, 0.001)
_LR_LADDER = (0.0, 0.01, 0.1, 0.3, 1.0)  # factors applied to the configured peak rate


def _ladder_frontier(points):
    n = len(points)
    pts = [FrontierPoint(i / (n - 1), x, y) for i, (x, y) in enumerate(points)]
    return Frontier(pts, "fraction")


def baseline_frontiers(model, task, supported_task, config: TrainConfig):
    """Accuracy trade-off frontiers for the non-interpolation baselines.

    Each frontier's alpha slot carries the baseline's own sweep parameter
    rescaled to [0, 1]; the dict key labels the method.
    """
    if config.snapshot_every <= 0:
        raise ValueError("config must request snapshots (snapshot_every > 0)")

    def accs(ckpt):
        m = model.with_weights(ckpt)
        return evaluate(m, supported_task, "val"), evaluate(m, task, "val")

    out = {}

    record = finetune(model, task, config)
    pts = [
        FrontierPoint(step / config.iterations, *accs(ckpt))
        for step, ckpt in sorted(record.snapshots.items())
    ]
    out["early_stopping"] = Frontier(pts, "fraction")

    out["l2_init"] = _ladder_frontier(
        [accs(finetune(model, task, replace(config, l2_init=lam)).final) for lam in _L2_LADDER]
    )

    out["learning_rate"] = _ladder_frontier(
        [
            accs(finetune(model, task, replace(config, lr=config.lr * f)).final)
            for f in _LR_LADDER
        ]
    )

    ema_cfg = replace(
        config, constant_lr=True, ema_decay=config.ema_decay if config.ema_decay is not None else 0.99
    )
    ema_record = finetune(model, task, ema_cfg)
    pts = [
        FrontierPoint(step / config.iterations, *accs(ckpt))
        for step, ckpt in sorted(ema_record.ema_snapshots.items())
    ]
    out["ema"] = Frontier(pts, "fraction")
    return out
