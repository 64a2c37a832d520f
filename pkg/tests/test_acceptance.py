"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Criterion 7 bounds were frozen from the first passing run (pinned seed 0):
zero-shot supported accuracy 1.00, zero-shot patching accuracy 0.30,
selected alpha 0.15, patched test accuracies (supported 1.00, patching 0.90);
sequential patching combined test accuracy 0.9167 vs 0.7188 for sequential
fine-tuning without interpolation.
"""

import contextlib
import os
import struct
import sys
import time

import numpy as np
import pytest

from paintkit import (
    Checkpoint,
    FormatError,
    Frontier,
    PatchSpec,
    SearchObjective,
    TrainConfig,
    ToyModel,
    average,
    black_box_search,
    cka,
    combined_accuracy,
    default_grid,
    distance_to_endpoints,
    distance_to_optimal,
    evaluate,
    exhaustive_search_2d,
    finetune,
    generate_tasks,
    grid_search_1d,
    lerp,
    load_checkpoint,
    multi_combine,
    patch_parallel,
    patch_sequential,
    patch_single,
    path_correction_cost,
    pretrain,
    reconstruct,
    save_checkpoint,
    split_task,
)
from paintkit.tensors import MAGIC
from paintkit.toylab import _local_labels

import conftest
from conftest import DATA_DIR, random_checkpoint

MNIST_FIXTURE = os.path.join(DATA_DIR, "vit_l14_mnist_frontier.csv")


def _emit(line):
    conftest.ACCEPTANCE_LINES.append(line)
    print(line, file=sys.stdout, flush=True)


@contextlib.contextmanager
def criterion(number, label, budget_s):
    start = time.monotonic()
    try:
        yield
    except BaseException:
        _emit(f"[FAIL] criterion {number}: {label}")
        raise
    elapsed = time.monotonic() - start
    if elapsed >= budget_s:
        _emit(f"[FAIL] criterion {number}: {label} "
              f"(over time budget: {elapsed:.1f}s >= {budget_s}s)")
        pytest.fail(f"criterion {number} exceeded {budget_s}s ({elapsed:.1f}s)")
    _emit(f"[PASS] criterion {number}: {label} ({elapsed:.1f}s)")


def random_pair(rng, **kw):
    a = random_checkpoint(rng, **kw)
    b = Checkpoint({n: rng.standard_normal(t.shape) for n, t in a.items()})
    return a, b


def test_criterion_1_checkpoint_roundtrip(tmp_path):
    with criterion(1, "checkpoint round-trip and malformed-file handling", 10):
        rng = np.random.default_rng(0)
        path = tmp_path / "rt.ckpt"
        for i in range(200):
            dtype = np.float32 if i % 2 else np.float64
            ckpt = random_checkpoint(rng, n_tensors=int(rng.integers(1, 6)),
                                     dtype=dtype)
            save_checkpoint(ckpt, path)
            loaded = load_checkpoint(path)
            assert loaded.equal(ckpt)
            assert loaded.meta == ckpt.meta

        bad_magic = tmp_path / "magic.ckpt"
        bad_magic.write_bytes(b"WRONGMAG" + b"\x00" * 16)
        with pytest.raises(FormatError):
            load_checkpoint(bad_magic)

        good = random_checkpoint(rng)
        save_checkpoint(good, path)
        truncated = tmp_path / "trunc.ckpt"
        truncated.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_checkpoint(truncated)

        mismatched = tmp_path / "mismatch.ckpt"
        mismatched.write_bytes(path.read_bytes() + b"\x00" * 16)
        with pytest.raises(FormatError):
            load_checkpoint(mismatched)

        bad_version = tmp_path / "version.ckpt"
        bad_version.write_bytes(MAGIC + struct.pack("<II", 7, 0) + struct.pack("<I", 0))
        with pytest.raises(FormatError):
            load_checkpoint(bad_version)


def test_criterion_2_interpolation_identities():
    with criterion(2, "interpolation identities", 5):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = random_pair(rng)
            assert lerp(a, b, 0.0).equal(a.with_meta({}))
            assert lerp(a, b, 1.0).equal(b.with_meta({}))
            alpha = float(rng.uniform(0, 1))
            gap = np.abs(lerp(a, b, alpha).flat() - lerp(b, a, 1 - alpha).flat())
            assert gap.max() < 1e-12
            k = int(rng.integers(1, 5))
            fts = [Checkpoint({n: rng.standard_normal(t.shape)
                               for n, t in a.items()}) for _ in range(k)]
            beta = float(rng.uniform(0, 1))
            combo = multi_combine(a, fts, [beta / k] * k)
            ref = lerp(a, average(fts), beta)
            assert np.abs(combo.flat() - ref.flat()).max() < 1e-10


def test_criterion_3_table_fixtures():
    with criterion(3, "published-benchmark fixtures", 10):
        patching = [59.6, 44.1, 45.9, 32.4, 22.6, 48.3, 60.7, 63.1, 31.5]
        assert combined_accuracy([63.4], patching) == pytest.approx(54.4, abs=0.05)

        f = Frontier.from_csv(MNIST_FIXTURE, unit="percent")
        assert len(f.points) == 21
        xs = np.array([p.supported_acc for p in f.points])
        ys = np.array([p.patching_acc for p in f.points])
        combined = (xs + ys) / 2.0
        oracle_end = (xs[0] + ys[-1]) / 2.0 - combined.max()
        oracle_opt = (xs.max() + ys.max()) / 2.0 - combined.max()
        assert distance_to_endpoints(f) == pytest.approx(oracle_end, abs=1e-9)
        assert distance_to_optimal(f) == pytest.approx(oracle_opt, abs=1e-9)
        assert distance_to_endpoints(f) == pytest.approx(0.15, abs=1e-9)
        assert distance_to_optimal(f) == pytest.approx(0.20, abs=1e-9)

        table = {p.alpha: (p.supported_acc + p.patching_acc) / 2 for p in f.points}
        result = grid_search_1d(SearchObjective(lambda c: table[c[0]]),
                                sorted(table))
        assert result.best == (0.30,)


def _segment_distance(p, a, b):
    """Euclidean distance from point p to segment ab."""
    p, a, b = (np.asarray(v, float) for v in (p, a, b))
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def _oracle_path_cost(f):
    """Distance to the ideal set via generic point-to-segment geometry."""
    x0 = f.points[0].supported_acc
    y1 = f.points[-1].patching_acc
    lo, hi = -10.0, 10.0
    costs = []
    for p in f.points:
        if p.supported_acc < x0 and p.patching_acc < y1:
            pt = (p.supported_acc, p.patching_acc)
            costs.append(min(
                _segment_distance(pt, (x0, lo), (x0, hi)),
                _segment_distance(pt, (lo, y1), (hi, y1)),
            ))
        else:
            costs.append(0.0)
    return float(np.mean(costs))


def _oracle_cka(a, b):
    """Elementwise double-sum evaluation of linear CKA."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    num = sum(float(np.dot(b[:, i], a[:, j])) ** 2
              for i in range(b.shape[1]) for j in range(a.shape[1]))
    den_a = np.sqrt(sum(float(np.dot(a[:, i], a[:, j])) ** 2
                        for i in range(a.shape[1]) for j in range(a.shape[1])))
    den_b = np.sqrt(sum(float(np.dot(b[:, i], b[:, j])) ** 2
                        for i in range(b.shape[1]) for j in range(b.shape[1])))
    return num / (den_a * den_b)


def test_criterion_4_metric_oracles():
    with criterion(4, "path-cost and CKA oracles", 30):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(5, 15))
            alphas = np.unique(np.concatenate([[0.0, 1.0], rng.uniform(0, 1, n)]))
            from paintkit import FrontierPoint
            f = Frontier([FrontierPoint(a, float(rng.uniform(0, 1)),
                                        float(rng.uniform(0, 1)))
                          for a in alphas], "fraction")
            assert path_correction_cost(f) == pytest.approx(
                _oracle_path_cost(f), abs=1e-6)

        for _ in range(50):
            n = int(rng.integers(4, 20))
            a = rng.standard_normal((n, int(rng.integers(2, 8))))
            b = rng.standard_normal((n, int(rng.integers(2, 8))))
            assert cka(a, b) == pytest.approx(_oracle_cka(a, b), abs=1e-9)

        a = rng.standard_normal((25, 6))
        assert cka(a, a) == pytest.approx(1.0, abs=1e-9)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        assert cka(a, a @ q) == pytest.approx(1.0, abs=1e-9)
        assert cka(a, 4.2 * a) == pytest.approx(1.0, abs=1e-9)


def test_criterion_5_gradient_check():
    with criterion(5, "analytic gradients vs finite differences", 30):
        rng = np.random.default_rng(3)
        h = 1e-5
        for _ in range(20):
            dim = int(rng.integers(3, 7))
            n_classes = int(rng.integers(2, 5))
            tasks = generate_tasks(
                int(rng.integers(1 << 20)), n_classes, dim, 10, 0.5,
                [list(range(n_classes))])
            task = tasks[0]
            model = ToyModel.init(int(rng.integers(1 << 20)), dim,
                                  (int(rng.integers(3, 8)),),
                                  int(rng.integers(3, 7)))
            x, y = task.split_arrays("train")
            x, y = x[:6], y[:6]
            y_local = _local_labels(y, task.class_ids)
            _, grads = model.loss_and_grad(model.ckpt, x, y_local, task.class_ids)
            for name in model.ckpt.names():
                g = grads[name]
                flat = g.reshape(-1)
                for idx in rng.choice(flat.size, size=min(3, flat.size),
                                      replace=False):
                    tensors = {n: t.copy() for n, t in model.ckpt.items()}
                    pert = tensors[name].reshape(-1)
                    pert[idx] += h
                    lp, _ = model.loss_and_grad(
                        Checkpoint(tensors, model.ckpt.meta), x, y_local,
                        task.class_ids)
                    pert[idx] -= 2 * h
                    lm, _ = model.loss_and_grad(
                        Checkpoint(tensors, model.ckpt.meta), x, y_local,
                        task.class_ids)
                    fd = (lp - lm) / (2 * h)
                    diff = abs(fd - flat[idx])
                    if diff >= 1e-8:  # below this, fd is dominated by rounding
                        denom = max(abs(fd), abs(flat[idx]))
                        assert diff / denom < 1e-4


def test_criterion_6_search_contracts():
    with criterion(6, "search contracts", 10):
        table = np.random.default_rng(4).uniform(0, 1, 21)
        grid = default_grid()
        lookup = dict(zip(grid, table))
        obj = SearchObjective(lambda c: lookup[c[0]])
        result = grid_search_1d(obj, grid)
        assert obj.evaluations == len(grid)
        best_idx = int(np.argmax(table))
        assert result.best == (grid[best_idx],)
        assert result.best_value == table[best_idx]

        def pinned(c):
            return -((c[0] - 0.3) ** 2) - (c[1] - 0.65) ** 2

        visited = []

        def tracked(c):
            visited.append(c)
            return pinned(c)

        obj = SearchObjective(tracked)
        result = black_box_search(obj, k=2, budget=50, init=0.5, seed=0)
        fine = [i * 0.01 for i in range(101)]
        oracle = exhaustive_search_2d(SearchObjective(pinned), fine)
        assert result.best_value >= oracle.best_value - 1e-2
        assert obj.evaluations <= 50
        for c in visited:
            assert all(0.0 <= v <= 1.0 for v in c)
            assert sum(c) <= 1.0 + 1e-9


# -- criterion 7: frozen regression bounds from the first passing run --------
C7_ZS_SUPPORTED_MIN = 0.95      # observed 1.00
C7_ZS_PATCHING_MAX = 0.50       # observed 0.30
C7_ALPHA_STAR = 0.15            # observed, deterministic
C7_TEST_SUPPORTED_MIN = 0.98    # observed 1.00
C7_TEST_PATCHING_MIN = 0.85     # observed 0.90
C7_SEQ_COMBINED_MIN = 0.88      # observed 0.9167
C7_FT_COMBINED_MAX = 0.80       # observed 0.7188


def _train_cfg(iters, warmup):
    return TrainConfig(iterations=iters, batch_size=64, lr=1e-2, warmup=warmup,
                       hidden=(32, 32), embed_dim=16, seed=0)


def test_criterion_7_core_phenomenon():
    with criterion(7, "core patching phenomenon at toy scale", 300):
        tasks = generate_tasks(0, 25, 16, 20, 0.5,
                               [list(range(20)), list(range(20, 25))])
        base, patch = tasks
        model = pretrain(_train_cfg(300, 20), [base])
        spec = PatchSpec(
            model=model, patching_tasks=[patch], supported_tasks=[base],
            strategy="single", alpha_grid=[i / 20 for i in range(21)],
            train=_train_cfg(200, 10),
        )
        result = patch_single(spec)
        f = result.frontier
        zs_sup = f.points[0].supported_acc
        ft_pat = f.points[-1].patching_acc
        assert zs_sup >= C7_ZS_SUPPORTED_MIN
        assert f.points[0].patching_acc <= C7_ZS_PATCHING_MAX
        qualifying = [p for p in f.points
                      if p.supported_acc >= zs_sup - 0.02
                      and p.patching_acc >= ft_pat - 0.05]
        assert qualifying, "no alpha preserves supported while patching"
        assert result.coefficients == (C7_ALPHA_STAR,)
        assert result.test_accuracies[base.name] >= C7_TEST_SUPPORTED_MIN
        assert result.test_accuracies[patch.name] >= C7_TEST_PATCHING_MIN

        tasks3 = generate_tasks(0, 14, 16, 20, 0.5,
                                [list(range(8)), (8, 9), (10, 11), (12, 13)])
        base3, p1, p2, p3 = tasks3
        model3 = pretrain(_train_cfg(300, 20), [base3])
        seq = patch_sequential(PatchSpec(
            model=model3, patching_tasks=[p1, p2, p3], supported_tasks=[base3],
            strategy="sequential", alpha_grid=[i / 20 for i in range(21)],
            order_seeds=(0,), train=_train_cfg(200, 10),
        ))

        def combined(accs):
            sup = accs[base3.name]
            pat = np.mean([accs[t.name] for t in (p1, p2, p3)])
            return (sup + pat) / 2.0

        seq_combined = combined(seq.test_accuracies)

        current = model3
        for t in (p1, p2, p3):
            current = current.with_weights(
                finetune(current, t, _train_cfg(200, 10)).final)
        ft_accs = {t.name: evaluate(current, t, "test")
                   for t in (base3, p1, p2, p3)}
        ft_combined = combined(ft_accs)

        assert seq_combined >= ft_combined
        assert seq_combined >= C7_SEQ_COMBINED_MIN
        assert ft_combined <= C7_FT_COMBINED_MAX


def test_criterion_8_hygiene_and_reconstruction():
    with criterion(8, "selection hygiene, reconstruction, split invariants", 60):
        tasks = generate_tasks(0, 10, 8, 20, 0.3,
                               [list(range(4)), (4, 5), (6, 7), (8, 9)])
        cfg = TrainConfig(iterations=80, batch_size=32, lr=1e-2, warmup=5,
                          hidden=(16,), embed_dim=8, seed=0)
        model = pretrain(cfg, [tasks[0]])
        grid = [i / 10 for i in range(11)]

        results = [
            patch_single(PatchSpec(model=model, patching_tasks=[tasks[1]],
                                   supported_tasks=[tasks[0]], strategy="single",
                                   alpha_grid=grid, train=cfg)),
            patch_sequential(PatchSpec(model=model,
                                       patching_tasks=[tasks[1], tasks[2]],
                                       supported_tasks=[tasks[0]],
                                       strategy="sequential", alpha_grid=grid,
                                       order_seeds=(0,), train=cfg)),
            patch_parallel(PatchSpec(model=model,
                                     patching_tasks=[tasks[1], tasks[2], tasks[3]],
                                     supported_tasks=[tasks[0]],
                                     strategy="parallel", search="uniform",
                                     alpha_grid=grid, train=cfg)),
        ]
        for result in results:
            splits = {split for _, split in result.access_log["selection"]}
            assert splits == {"val"}, f"selection touched {splits}"
            assert {s for _, s in result.access_log["report"]} == {"test"}
            rebuilt = reconstruct(result)
            assert np.array_equal(rebuilt.flat(), result.patched.flat())
            for name in result.patched.names():
                assert rebuilt[name].tobytes() == result.patched[name].tobytes()

        source = generate_tasks(1, 12, 6, 20, 0.3, [list(range(12))])[0]
        for seed in range(100):
            proto = split_task(source, seed)
            a = set(proto.task_a.class_ids)
            b = set(proto.task_b.class_ids)
            assert a.isdisjoint(b)
            assert a | b == set(source.class_ids)
            assert abs(len(a) - len(b)) <= 1
            n = len(proto.task_a.labels) + len(proto.task_b.labels)
            assert n == len(source.labels)
