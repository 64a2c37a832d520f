"""Mixing-coefficient selection: 1-D grid search, uniform search along the
average-of-fine-tuned ray, derivative-free black-box search on the capped
simplex, and exhaustive 2-D search for task pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensors import average, lerp


class SearchObjective:
    """Wraps an evaluate function (CoeffVector -> scalar, higher is better)
    and counts evaluations."""

    def __init__(self, fn):
        self._fn = fn
        self.evaluations = 0

    def __call__(self, coeffs):
        self.evaluations += 1
        return float(self._fn(tuple(float(c) for c in coeffs)))


@dataclass
class SearchResult:
    best: tuple
    best_value: float
    trace: list = field(default_factory=list)

    @property
    def evaluations(self):
        return len(self.trace)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(
                {
                    "best": list(self.best),
                    "best_value": self.best_value,
                    "evaluations": self.evaluations,
                    "trace": [{"coeffs": list(c), "value": v} for c, v in self.trace],
                },
                f,
                indent=2,
            )


def _argmax_smallest(trace):
    # Ties broken by the lexicographically smallest coefficient vector.
    best = None
    for coeffs, value in trace:
        if best is None or value > best[1] or (value == best[1] and coeffs < best[0]):
            best = (coeffs, value)
    return best


def grid_search_1d(obj, grid) -> SearchResult:
    """Evaluate every grid alpha exactly once; argmax, smallest alpha on ties."""
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("empty grid")
    for a in grid:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"grid value out of range: {a}")
    trace = [((a,), obj((a,))) for a in grid]
    best, best_value = _argmax_smallest(trace)
    return SearchResult(best, best_value, trace)


def default_grid(step=0.05):
    n = round(1.0 / step)
    return [round(i * step, 10) for i in range(n + 1)]


def uniform_search_parallel(zs, fts, eval_model, grid) -> SearchResult:
    """Search a single scalar beta interpolating zs toward the average of the
    fine-tuned checkpoints; the result carries per-model coefficients beta/k.

    `eval_model` maps a combined Checkpoint to a scalar score.
    """
    fts = list(fts)
    if not fts:
        raise ValueError("no fine-tuned checkpoints")
    avg = average(fts)
    k = len(fts)

    def objective(coeffs):
        (beta,) = coeffs
        return eval_model(lerp(zs, avg, beta))

    result = grid_search_1d(SearchObjective(objective), grid)
    (beta_star,) = result.best
    trace = [((beta,) , v) for (beta,), v in result.trace]
    return SearchResult(tuple([beta_star / k] * k), result.best_value, trace)


def project_capped_simplex(x):
    """Project onto {a in [0,1]^k : sum(a) <= 1} (Euclidean projection)."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    if x.sum() <= 1.0:
        return x
    # Projection onto the probability simplex (Duchi et al. 2008); the [0,1]
    # box is implied by the simplex constraint.
    u = np.sort(x)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u * np.arange(1, len(x) + 1) > (css - 1.0))[0][-1]
    theta = (css[rho] - 1.0) / (rho + 1.0)
    return np.maximum(x - theta, 0.0)


def black_box_search(obj, k, budget=50, init=0.5, seed=0) -> SearchResult:
    """Derivative-free coordinate pattern search with step halving, box- and
    simplex-constrained, starting from the all-`init` point.

    Performs at most `budget` objective evaluations and returns the best
    point seen. Deterministic for a fixed seed.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    trace = []
    cache = {}

    def evaluate(point):
        key = tuple(round(float(c), 12) for c in point)
        if key in cache:
            return cache[key], False
        if len(trace) >= budget:
            return None, False
        value = obj(key)
        cache[key] = value
        trace.append((key, value))
        return value, True

    current = project_capped_simplex(np.full(k, float(init)))
    current_value, _ = evaluate(current)
    step = 0.25
    while len(trace) < budget and step >= 1e-6:
        improved = False
        order = rng.permutation(k)
        for i in order:
            for sign in (1.0, -1.0):
                candidate = current.copy()
                candidate[i] += sign * step
                candidate = project_capped_simplex(candidate)
                value, fresh = evaluate(candidate)
                if value is None:
                    break
                if fresh and value > current_value:
                    current, current_value = candidate, value
                    improved = True
            if len(trace) >= budget:
                break
        if not improved:
            step /= 2.0
    best, best_value = _argmax_smallest(trace)
    return SearchResult(best, best_value, trace)


def exhaustive_search_2d(obj, grid) -> SearchResult:
    """Evaluate all feasible (a1, a2) grid pairs with a1 + a2 <= 1."""
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("empty grid")
    for a in grid:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"grid value out of range: {a}")
    trace = []
    for a1 in sorted(grid):
        for a2 in sorted(grid):
            if a1 + a2 <= 1.0 + 1e-12:
                point = (a1, a2)
                trace.append((point, obj(point)))
    best, best_value = _argmax_smallest(trace)
    return SearchResult(best, best_value, trace)
