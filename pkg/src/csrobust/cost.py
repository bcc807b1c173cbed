"""Cost matrices, their target sets, task generators and cost-aware metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .numcore import Rng

__all__ = [
    "CostMatrix",
    "TargetSets",
    "UndefinedMetricError",
    "make_task",
    "target_sets",
    "cs_robust_error",
    "robust_cost",
    "overall_robust_error",
    "misclassification_cost",
    "parse_cost_matrix",
    "TASK_KINDS",
]

# CIFAR10 label order: plane car bird cat deer dog frog horse ship truck
CIFAR_VEHICLES = (0, 1, 8, 9)


class UndefinedMetricError(ValueError):
    """The metric has an empty denominator (no example has a costed target)."""


class CostMatrix:
    """Square nonnegative matrix with zero diagonal; ``C[j, k]`` is the harm of j -> k."""

    def __init__(self, entries):
        C = np.array(entries, dtype=np.float64)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError(f"cost matrix must be square, got shape {C.shape}")
        if not np.all(np.isfinite(C)):
            raise ValueError("cost matrix has non-finite entries")
        if np.any(C < 0):
            raise ValueError("cost matrix has negative entries")
        if np.any(np.diag(C) != 0):
            raise ValueError("cost matrix has a nonzero diagonal")
        C.setflags(write=False)
        self.C = C

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.C == 0) | (self.C == 1)))

    @property
    def sparsity(self) -> tuple[int, int]:
        """(nonzero count, number of off-diagonal cells)."""
        return int(np.count_nonzero(self.C)), self.m * self.m - self.m

    def omega(self, j: int) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(self.C[j]))

    @property
    def delta(self) -> np.ndarray:
        return np.any(self.C != 0, axis=1)

    def scaled(self, factor: float) -> "CostMatrix":
        return CostMatrix(self.C * factor)

    def __eq__(self, other):
        return isinstance(other, CostMatrix) and np.array_equal(self.C, other.C)

    def __repr__(self):
        n, total = self.sparsity
        return f"CostMatrix(m={self.m}, nonzero={n}/{total})"

    def to_csv(self, path, header=False):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if header:
                w.writerow([str(j) for j in range(self.m)])
            for row in self.C:
                w.writerow([repr(float(v)) for v in row])


def parse_cost_matrix(path) -> CostMatrix:
    """Read an m x m CSV of nonnegative decimals with an optional header row."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path}: empty cost matrix file")
    try:
        [float(c) for c in rows[0]]
        # a numeric header (class indices) shows up as one row too many
        if len(rows) == len(rows[0]) + 1:
            rows = rows[1:]
    except ValueError:
        rows = rows[1:]
    try:
        C = [[float(c) for c in r] for r in rows]
    except ValueError as exc:
        raise ValueError(f"{path}: cannot parse cost matrix: {exc}") from exc
    if any(len(r) != len(C) for r in C):
        raise ValueError(f"{path}: cost matrix is not square")
    return CostMatrix(C)


TASK_KINDS = (
    "single-pair", "single-seed", "single-target", "multiple", "seeds", "random-pairs",
    "top-pairs", "cross-group", "small-large", "large-small", "small-large-b", "group-real",
)


def make_task(kind: str, m: int, **params) -> CostMatrix:
    """Build the cost matrix for one of the experiment task families.

    ``single-pair(s, t)``, ``single-seed(s)``, ``single-target(t)``,
    ``multiple(pairs=[(s, t), ...])``, ``seeds(seeds=[...])`` (every target
    for each listed seed, e.g. odd digits), ``random-pairs(n, rng)``,
    ``top-pairs(grid, n)`` (the n most vulnerable cells of a pairwise robust
    error grid), ``cross-group(sources, targets)``; real-valued
    ``small-large``, ``large-small``, ``small-large-b`` (0.1 below the
    diagonal) and ``group-real(group, inside, outside)``.
    """
    C = np.zeros((m, m))

    def cls(v):
        v = int(v)
        if not 0 <= v < m:
            raise ValueError(f"class index {v} out of range for m={m}")
        return v

    i, j = np.indices((m, m))
    if kind == "single-pair":
        s, t = cls(params["s"]), cls(params["t"])
        if s == t:
            raise ValueError("seed and target must differ")
        C[s, t] = 1
    elif kind == "single-seed":
        C[cls(params["s"]), :] = 1
    elif kind == "single-target":
        C[:, cls(params["t"])] = 1
    elif kind == "multiple":
        for s, t in params["pairs"]:
            C[cls(s), cls(t)] = 1
        for s in params.get("seeds", ()):
            C[cls(s), :] = 1
    elif kind == "seeds":
        for s in params["seeds"]:
            C[cls(s), :] = 1
    elif kind == "random-pairs":
        rng: Rng = params["rng"]
        cells = [(a, b) for a in range(m) for b in range(m) if a != b]
        pick = rng.choice(len(cells), size=int(params.get("n", 10)), replace=False)
        for p in pick:
            C[cells[p]] = 1
    elif kind == "top-pairs":
        grid = np.array(params["grid"], dtype=np.float64)
        grid = np.where(np.eye(m, dtype=bool) | np.isnan(grid), -np.inf, grid)
        # stable sort: ties resolved by row-major position
        order = np.argsort(-grid, axis=None, kind="stable")[: int(params.get("n", 10))]
        C.flat[order] = 1
    elif kind == "cross-group":
        for s in params["sources"]:
            for t in params["targets"]:
                C[cls(s), cls(t)] = 1
    elif kind == "small-large":
        C = np.where(j > i, (i - j) ** 2, 0).astype(np.float64)
    elif kind == "large-small":
        C = np.where(i > j, (i - j) ** 2, 0).astype(np.float64)
    elif kind == "small-large-b":
        C = np.where(j > i, (i - j) ** 2, np.where(i > j, 0.1, 0.0)).astype(np.float64)
    elif kind == "group-real":
        group = [cls(g) for g in params.get("group", CIFAR_VEHICLES)]
        inside, outside = float(params.get("inside", 1.0)), float(params.get("outside", 10.0))
        for s in group:
            C[s, :] = outside
            C[s, group] = inside
    else:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {TASK_KINDS}")
    np.fill_diagonal(C, 0.0)
    return CostMatrix(C)


@dataclass
class TargetSets:
    omega: list  # per class: tuple of costed targets
    delta: np.ndarray  # per class: has at least one costed target
    counts: np.ndarray  # per class: number of examples

    @property
    def n_candidates(self) -> int:
        return int(self.counts[self.delta].sum())


def target_sets(C: CostMatrix, labels) -> TargetSets:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= C.m):
        raise ValueError("labels out of range for the cost matrix")
    counts = np.bincount(labels, minlength=C.m)
    return TargetSets([C.omega(j) for j in range(C.m)], C.delta.copy(), counts)


def _candidate_failures(records, C: CostMatrix):
    """Yield (label, list of failed costed targets) for each candidate record."""
    delta = C.delta
    for rec in records:
        y = rec.label
        if not delta[y]:
            continue
        failed = []
        for t in C.omega(y):
            if t not in rec.bounds:
                raise ValueError(f"record {rec.example_id} lacks a bound for target {t}")
            if not rec.bounds[t] >= 0:
                failed.append(t)
        yield y, failed


def cs_robust_error(records, C: CostMatrix) -> float:
    """Fraction of candidate examples not certified against every costed target."""
    n = bad = 0
    for _, failed in _candidate_failures(records, C):
        n += 1
        bad += bool(failed)
    if n == 0:
        raise UndefinedMetricError("no candidate seed examples for this cost matrix")
    return bad / n


def robust_cost(records, C: CostMatrix) -> float:
    """Average over candidate examples of the summed cost of uncertified targets.

    Sums are correctly rounded, so the value does not depend on record order.
    """
    n, costs = 0, []
    for y, failed in _candidate_failures(records, C):
        n += 1
        costs.extend(float(C.C[y, t]) for t in failed)
    if n == 0:
        raise UndefinedMetricError("no candidate seed examples for this cost matrix")
    return math.fsum(costs) / n


def overall_robust_error(records) -> float:
    """Fraction of records with any negative bound."""
    records = list(records)
    if not records:
        raise UndefinedMetricError("no records")
    return sum(not r.certified for r in records) / len(records)


def misclassification_cost(predictions, labels, C: CostMatrix) -> float:
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if labels.size == 0:
        raise UndefinedMetricError("no examples")
    return math.fsum(C.C[labels, predictions].tolist()) / labels.size
