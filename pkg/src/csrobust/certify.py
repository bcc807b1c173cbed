"""Certified lower bounds on output margins under l-infinity perturbations.

The adversarial set ``{x + d : ||d||_inf <= eps}`` is pushed through the
network with every unstable ReLU (lower bound < 0 < upper bound) replaced by
its triangle relaxation. A lower bound on ``c . f(x + d)`` then comes from a
single backward pass through a "dual" copy of the network:

    nu_K       = -c
    nuhat_k    = W_k^T nu_{k+1}
    nu_k       = D_k nuhat_k                      (hidden layers only)
    J = - sum_k nu_{k+1} . b_k - x . nuhat_1 - eps ||nuhat_1||_1
        + sum_{k>=2} sum_{j unstable} l_kj [nu_kj]_+

where ``D_k`` holds the relaxation slopes (0 inactive, 1 active,
``u / (u - l)`` unstable). The same pass run with ``c = +-e_j`` on the network
truncated at layer ``k`` produces the pre-activation bounds of layer ``k``.

Everything below is written against :mod:`csrobust.numcore` ops, so it runs on
plain arrays for certification and on tape variables for training. Arrays are
batched: inputs are ``(B, d)``, objectives ``(B, O, m)``, bounds ``(B, n)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .model import Network, forward, pairs, predict
from .numcore import NumericalError, Rng, absolute, l1norm, note_branch, relu, total, value_of, where

__all__ = [
    "PreactBounds",
    "NeuronPartition",
    "CertificationRecord",
    "PairGrid",
    "input_box",
    "compute_bounds",
    "dual_bound",
    "margin_matrix",
    "certify_example",
    "certify_dataset",
    "pairwise_grid",
    "attack_oracle",
    "perturbation_samples",
    "sampled_objective_min",
    "write_records_jsonl",
]


@dataclass
class NeuronPartition:
    inactive: np.ndarray  # u <= 0
    active: np.ndarray  # l >= 0 (and not inactive)
    unstable: np.ndarray  # l < 0 < u
    slopes: np.ndarray


def partition(lower, upper) -> NeuronPartition:
    """Split neurons by the sign pattern of their bounds.

    ``l == u == 0`` counts as inactive so the slope is 0, matching relu'(0) = 0.
    """
    lo, up = value_of(lower), value_of(upper)
    inactive = up <= 0
    active = (lo >= 0) & ~inactive
    unstable = (lo < 0) & (up > 0)
    slopes = np.where(unstable, up / np.where(unstable, up - lo, 1.0), active.astype(np.float64))
    return NeuronPartition(inactive, active, unstable, slopes)


@dataclass
class PreactBounds:
    """Elementwise bounds on each hidden layer's ReLU input."""

    lower: list
    upper: list

    def partitions(self) -> list[NeuronPartition]:
        return [partition(lo, up) for lo, up in zip(self.lower, self.upper)]


def input_box(X, eps, clip=False):
    """Center and radius of the perturbation box, optionally intersected with [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if not clip:
        return X, float(eps)
    lo, hi = np.clip(X - eps, 0.0, 1.0), np.clip(X + eps, 0.0, 1.0)
    return (lo + hi) / 2, (hi - lo) / 2


def _slopes(lo, up):
    lov, upv = value_of(lo), value_of(up)
    inactive = upv <= 0
    active = (lov >= 0) & ~inactive
    unstable = (lov < 0) & (upv > 0)
    note_branch(lo, active)
    note_branch(lo, unstable)
    note_branch(lo, inactive)
    ratio = up / where(unstable, up - lo, 1.0)
    return where(unstable, ratio, active.astype(np.float64)), unstable


def _dual_parts(layers, bounds, center, radius, nu_top, both_signs=False):
    """Backward pass through the dual network for objectives ``-nu_top``.

    Returns ``(lin, l1, relax_pos, relax_neg)`` with shapes ``(B, O)``:
    ``lin = -sum nu.b - center.nuhat_1``, ``l1 = ||radius * nuhat_1||_1`` and
    ``relax_pos = sum l [nu]_+`` over unstable neurons. ``relax_neg`` uses
    ``[-nu]_+`` and is only computed when ``both_signs``.
    """
    nu = nu_top
    W, b = layers[-1]
    lin = -total(nu * b, axis=-1)
    relax_pos = relax_neg = 0.0
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        nu_hat = nu @ W
        if k == 0:
            break
        lo, up = bounds[k - 1]
        d, unstable = _slopes(lo, up)
        nu = nu_hat * _expand(d)
        gate = _expand(lo * unstable.astype(np.float64))
        relax_pos = relax_pos + total(relu(nu) * gate, axis=-1)
        if both_signs:
            relax_neg = relax_neg + total(relu(-nu) * gate, axis=-1)
        lin = lin - total(nu * layers[k - 1][1], axis=-1)
    lin = lin - _batched_dot(nu_hat, center)
    if np.ndim(radius) == 0:
        l1 = radius * l1norm(nu_hat, axis=-1)
    else:
        l1 = _batched_dot(absolute(nu_hat), radius)
    return lin, l1, relax_pos, relax_neg


def _expand(v):
    # (B, n) -> (B, 1, n)
    return v[:, None, :]


def _batched_dot(nu_hat, vec):
    # (B|1, O, d) . (B, d) -> (B, O)
    vec = np.asarray(vec, dtype=np.float64)
    return (nu_hat @ vec[:, :, None])[:, :, 0]


def bounds_from_params(params, center, radius, method="matrix"):
    """Pre-activation bounds for every hidden layer, as ``[(lower, upper), ...]``."""
    layers = pairs(params)
    if len(layers) == 1:
        return []
    W1, b1 = layers[0]
    zhat = center @ W1.T + b1
    if np.ndim(radius) == 0:
        rad = radius * total(absolute(W1), axis=1)
    else:
        rad = radius @ absolute(W1).T
    bounds = [(zhat - rad, zhat + rad)]
    for k in range(1, len(layers) - 1):
        n = value_of(layers[k][0]).shape[0]
        if method == "matrix":
            # c = e_j for every neuron at once; c = -e_j reuses the same pass
            nu_top = -np.eye(n)[None]
            lin, l1, rp, rn = _dual_parts(layers[:k + 1], bounds, center, radius, nu_top, both_signs=True)
            bounds.append((lin - l1 + rp, lin + l1 - rn))
        elif method == "naive":
            bounds.append(_naive_layer_bounds(layers[:k + 1], bounds, center, radius, n))
        else:
            raise ValueError(f"unknown bound method {method!r}")
    for lo, up in bounds:
        if not (np.all(np.isfinite(value_of(lo))) and np.all(np.isfinite(value_of(up)))):
            raise NumericalError("non-finite pre-activation bound")
    return bounds


def _naive_layer_bounds(layers, bounds, center, radius, n):
    B = np.shape(center)[0]
    lower, upper = np.zeros((B, n)), np.zeros((B, n))
    for j in range(n):
        e = np.zeros((1, 1, n))
        e[0, 0, j] = 1.0
        lin, l1, rp, _ = _dual_parts(layers, bounds, center, radius, -e)
        lower[:, j] = value_of(lin - l1 + rp)[:, 0]
        lin, l1, rp, _ = _dual_parts(layers, bounds, center, radius, e)
        upper[:, j] = -value_of(lin - l1 + rp)[:, 0]
    return lower, upper


def objective_bound(params, bounds, center, radius, c):
    """Lower bound ``J`` on ``c . f(x + d)``; ``c`` has shape ``(B|1, O, m)``."""
    lin, l1, rp, _ = _dual_parts(pairs(params), bounds, center, radius, -np.asarray(c, dtype=np.float64))
    return lin - l1 + rp


def margin_objectives(y, m):
    """Objectives ``e_y - e_j`` for every class ``j``: shape ``(B, m, m)``."""
    y = np.asarray(y)
    onehot = np.eye(m)[y]
    return onehot[:, None, :] - np.eye(m)[None]


def margin_bounds(params, X, y, eps, clip=False):
    """``J[i, j]`` bounds ``f_{y_i} - f_j`` from below over the eps-ball; ``J[i, y_i] = 0``."""
    center, radius = input_box(X, eps, clip)
    bounds = bounds_from_params(params, center, radius)
    m = value_of(pairs(params)[-1][0]).shape[0]
    return objective_bound(params, bounds, center, radius, margin_objectives(y, m))


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def compute_bounds(net: Network, x, eps, clip=False, method="matrix") -> PreactBounds:
    X, single = _as_batch(x)
    if X.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs of length {net.input_dim}")
    center, radius = input_box(X, eps, clip)
    bounds = bounds_from_params(net.params(), center, radius, method=method)
    lower = [lo[0] if single else lo for lo, _ in bounds]
    upper = [up[0] if single else up for _, up in bounds]
    return PreactBounds(lower, upper)


def dual_bound(net: Network, bounds: PreactBounds, x, eps, c, clip=False):
    """Certified lower bound on ``c . f(x + d)`` for all ``||d||_inf <= eps``.

    ``x`` may be one input or a batch; ``c`` may be one objective ``(m,)``,
    several ``(O, m)`` or per-example ``(B, O, m)``.
    """
    X, single = _as_batch(x)
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != net.n_classes:
        raise ValueError(f"objective length {c.shape[-1]} != {net.n_classes} classes")
    lower = [np.atleast_2d(lo) for lo in bounds.lower]
    upper = [np.atleast_2d(up) for up in bounds.upper]
    if len(lower) != net.K - 2 or any(lo.shape != (X.shape[0], n) for lo, n in zip(lower, net.sizes[1:-1])):
        raise ValueError("bounds do not match this network and input batch")
    c3 = c.reshape((1,) * (3 - c.ndim) + c.shape)
    center, radius = input_box(X, eps, clip)
    J = objective_bound(net.params(), list(zip(lower, upper)), center, radius, c3)
    if not np.all(np.isfinite(J)):
        raise NumericalError("non-finite dual bound")
    if c.ndim == 1:
        J = J[:, 0]
    return J[0] if single else J


def margin_matrix(net: Network, X, y, eps, clip=False, batch_size=256):
    """Margin bounds ``J[i, j]`` for all examples and classes, computed in chunks."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    out = np.zeros((len(X), net.n_classes))
    params = net.params()
    for s in range(0, len(X), batch_size):
        out[s:s + batch_size] = margin_bounds(params, X[s:s + batch_size], y[s:s + batch_size], eps, clip)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite dual bound")
    return out


@dataclass
class CertificationRecord:
    example_id: int
    label: int
    bounds: dict = field(default_factory=dict)  # target class -> J

    @property
    def verdicts(self) -> dict:
        return {t: bool(J >= 0) for t, J in self.bounds.items()}

    @property
    def certified(self) -> bool:
        return all(J >= 0 for J in self.bounds.values())

    def to_dict(self) -> dict:
        return {
            "id": int(self.example_id),
            "label": int(self.label),
            "bounds": {str(t): float(J) for t, J in sorted(self.bounds.items())},
            "certified": self.certified,
        }


def certify_example(net: Network, x, y: int, eps, targets: Iterable[int], clip=False, example_id=0):
    targets = sorted(set(int(t) for t in targets))
    if not 0 <= y < net.n_classes or any(not 0 <= t < net.n_classes or t == y for t in targets):
        raise ValueError("targets must be valid classes other than the label")
    record = CertificationRecord(example_id, int(y))
    if not targets:
        return record
    bounds = compute_bounds(net, x, eps, clip)
    c = np.zeros((len(targets), net.n_classes))
    c[:, y] = 1.0
    c[np.arange(len(targets)), targets] -= 1.0
    J = dual_bound(net, bounds, x, eps, c, clip)
    record.bounds = {t: float(v) for t, v in zip(targets, J)}
    return record


def certify_dataset(net: Network, X, y, eps, clip=False, targets=None, batch_size=256):
    """One record per example, against ``targets[label]`` (default: every other class)."""
    J = margin_matrix(net, X, y, eps, clip, batch_size)
    records = []
    for i, (row, label) in enumerate(zip(J, np.asarray(y))):
        label = int(label)
        ts = range(net.n_classes) if targets is None else targets[label]
        records.append(CertificationRecord(i, label, {int(t): float(row[t]) for t in ts if t != label}))
    return records


def write_records_jsonl(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


@dataclass
class PairGrid:
    """Entry (i, j): fraction of class-i examples not certified against target j.

    Rows for classes absent from the data are NaN; the diagonal is 0.
    """

    matrix: np.ndarray
    counts: np.ndarray

    def to_csv(self, path):
        m = len(self.matrix)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed\\target"] + [str(j) for j in range(m)])
            for i in range(m):
                w.writerow([str(i)] + ["" if np.isnan(v) else f"{v:.6f}" for v in self.matrix[i]])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        mat = np.array([[np.nan if v == "" else float(v) for v in row[1:]] for row in rows])
        return cls(mat, np.full(len(mat), -1))


def grid_from_margins(J, y, m) -> PairGrid:
    y = np.asarray(y)
    grid = np.full((m, m), np.nan)
    counts = np.bincount(y, minlength=m)
    for i in range(m):
        if counts[i] == 0:
            continue
        grid[i] = np.mean(J[y == i] < 0, axis=0)
        grid[i, i] = 0.0
    return PairGrid(grid, counts)


def pairwise_grid(net: Network, X, y, eps, clip=False) -> PairGrid:
    return grid_from_margins(margin_matrix(net, X, y, eps, clip), y, net.n_classes)


def perturbation_samples(d, eps, budget, rng: Rng, corner_dims=12):
    """Sign corners on a random coordinate subset, then ``budget`` uniform draws.

    When ``d`` exceeds ``corner_dims`` the coordinates outside the subset sit
    at a fixed random corner, so every corner point is a vertex of the ball.
    """
    k = min(d, corner_dims)
    subset = rng.choice(d, size=k, replace=False)
    base = eps * rng.choice(np.array([-1.0, 1.0]), size=d)
    signs = ((np.arange(2 ** k)[:, None] >> np.arange(k)[None, :]) & 1) * 2.0 - 1.0
    corners = np.repeat(base[None, :], 2 ** k, axis=0)
    corners[:, subset] = eps * signs
    uniform = rng.uniform(-eps, eps, size=(budget, d))
    return np.vstack([corners, uniform])


def attack_oracle(net: Network, x, y, eps, targets, budget, rng: Rng, clip=False, chunk=4096):
    """First sampled perturbation that moves the prediction into ``targets``, else None."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    targets = np.array(sorted(set(int(t) for t in targets)), dtype=int)
    if targets.size == 0:
        return None
    deltas = perturbation_samples(x.size, eps, budget, rng)
    for s in range(0, len(deltas), chunk):
        D = deltas[s:s + chunk]
        pts = x + D
        if clip:
            pts = np.clip(pts, 0.0, 1.0)
        hit = np.isin(predict(net, pts), targets)
        if hit.any():
            i = int(np.argmax(hit))
            return pts[i] - x
    return None


def sampled_objective_min(net: Network, x, eps, c, n, rng: Rng, clip=False):
    """Smallest ``c . f(x + d)`` over sampled perturbations (an upper bound on the true minimum)."""
    x = np.asarray(x, dtype=np.float64)
    pts = x + perturbation_samples(x.size, eps, n, rng)
    if clip:
        pts = np.clip(pts, 0.0, 1.0)
    return (forward(net, pts).logits @ np.asarray(c, dtype=np.float64).T).min(axis=0)
