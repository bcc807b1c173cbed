"""Training objectives, optimizers, schedules and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .certify import CertificationRecord, margin_bounds, margin_matrix
from .cost import CostMatrix, UndefinedMetricError, cs_robust_error, misclassification_cost, robust_cost
from .model import Network, logits_of, predict
from .numcore import NumericalError, Rng, logsumexp, stable_log1p_sum_exp, total, value_and_grad, value_of

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "robust", "cs_robust", "standard_cs")
COARSE_ALPHAS = (1e-2, 1e-1, 1.0, 1e1, 1e2)
FINE_FACTORS = tuple(2.0 ** k for k in range(-3, 4))


class TrainingDivergedError(RuntimeError):
    """Loss or gradient became non-finite; carries the last finite checkpoint."""

    def __init__(self, message, network, history):
        super().__init__(message)
        self.network = network
        self.history = history


@dataclass
class TrainConfig:
    epsilon: float = 0.1
    epsilon_start: float = 0.05
    warmup_epochs: int = 20
    epochs: int = 60
    batch_size: int = 50
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    alpha: float = 1.0
    seed: int = 0
    selection_threshold: float = 0.04
    loss: str = "robust"
    optimizer: str = "adam"
    clip: bool = False

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0 <= self.epsilon_start <= self.epsilon:
            raise ValueError("need 0 <= epsilon_start <= epsilon")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.warmup_epochs < 0 or self.lr_decay_every < 1 or self.lr <= 0:
            raise ValueError("invalid schedule settings")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.loss == "cs_robust" else 0.0

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def epsilon_at(config: TrainConfig, epoch: int) -> float:
    """Linear ramp from ``epsilon_start`` to ``epsilon`` over the warmup epochs."""
    if config.warmup_epochs == 0 or epoch >= config.warmup_epochs:
        return config.epsilon
    frac = epoch / config.warmup_epochs
    return config.epsilon_start + (config.epsilon - config.epsilon_start) * frac


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Halving (by default) every ``lr_decay_every`` epochs once warmup is over."""
    steps = max(0, epoch - config.warmup_epochs) // config.lr_decay_every
    return config.lr * config.lr_decay ** steps


# -- objectives ------------------------------------------------------------


def ce_loss(logits, y):
    """Per-example cross entropy ``logsumexp(z) - z_y``."""
    m = np.shape(value_of(logits))[-1]
    onehot = np.eye(m)[np.asarray(y)]
    return logsumexp(logits, axis=-1) - total(logits * onehot, axis=-1)


def overall_robust_terms(params, X, y, eps, clip=False):
    """Per-example cross entropy on the negated margin bounds."""
    J = margin_bounds(params, X, y, eps, clip)
    # J[i, y_i] == 0, so CE(-J, y) reduces to logsumexp(-J)
    return logsumexp(-J, axis=-1)


def overall_robust_loss(params, X, y, eps, clip=False):
    return total(overall_robust_terms(params, X, y, eps, clip)) / len(X)


def cs_robust_terms(params, X, y, eps, C: CostMatrix, clip=False):
    """Per-example ``log(1 + sum_k C[y, k] exp(-J[y, k]))``."""
    J = margin_bounds(params, X, y, eps, clip)
    return stable_log1p_sum_exp(C.C[np.asarray(y)], -J)


def cs_robust_loss(params, X, y, eps, C: CostMatrix, alpha, class_counts, clip=False):
    """Clean cross entropy plus the cost-weighted robust penalty.

    ``class_counts`` are the per-class counts of the full training split. The
    penalty on a minibatch is rescaled by ``N / B`` so its expectation over
    batches equals the full-data objective; with the whole split as the batch
    the expression is exact.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    clean = total(ce_loss(logits_of(params, X), y)) / len(X)
    if alpha == 0:
        return clean
    class_counts = np.asarray(class_counts)
    cand = C.delta[y]
    if not cand.any():
        return clean
    weight = (class_counts.sum() / len(X)) / class_counts[y[cand]]
    terms = cs_robust_terms(params, X[cand], y[cand], eps, C, clip)
    return clean + alpha * total(terms * weight)


def standard_cs_terms(params, X, y, C: CostMatrix):
    logits = logits_of(params, X)
    y = np.asarray(y)
    own = total(logits * np.eye(C.m)[y], axis=-1)
    return stable_log1p_sum_exp(C.C[y], logits - own[:, None])


def standard_cs_loss(params, X, y, C: CostMatrix):
    """Cost-weighted cross entropy on clean inputs (no robustness term)."""
    return total(standard_cs_terms(params, X, y, C)) / len(X)


def batch_loss(config: TrainConfig, params, X, y, eps, C=None, class_counts=None):
    if config.loss == "ce":
        return total(ce_loss(logits_of(params, X), y)) / len(X)
    if config.loss == "robust":
        return overall_robust_loss(params, X, y, eps, config.clip)
    if C is None:
        raise ValueError(f"loss {config.loss!r} needs a cost matrix")
    if config.loss == "cs_robust":
        return cs_robust_loss(params, X, y, eps, C, config.alpha, class_counts, config.clip)
    return standard_cs_loss(params, X, y, C)


# -- optimizers ------------------------------------------------------------


class SGD:
    kind = "sgd"

    def step(self, params, grads, lr):
        _check_grads(grads)
        return [p - lr * g for p, g in zip(params, grads)]


class Adam:
    kind = "adam"

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grads, lr):
        _check_grads(grads)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            out.append(p - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def _check_grads(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")


def make_optimizer(kind: str):
    return {"adam": Adam, "sgd": SGD}[kind]()


# -- evaluation and history ------------------------------------------------


def evaluate(net: Network, X, y, eps, C: CostMatrix | None = None, clip=False) -> dict:
    """Clean and certified metrics; metrics with no candidates come back as None."""
    y = np.asarray(y)
    pred = predict(net, X)
    J = margin_matrix(net, X, y, eps, clip)
    off = ~np.eye(net.n_classes, dtype=bool)[y]
    out = {
        "n": int(len(y)),
        "epsilon": float(eps),
        "classification_error": float(np.mean(pred != y)),
        "overall_robust_error": float(np.mean(np.any((J < 0) & off, axis=1))),
        "cs_robust_error": None,
        "robust_cost": None,
        "misclassification_cost": None,
    }
    if C is not None:
        records = [CertificationRecord(i, int(lab), {t: float(J[i, t]) for t in C.omega(int(lab))})
                   for i, lab in enumerate(y)]
        try:
            out["cs_robust_error"] = cs_robust_error(records, C)
            out["robust_cost"] = robust_cost(records, C)
        except UndefinedMetricError:
            pass
        out["misclassification_cost"] = misclassification_cost(pred, y, C)
    return out


@dataclass
class EpochRecord:
    epoch: int
    epsilon: float
    lr: float
    train_loss: float
    val_class_err: float
    val_robust_metric: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    metric_name: str = "overall_robust_error"

    def __len__(self):
        return len(self.epochs)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "epsilon", "lr", "train_loss", "val_class_err", "val_robust_metric"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.epsilon), repr(r.lr), repr(r.train_loss),
                            repr(r.val_class_err), repr(r.val_robust_metric)])


def select_model(history: TrainHistory, threshold: float) -> tuple[int, bool]:
    """Best epoch index and whether the threshold fallback was used.

    Among epochs with validation classification error below ``threshold`` pick
    the lowest robust metric; if none qualifies, pick the lowest
    classification error and flag it. Robust-metric ties are broken by
    classification error, then by the earliest epoch.
    """
    if not history.epochs:
        raise ValueError("empty history")
    ok = [i for i, r in enumerate(history.epochs) if r.val_class_err < threshold]
    if ok:
        eps = history.epochs
        return min(ok, key=lambda i: (eps[i].val_robust_metric, eps[i].val_class_err, i)), False
    errs = [r.val_class_err for r in history.epochs]
    return int(np.argmin(errs)), True


@dataclass
class TrainResult:
    network: Network
    history: TrainHistory
    selected_epoch: int
    flagged: bool
    checkpoints: list


def train(net: Network, train_set, val_set, config: TrainConfig, C: CostMatrix | None = None,
          progress: Callable | None = None) -> TrainResult:
    """Minibatch training with the configured objective and schedules.

    ``train_set`` / ``val_set`` are ``(X, y)`` pairs. Deterministic for a
    given seed at one BLAS thread. Every epoch is checkpointed and the
    returned network is the one picked by :func:`select_model`.
    """
    X, y = np.asarray(train_set[0], dtype=np.float64), np.asarray(train_set[1])
    Xv, yv = np.asarray(val_set[0], dtype=np.float64), np.asarray(val_set[1])
    if config.loss in ("cs_robust", "standard_cs") and C is None:
        raise ValueError(f"loss {config.loss!r} needs a cost matrix")
    rng = Rng(config.seed)
    counts = np.bincount(y, minlength=net.n_classes)
    use_cs_metric = (config.loss != "robust" and C is not None
                     and bool(np.any(C.delta[yv])))
    history = TrainHistory(metric_name="cs_robust_error" if use_cs_metric else "overall_robust_error")
    opt = make_optimizer(config.optimizer)
    params = [p.copy() for p in net.params()]
    metadata = {"epsilon": config.epsilon, "alpha": config.effective_alpha, "seed": config.seed}
    last_good = net.with_params(params)
    last_good.metadata = dict(metadata)
    checkpoints = []
    for epoch in range(config.epochs):
        eps, lr = epsilon_at(config, epoch), lr_at(config, epoch)
        order = rng.child(f"shuffle/{epoch}").permutation(len(X))
        losses = []
        try:
            for s in range(0, len(X), config.batch_size):
                idx = order[s:s + config.batch_size]
                value, grads = value_and_grad(
                    lambda *ps: batch_loss(config, ps, X[idx], y[idx], eps, C, counts), params)
                if not math.isfinite(value):
                    raise NumericalError("non-finite loss")
                params = opt.step(params, grads, lr)
                losses.append(value)
        except NumericalError as exc:
            raise TrainingDivergedError(f"diverged in epoch {epoch}: {exc}", last_good, history) from exc
        current = net.with_params(params)
        current.metadata = dict(metadata)
        metrics = evaluate(current, Xv, yv, config.epsilon, C if use_cs_metric else None, config.clip)
        robust = metrics["cs_robust_error"] if use_cs_metric else metrics["overall_robust_error"]
        rec = EpochRecord(epoch, eps, lr, float(np.mean(losses)), metrics["classification_error"], robust)
        history.epochs.append(rec)
        checkpoints.append(current)
        last_good = current
        log.info("epoch %d eps=%.4f lr=%.2e loss=%.4f val_err=%.4f val_robust=%.4f",
                 epoch, eps, lr, rec.train_loss, rec.val_class_err, rec.val_robust_metric)
        if progress is not None:
            progress(rec)
    best, flagged = select_model(history, config.selection_threshold)
    return TrainResult(checkpoints[best], history, best, flagged, checkpoints)


# -- regularization tuning -------------------------------------------------


@dataclass
class TuningReport:
    coarse: list
    fine: list
    alpha_coarse: float
    best_alpha: float
    flagged: bool

    def to_dict(self) -> dict:
        return {
            "coarse": self.coarse,
            "fine": self.fine,
            "coarse_grid": [e["alpha"] for e in self.coarse],
            "fine_grid": [e["alpha"] for e in self.fine],
            "alpha_coarse": self.alpha_coarse,
            "best_alpha": self.best_alpha,
            "flagged": self.flagged,
        }


def _pick(entries, threshold):
    valid = [e for e in entries if e.get("error") is None]
    if not valid:
        raise RuntimeError("every training run in the grid failed")
    ok = [e for e in valid if e["classification_error"] < threshold]
    pool, flagged = (ok, False) if ok else (valid, True)
    best = min(pool, key=lambda e: e["cs_robust_error"])
    return best["alpha"], flagged


def tune_alpha(train_fn: Callable, evaluate_fn: Callable, threshold: float) -> TuningReport:
    """Two-stage grid search for the penalty weight.

    ``train_fn(alpha)`` returns a model and ``evaluate_fn(model)`` returns
    ``(classification_error, cs_robust_error)`` on validation data. Stage one
    scans powers of ten, stage two scans ``2^-3 .. 2^3`` times the stage-one
    winner; both keep candidates under the error threshold and take the
    lowest cost-sensitive robust error. A failed run is reported, not fatal.
    """
    cache = {}

    def run(alpha):
        if alpha not in cache:
            entry = {"alpha": alpha, "classification_error": None, "cs_robust_error": None, "error": None}
            try:
                err, rob = evaluate_fn(train_fn(alpha))
                entry["classification_error"], entry["cs_robust_error"] = float(err), float(rob)
            except (NumericalError, TrainingDivergedError, ValueError) as exc:
                entry["error"] = f"{type(exc).__name__}: {exc}"
            cache[alpha] = entry
        return dict(cache[alpha])

    coarse = [run(a) for a in COARSE_ALPHAS]
    alpha_coarse, flag1 = _pick(coarse, threshold)
    fine = [run(f * alpha_coarse) for f in FINE_FACTORS]
    best, flag2 = _pick(fine, threshold)
    return TuningReport(coarse, fine, alpha_coarse, best, flag1 or flag2)
