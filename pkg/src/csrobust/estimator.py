"""scikit-learn style wrapper around training and certification."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .certify import certify_dataset, margin_matrix
from .cost import CostMatrix
from .data import split_folds
from .model import forward, init_params
from .numcore import Rng
from .train import TrainConfig, evaluate, train


class CertifiedRobustClassifier(ClassifierMixin, BaseEstimator):
    """ReLU network trained against certified (dual) bounds on an l-inf ball.

    ``loss`` picks the objective: ``"ce"`` (clean cross entropy),
    ``"robust"`` (every target class guarded), ``"cs_robust"`` (only the
    transformations priced by ``cost_matrix``, weighted by ``alpha``) or
    ``"standard_cs"`` (cost-weighted clean cross entropy). Inputs must lie in
    [0, 1]. Without explicit validation data, one of ``n_folds`` seeded folds
    of the training data is held out for model selection.
    """

    def __init__(self, hidden_layer_sizes=(100, 100), loss="robust", epsilon=0.1,
                 epsilon_start=0.05, warmup_epochs=20, epochs=60, batch_size=50, lr=1e-3,
                 lr_decay=0.5, lr_decay_every=10, alpha=1.0, cost_matrix=None, optimizer="adam",
                 selection_threshold=0.04, n_folds=5, validation_fold=0, clip=False, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.loss = loss
        self.epsilon = epsilon
        self.epsilon_start = epsilon_start
        self.warmup_epochs = warmup_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.alpha = alpha
        self.cost_matrix = cost_matrix
        self.optimizer = optimizer
        self.selection_threshold = selection_threshold
        self.n_folds = n_folds
        self.validation_fold = validation_fold
        self.clip = clip
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epsilon=self.epsilon, epsilon_start=min(self.epsilon_start, self.epsilon),
            warmup_epochs=self.warmup_epochs, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, lr_decay=self.lr_decay, lr_decay_every=self.lr_decay_every,
            alpha=self.alpha, seed=self.random_state, selection_threshold=self.selection_threshold,
            loss=self.loss, optimizer=self.optimizer, clip=self.clip)

    def _cost(self):
        if self.cost_matrix is None:
            return None
        if isinstance(self.cost_matrix, CostMatrix):
            return self.cost_matrix
        return CostMatrix(self.cost_matrix)

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.array_equal(self.classes_[idx], y):
            raise ValueError("y contains labels not seen during fit")
        return idx

    def _check_X(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.min() < 0 or X.max() > 1:
            raise ValueError("inputs must be scaled into [0, 1]")
        C = self._cost()
        if C is not None:
            if not np.all(np.equal(np.mod(y, 1), 0)) or y.min() < 0 or y.max() >= C.m:
                raise ValueError(f"with a cost matrix, labels must be integers in [0, {C.m})")
            self.classes_ = np.arange(C.m)
        else:
            self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        yi = self._encode(y)
        if X_val is None:
            split = split_folds(len(X), self.n_folds, Rng(self.random_state).child("folds"),
                                self.validation_fold)
            tr, va = split.train_indices(), split.val_indices()
            train_set, val_set = (X[tr], yi[tr]), (X[va], yi[va])
        else:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            train_set, val_set = (X, yi), (X_val, self._encode(y_val))
        sizes = [X.shape[1], *self.hidden_layer_sizes, len(self.classes_)]
        net = init_params(sizes, Rng(self.random_state).child("init"))
        result = train(net, train_set, val_set, self._config(), C)
        self.network_ = result.network
        self.history_ = result.history
        self.selected_epoch_ = result.selected_epoch
        self.selection_flagged_ = result.flagged
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return forward(self.network_, self._check_X(X)).logits

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        return self.classes_[np.argmax(z, axis=1)]

    def margins(self, X, y, epsilon=None):
        """Certified lower bounds ``J[i, k]`` on ``logit_y - logit_k`` over the ball."""
        check_is_fitted(self, "network_")
        eps = self.epsilon if epsilon is None else epsilon
        return margin_matrix(self.network_, self._check_X(X), self._encode(np.asarray(y)), eps, self.clip)

    def certify(self, X, y, epsilon=None, targets=None):
        """Per-example certification records (class indices follow ``classes_``)."""
        check_is_fitted(self, "network_")
        eps = self.epsilon if epsilon is None else epsilon
        return certify_dataset(self.network_, self._check_X(X), self._encode(np.asarray(y)), eps,
                               self.clip, targets)

    def evaluate(self, X, y, epsilon=None) -> dict:
        check_is_fitted(self, "network_")
        eps = self.epsilon if epsilon is None else epsilon
        return evaluate(self.network_, self._check_X(X), self._encode(np.asarray(y)), eps,
                        self._cost(), self.clip)
