import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from csrobust import CertifiedRobustClassifier, make_task
from csrobust.data import synth_blobs
from csrobust.numcore import Rng


def blobs(seed=0, m=3):
    ds = synth_blobs(Rng(seed), m, 4, 30, 0.05)
    return ds.X, ds.y


def small(**kw):
    base = dict(hidden_layer_sizes=(16,), epochs=8, warmup_epochs=2, batch_size=10, lr=1e-2,
                epsilon=0.02, epsilon_start=0.01, selection_threshold=0.5)
    return CertifiedRobustClassifier(**{**base, **kw})


def test_params_round_trip_and_clone():
    est = small(loss="cs_robust", alpha=0.3)
    params = est.get_params()
    assert params["alpha"] == 0.3 and params["hidden_layer_sizes"] == (16,)
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(alpha=2.0)
    assert est.alpha == 2.0


def test_fit_predict_and_proba():
    X, y = blobs()
    est = small().fit(X, y)
    assert est.n_features_in_ == 4 and list(est.classes_) == [0, 1, 2]
    p = est.predict_proba(X)
    assert p.shape == (90, 3) and np.allclose(p.sum(axis=1), 1)
    assert np.array_equal(est.predict(X), est.classes_[p.argmax(axis=1)])
    assert est.score(X, y) > 0.9
    assert len(est.history_) == 8 and 0 <= est.selected_epoch_ < 8


def test_string_labels_are_mapped():
    X, y = blobs(1, 2)
    names = np.array(["cat", "dog"])[y]
    est = small(loss="ce").fit(X, names)
    assert set(est.predict(X)) <= {"cat", "dog"}
    J = est.margins(X[:5], names[:5])
    assert J.shape == (5, 2) and np.all(J[np.arange(5), y[:5]] == 0)


def test_deterministic_fit():
    X, y = blobs(2)
    a, b = small().fit(X, y), small().fit(X, y)
    assert np.array_equal(a.decision_function(X), b.decision_function(X))


def test_cost_sensitive_fit_and_evaluate():
    X, y = blobs(3)
    C = make_task("single-pair", 3, s=0, t=1)
    est = small(loss="cs_robust", cost_matrix=C).fit(X, y)
    m = est.evaluate(X, y)
    assert m["cs_robust_error"] is not None and 0 <= m["robust_cost"] <= 1
    recs = est.certify(X[:4], y[:4], targets={0: [1], 1: [], 2: []})
    assert all(set(r.bounds) == ({1} if r.label == 0 else set()) for r in recs)


def test_explicit_validation_set():
    X, y = blobs(4)
    Xv, yv = blobs(5)
    est = small(epochs=2).fit(X, y, X_val=Xv, y_val=yv)
    assert len(est.history_) == 2


def test_input_validation():
    X, y = blobs()
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        small().fit(X + 2, y)
    with pytest.raises(ValueError):
        small().fit(X, np.zeros(len(X)))
    with pytest.raises(ValueError):
        small(cost_matrix=make_task("single-pair", 3, s=0, t=1)).fit(X, y + 5)
    with pytest.raises(NotFittedError):
        small().predict(X)
    est = small(epochs=1).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :3])
    with pytest.raises(ValueError):
        est.evaluate(X, y + 7)
