import numpy as np
import pytest
from sklearn.base import clone

from ssmreduce.estimator import BalancedTruncation, LruClassifier, LruRegressor
from ssmreduce.lti import DiagonalSystem, simulate


def test_balanced_truncation_drops_dead_modes(rng):
    a = np.array([0.9, 0.5, 0.3, 0.2])
    sys = DiagonalSystem(a, np.array([[1.0], [1.0], [0.0], [0.0]]), np.array([[1.0, 1.0, 1.0, 1.0]]))
    bt = BalancedTruncation(tau=1e-8).fit(sys)
    assert bt.rank_ == 2 and bt.error_bound_ <= 1e-6
    X = rng.standard_normal((3, 25))
    Y = bt.transform(X)
    expect = np.stack([simulate(sys, x[None]).T for x in X])
    assert Y.shape == (3, 25, 1) and np.allclose(Y, expect, atol=1e-8)


def test_balanced_truncation_checks():
    with pytest.raises(TypeError):
        BalancedTruncation().fit(np.eye(2))
    bt = BalancedTruncation().fit(DiagonalSystem([0.5], [[1.0]], [[1.0]]))
    with pytest.raises(ValueError):
        bt.transform(np.zeros((2, 5, 3)))


def test_params_and_clone():
    est = LruRegressor(n=12, tau=0.1)
    c = clone(est)
    assert c.get_params()["n"] == 12 and c.get_params()["tau"] == 0.1 and c is not est
    assert clone(BalancedTruncation(tau=0.3)).tau == 0.3


def test_regressor_learns_a_filter(rng):
    X = rng.standard_normal((64, 20))
    Y = np.stack([simulate(DiagonalSystem([0.6], [[1.0]], [[1.0]]), x[None])[0].real for x in X])
    est = LruRegressor(H=4, n=4, steps=300, batch=16, base_lr=0.01, norm="none", activation="identity")
    est.fit(X, Y)
    assert est.predict(X).shape == (64, 20)
    assert est.score(X, Y) > 0.9


def test_classifier_labels(rng):
    X = rng.standard_normal((60, 10, 1))
    y = np.where(X[:, :, 0].mean(axis=1) > 0, "pos", "neg")
    est = LruClassifier(H=4, n=4, steps=150, batch=20, base_lr=0.01).fit(X, y)
    assert set(est.predict(X)) <= {"pos", "neg"}
    p = est.predict_proba(X)
    assert p.shape == (60, 2) and np.allclose(p.sum(1), 1.0)
    assert est.score(X, y) > 0.8


def test_reducing_fit(rng):
    X = rng.standard_normal((32, 12))
    est = LruRegressor(H=4, n=16, steps=40, batch=8, tau=0.2, random_state=1).fit(X, X)
    assert est.orders_[0] < 16
