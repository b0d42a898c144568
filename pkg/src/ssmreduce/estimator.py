"""scikit-learn style wrappers.

``BalancedTruncation`` fits on an LTI system and transforms input sequences
through the reduced system. ``LruRegressor`` and ``LruClassifier`` train the
NumPy LRU model with in-training reduction on ``(n_samples, L, d)`` arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .lti import DenseSystem, DiagonalSystem, simulate
from .reduction import reduce_system
from .ssm import forward
from .tasks import Dataset
from .train import ReductionPolicy, TrainConfig, train_run


class BalancedTruncation(TransformerMixin, BaseEstimator):
    """Balanced truncation of one LTI system at discarded-energy tolerance ``tau``.

    ``fit`` takes a :class:`DenseSystem` or :class:`DiagonalSystem`.
    ``transform`` maps input sequences ``(n_samples, L, p)`` to the reduced
    system's outputs ``(n_samples, L, q)``.
    """

    def __init__(self, tau=1e-2, frac_gate=1.0, diagonal=None, readout="auto"):
        self.tau = tau
        self.frac_gate = frac_gate
        self.diagonal = diagonal
        self.readout = readout

    def fit(self, X, y=None):
        if not isinstance(X, (DenseSystem, DiagonalSystem)):
            raise TypeError("BalancedTruncation.fit expects a DenseSystem or DiagonalSystem")
        res = reduce_system(X, self.tau, self.frac_gate, self.diagonal, self.readout)
        self.result_ = res
        self.system_ = res.system
        self.hankel_singular_values_ = None if res.sigma is None else res.sigma.sigma.copy()
        self.rank_ = res.system.n
        self.error_bound_ = res.error_bound
        self.n_features_in_ = X.p
        return self

    def transform(self, X):
        check_is_fitted(self, "system_")
        X = check_array(X, allow_nd=True, ensure_2d=False)
        if X.ndim == 2:
            X = X[..., None]
        if X.shape[-1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} input channels, got {X.shape[-1]}")
        return np.stack([simulate(self.system_, x.T).T for x in X])


class _LruEstimator(BaseEstimator):
    _loss = "mse"
    _pooling = "none"

    def __init__(self, H=16, n=32, depth=1, steps=1000, batch=32, base_lr=1e-3, lr_factor=1.0,
                 weight_decay=0.0, dropout=0.0, warmup_fraction=0.1, tau=0.0, frac_gate=0.95,
                 attempts=None, norm="layer", activation="gelu", pooling=None, random_state=0):
        self.H = H
        self.n = n
        self.depth = depth
        self.steps = steps
        self.batch = batch
        self.base_lr = base_lr
        self.lr_factor = lr_factor
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.warmup_fraction = warmup_fraction
        self.tau = tau
        self.frac_gate = frac_gate
        self.attempts = attempts
        self.norm = norm
        self.activation = activation
        self.pooling = pooling
        self.random_state = random_state

    def _as_sequences(self, X):
        X = check_array(X, allow_nd=True, ensure_2d=False)
        return X[..., None] if X.ndim == 2 else X

    def _config(self):
        policy = ReductionPolicy(tau=self.tau, frac_gate=self.frac_gate, enabled=self.tau > 0,
                                 attempts=self.attempts or {"kind": "equidistant_in_warmup", "k": 4})
        return TrainConfig(depth=self.depth, H=self.H, n=self.n, steps=self.steps, batch=self.batch,
                           base_lr=self.base_lr, lr_factor=self.lr_factor, weight_decay=self.weight_decay,
                           dropout=self.dropout, warmup_fraction=self.warmup_fraction,
                           seed=int(self.random_state or 0), policy=policy, norm=self.norm,
                           activation=self.activation, pooling=self.pooling or self._pooling)

    def _fit(self, X, y, d_out):
        data = Dataset(type(self).__name__, X, y, X[:1], y[:1], X.shape[-1], d_out, self._loss,
                       pooling=self.pooling or self._pooling)
        rec = train_run(self._config(), data=data)
        self.model_ = rec.model
        self.run_ = rec
        self.orders_ = rec.final_orders
        self.n_features_in_ = X.shape[-1]
        return self

    def _outputs(self, X):
        check_is_fitted(self, "model_")
        X = self._as_sequences(X)
        return forward(self.model_, X)[0]


class LruRegressor(RegressorMixin, _LruEstimator):
    """Sequence-to-sequence regression (outputs at every time step by default)."""

    def fit(self, X, y):
        X = self._as_sequences(X)
        y = np.asarray(y, dtype=float)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different numbers of samples")
        pooled = (self.pooling or self._pooling) != "none"
        if not pooled and y.ndim == 2:
            y = y[..., None]
        d_out = y.shape[-1] if y.ndim > 1 else 1
        if pooled and y.ndim == 1:
            y = y[:, None]
        return self._fit(X, y, d_out)

    def predict(self, X):
        out = self._outputs(X)
        return out[..., 0] if out.shape[-1] == 1 else out

    def score(self, X, y, sample_weight=None):
        """Coefficient of determination over every predicted value."""
        pred = self.predict(X).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        return 1.0 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)


class LruClassifier(ClassifierMixin, _LruEstimator):
    """Sequence classification with mean pooling over time."""

    _loss = "cross_entropy"
    _pooling = "mean"

    def fit(self, X, y):
        X = self._as_sequences(X)
        X2, y = check_X_y(X.reshape(X.shape[0], -1), y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        return self._fit(X, y_idx, len(self.classes_))

    def decision_function(self, X):
        return self._outputs(X)

    def predict_proba(self, X):
        z = self._outputs(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self._outputs(X), axis=1)]
