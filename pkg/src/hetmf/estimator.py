"""Scikit-learn style estimator facade over the training engine.

SGDFactorizer follows the fit/predict contract so it clones, pipelines and
grid-searches like any other estimator.  Ratings can be handed over as an
(n, 3) array of (user, item, rating) rows, as an (n, 2) pair array plus a
y vector, or as any scipy-sparse-like object with a tocoo() method.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import RatingMatrix
from .engine import (SCHEDULE_BATCH_ONLY, SCHEDULE_HSGD_STAR,
                     SCHEDULE_STREAM_ONLY, RunConfig, run_training)
from .partition import MODE_NONUNIFORM, MODE_UNIFORM
from .sgd import rmse


def as_rating_matrix(X, y=None) -> RatingMatrix:
    """Validate and convert fit/predict input into a RatingMatrix."""
    if isinstance(X, RatingMatrix):
        if y is not None:
            raise ValueError("y must be None when X is already a RatingMatrix")
        return X
    if hasattr(X, "tocoo"):
        coo = X.tocoo()
        users, items, vals = coo.row, coo.col, coo.data
        n_users, n_items = coo.shape
    else:
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] not in (2, 3):
            raise ValueError("X must be (n, 3) triples or (n, 2) pairs with y")
        if X.shape[1] == 3:
            if y is not None:
                raise ValueError("pass ratings either in X[:, 2] or in y, not both")
            users, items, vals = X[:, 0], X[:, 1], X[:, 2].astype(np.float64)
        else:
            if y is None:
                raise ValueError("(n, 2) input needs a y vector of ratings")
            y = np.asarray(y, dtype=np.float64)
            if len(y) != len(X):
                raise ValueError("X and y lengths differ")
            users, items, vals = X[:, 0], X[:, 1], y
        users = np.asarray(users)
        items = np.asarray(items)
        if not np.allclose(users, np.round(users)) or not np.allclose(items, np.round(items)):
            raise ValueError("user and item columns must be integer ids")
        n_users = int(users.max()) + 1 if len(users) else 0
        n_items = int(items.max()) + 1 if len(items) else 0
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(users) and (users.min() < 0 or items.min() < 0):
        raise ValueError("ids must be non-negative")
    if not np.all(np.isfinite(vals)):
        raise ValueError("ratings must be finite")
    matrix = RatingMatrix(n_users, n_items, users.astype(np.int32),
                          items.astype(np.int32), np.asarray(vals, np.float64))
    matrix.validate()
    return matrix


class SGDFactorizer(BaseEstimator):
    """Latent-factor model fit by blocked parallel SGD.

    Parameters mirror the engine configuration; with n_batch_workers=0 the
    run uses plain stream workers, otherwise the two-region schedule with
    the workload split given by `alpha` (required here, since a fitted
    calibration profile is a CLI-side concept).

    After fit: user_factors_, item_factors_, global_mean_, n_iter_, history_.
    """

    def __init__(self, n_factors=8, learning_rate=0.01, reg_user=0.02,
                 reg_item=0.02, epochs=20, n_stream_workers=1,
                 n_batch_workers=0, batch_lanes=1, batch_overhead_ms=0.5,
                 alpha=0.5, target_rmse=None, random_state=0):
        self.n_factors = n_factors
        self.learning_rate = learning_rate
        self.reg_user = reg_user
        self.reg_item = reg_item
        self.epochs = epochs
        self.n_stream_workers = n_stream_workers
        self.n_batch_workers = n_batch_workers
        self.batch_lanes = batch_lanes
        self.batch_overhead_ms = batch_overhead_ms
        self.alpha = alpha
        self.target_rmse = target_rmse
        self.random_state = random_state

    def _config(self) -> RunConfig:
        if self.n_batch_workers == 0:
            schedule, division = SCHEDULE_STREAM_ONLY, MODE_UNIFORM
        elif self.n_stream_workers == 0:
            schedule, division = SCHEDULE_BATCH_ONLY, MODE_UNIFORM
        else:
            schedule, division = SCHEDULE_HSGD_STAR, MODE_NONUNIFORM
        return RunConfig(
            n_factors=self.n_factors, learning_rate=self.learning_rate,
            reg_user=self.reg_user, reg_item=self.reg_item, epochs=self.epochs,
            target_rmse=self.target_rmse,
            n_stream=self.n_stream_workers, n_batch=self.n_batch_workers,
            batch_lanes=self.batch_lanes, batch_overhead_ms=self.batch_overhead_ms,
            schedule=schedule, division=division,
            alpha=self.alpha if division == MODE_NONUNIFORM else None,
            seed=self.random_state if self.random_state is not None else 0,
            log_train_loss=False,
        )

    def fit(self, X, y=None):
        matrix = as_rating_matrix(X, y)
        if matrix.nnz == 0:
            raise ValueError("cannot fit on an empty rating set")
        result = run_training(self._config(), matrix=matrix)
        self.user_factors_ = result.model.user_factors
        self.item_factors_ = result.model.item_factors
        self.global_mean_ = float(matrix.ratings.mean())
        self.n_iter_ = result.epochs_run
        self.history_ = result.metrics
        self._train_matrix_ = matrix
        return self

    def _check_fitted(self):
        if not hasattr(self, "user_factors_"):
            raise AttributeError("estimator is not fitted; call fit first")

    def predict(self, X):
        """Predicted ratings for (user, item) pairs; unknown ids fall back
        to the training mean."""
        self._check_fitted()
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] < 2:
            raise ValueError("predict expects (n, 2) user/item pairs")
        users = X[:, 0].astype(np.int64)
        items = X[:, 1].astype(np.int64)
        out = np.full(len(X), self.global_mean_, dtype=np.float64)
        ok = ((users >= 0) & (users < len(self.user_factors_))
              & (items >= 0) & (items < len(self.item_factors_)))
        if ok.any():
            out[ok] = np.einsum("ij,ij->i", self.user_factors_[users[ok]],
                                self.item_factors_[items[ok]])
        return out

    def score(self, X, y=None):
        """Negative RMSE (higher is better, sklearn convention)."""
        self._check_fitted()
        matrix = as_rating_matrix(X, y)
        from .sgd import FactorModel
        report = rmse(matrix, FactorModel(self.user_factors_, self.item_factors_))
        return -report.value

    def transform(self, X):
        """Latent user vectors for an array of user ids."""
        self._check_fitted()
        users = np.asarray(X, dtype=np.int64).reshape(-1)
        if len(users) and (users.min() < 0 or users.max() >= len(self.user_factors_)):
            raise ValueError("user id out of range")
        return self.user_factors_[users]
