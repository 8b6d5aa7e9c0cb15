"""SGD numerics: model init, per-rating update, block epochs, loss, RMSE.

All accumulation (dot products, loss sums) happens in float64.  The factor
matrices are stored row-major per entity: user_factors[u] and
item_factors[v] are the latent vectors, so both are contiguous reads in
the inner loop.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import BlockGrid, RatingMatrix, align_ratings

FACTORS_MAGIC = b"HMFP1"


@dataclass
class Hyperparams:
    n_factors: int = 8
    reg_user: float = 0.05
    reg_item: float = 0.05
    learning_rate: float = 0.005
    epochs: int = 10

    def validate(self) -> None:
        if self.n_factors < 1:
            raise ValueError("n_factors must be >= 1")
        if self.reg_user < 0 or self.reg_item < 0:
            raise ValueError("regularization must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class FactorModel:
    """Dense factor matrices: user_factors (n_users, k), item_factors (n_items, k)."""

    user_factors: np.ndarray
    item_factors: np.ndarray

    @property
    def n_factors(self) -> int:
        return self.user_factors.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    def copy(self) -> "FactorModel":
        return FactorModel(self.user_factors.copy(), self.item_factors.copy())

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.user_factors))
                    and np.all(np.isfinite(self.item_factors)))


@dataclass
class UpdateTrace:
    """Debug record of one applied update."""

    residual: float
    delta_user_norm: float
    delta_item_norm: float


def init_model(n_users: int, n_items: int, hparams: Hyperparams, seed: int) -> FactorModel:
    """Entries drawn i.i.d. uniform on [0, 1/sqrt(k)], seed-deterministic.

    The scale keeps initial predictions O(1) for any factor count.
    """
    k = hparams.n_factors
    if k < 1:
        raise ValueError("n_factors must be >= 1")
    rng = np.random.default_rng(seed)
    hi = 1.0 / np.sqrt(k)
    user_f = rng.uniform(0.0, hi, size=(n_users, k))
    item_f = rng.uniform(0.0, hi, size=(n_items, k))
    return FactorModel(user_f, item_f)


def predict_one(user_vec: np.ndarray, item_vec: np.ndarray) -> float:
    if len(user_vec) != len(item_vec):
        raise ValueError("factor vectors must have equal length")
    return float(np.dot(np.asarray(user_vec, dtype=np.float64),
                        np.asarray(item_vec, dtype=np.float64)))


def sgd_update(model: FactorModel, user: int, item: int, rating: float,
               hparams: Hyperparams) -> UpdateTrace:
    """Apply one gradient step for a single rating, in place.

    Both vector updates use the pre-update value of the other vector.
    """
    pu = model.user_factors[user]
    qv = model.item_factors[item]
    err = rating - float(np.dot(pu, qv))
    lr = hparams.learning_rate
    du = lr * (err * qv - hparams.reg_user * pu)
    dv = lr * (err * pu - hparams.reg_item * qv)
    pu += du
    qv += dv
    return UpdateTrace(residual=err,
                       delta_user_norm=float(np.linalg.norm(du)),
                       delta_item_norm=float(np.linalg.norm(dv)))


def block_epoch(model: FactorModel, grid: BlockGrid, block: int,
                hparams: Hyperparams, order_seed: int) -> int:
    """Apply every triple of one block once, in a seeded shuffled order.

    The caller must hold an exclusive lease on the block's row and column
    bands; nothing here checks for conflicts.
    """
    lo, hi = grid.block_range(block)
    return kernels.sgd_range(
        model.user_factors, model.item_factors,
        grid.users, grid.items, grid.ratings,
        lo, hi,
        hparams.learning_rate, hparams.reg_user, hparams.reg_item,
        order_seed, 0, 0)


def regularized_loss(matrix: RatingMatrix, model: FactorModel,
                     reg_user: float, reg_item: float) -> float:
    """Sum over observed entries of squared residual plus per-entry
    regularizers reg_user*|p_u|^2 + reg_item*|q_v|^2.

    The regularizers sit inside the per-entry sum, so a user's vector is
    penalized once per observed rating of that user.
    """
    total = 0.0
    chunk = 1 << 18
    for lo in range(0, matrix.nnz, chunk):
        hi = min(lo + chunk, matrix.nnz)
        pu = model.user_factors[matrix.users[lo:hi]]
        qv = model.item_factors[matrix.items[lo:hi]]
        err = matrix.ratings[lo:hi] - np.einsum("ij,ij->i", pu, qv)
        total += float(np.dot(err, err))
        if reg_user:
            total += reg_user * float(np.einsum("ij,ij->", pu, pu))
        if reg_item:
            total += reg_item * float(np.einsum("ij,ij->", qv, qv))
    return total


@dataclass
class RmseReport:
    value: float
    n_evaluated: int
    n_skipped: int


def rmse(testset: RatingMatrix, model: FactorModel,
         train: RatingMatrix | None = None) -> RmseReport:
    """Root mean square error of predictions against a rating set.

    When `train` is given, the test set's original ids are resolved through
    the training remap tables; entries with ids unseen in training are
    skipped and counted.  Without `train`, indices are used as-is.
    """
    if train is not None:
        users, items, ratings, skipped = align_ratings(testset, train)
    else:
        users, items, ratings, skipped = testset.users, testset.items, testset.ratings, 0
    n = len(ratings)
    if n == 0:
        raise ValueError("no evaluable entries in test set")
    sq = 0.0
    chunk = 1 << 18
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        pred = np.einsum("ij,ij->i",
                         model.user_factors[users[lo:hi]],
                         model.item_factors[items[lo:hi]])
        err = ratings[lo:hi] - pred
        sq += float(np.dot(err, err))
    return RmseReport(value=float(np.sqrt(sq / n)), n_evaluated=n, n_skipped=skipped)


def save_factors(path, model: FactorModel) -> None:
    """Versioned binary factors file: HMFP1, u64 dims, row-major user then
    item factors (item block written k x n_items row-major)."""
    with open(path, "wb") as fh:
        fh.write(FACTORS_MAGIC)
        fh.write(struct.pack("<QQQ", model.n_users, model.n_items, model.n_factors))
        fh.write(np.ascontiguousarray(model.user_factors, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.item_factors.T, dtype="<f8").tobytes())


def load_factors(path) -> FactorModel:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != FACTORS_MAGIC:
            raise ValueError(f"{path}: not a factors file (bad magic {magic!r})")
        n_users, n_items, k = struct.unpack("<QQQ", fh.read(24))
        user_f = np.frombuffer(fh.read(8 * n_users * k), dtype="<f8").reshape(n_users, k)
        item_f = np.frombuffer(fh.read(8 * k * n_items), dtype="<f8").reshape(k, n_items)
    return FactorModel(user_f.astype(np.float64), np.ascontiguousarray(item_f.T))
