import numpy as np
import pytest
from sklearn.base import clone

from hetmf.data import synthetic_ratings
from hetmf.estimator import SGDFactorizer, as_rating_matrix


def triples(seed=0, n=400):
    m = synthetic_ratings(60, 50, rank=4, density=0.2, noise=0.05, seed=seed)
    X = np.column_stack([m.users, m.items, m.ratings])
    return X[:n] if n else X


class TestInputValidation:
    def test_triple_array(self):
        m = as_rating_matrix(np.array([[0, 1, 3.5], [2, 0, 1.0]]))
        assert (m.n_users, m.n_items, m.nnz) == (3, 2, 2)

    def test_pairs_plus_y(self):
        m = as_rating_matrix(np.array([[0, 1], [2, 0]]), y=[3.5, 1.0])
        assert m.nnz == 2
        assert m.ratings.tolist() == [3.5, 1.0]

    def test_sparse_like_object(self):
        scipy_sparse = pytest.importorskip("scipy.sparse")
        dense = np.zeros((4, 5))
        dense[1, 2] = 2.0
        dense[3, 0] = 4.0
        m = as_rating_matrix(scipy_sparse.coo_matrix(dense))
        assert (m.n_users, m.n_items, m.nnz) == (4, 5, 2)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            as_rating_matrix(np.zeros((3, 4)))
        with pytest.raises(ValueError):
            as_rating_matrix(np.zeros(3))

    def test_rejects_fractional_ids(self):
        with pytest.raises(ValueError, match="integer"):
            as_rating_matrix(np.array([[0.5, 1, 2.0]]))

    def test_rejects_negative_ids(self):
        with pytest.raises(ValueError, match="non-negative"):
            as_rating_matrix(np.array([[-1, 1, 2.0]]))

    def test_rejects_mismatched_y(self):
        with pytest.raises(ValueError):
            as_rating_matrix(np.array([[0, 1], [1, 0]]), y=[1.0])

    def test_rejects_double_ratings(self):
        with pytest.raises(ValueError):
            as_rating_matrix(np.array([[0, 1, 2.0]]), y=[2.0])


class TestEstimator:
    def test_fit_predict_roundtrip(self):
        X = triples()
        est = SGDFactorizer(n_factors=4, epochs=15, learning_rate=0.02,
                            reg_user=0.005, reg_item=0.005, random_state=0)
        est.fit(X)
        assert est.user_factors_.shape[1] == 4
        pred = est.predict(X[:, :2])
        assert pred.shape == (len(X),)
        # training fit should beat predicting the mean
        mean_rmse = np.sqrt(np.mean((X[:, 2] - X[:, 2].mean()) ** 2))
        fit_rmse = np.sqrt(np.mean((X[:, 2] - pred) ** 2))
        assert fit_rmse < mean_rmse

    def test_score_is_negative_rmse(self):
        X = triples()
        est = SGDFactorizer(n_factors=4, epochs=10, random_state=0).fit(X)
        pred = est.predict(X[:, :2])
        expected = -np.sqrt(np.mean((X[:, 2] - pred) ** 2))
        assert est.score(X) == pytest.approx(expected, rel=1e-9)

    def test_unknown_ids_predict_global_mean(self):
        X = triples()
        est = SGDFactorizer(n_factors=4, epochs=5, random_state=0).fit(X)
        pred = est.predict(np.array([[10_000, 3], [2, 10_000]]))
        assert np.allclose(pred, est.global_mean_)

    def test_transform_returns_user_vectors(self):
        X = triples()
        est = SGDFactorizer(n_factors=4, epochs=5, random_state=0).fit(X)
        vecs = est.transform([0, 3])
        assert np.array_equal(vecs[0], est.user_factors_[0])
        assert np.array_equal(vecs[1], est.user_factors_[3])

    def test_not_fitted_error(self):
        with pytest.raises(AttributeError, match="not fitted"):
            SGDFactorizer().predict(np.zeros((1, 2)))

    def test_clone_and_params_roundtrip(self):
        est = SGDFactorizer(n_factors=6, epochs=3, alpha=0.4,
                            n_batch_workers=1, batch_lanes=2)
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        twin.set_params(epochs=7)
        assert twin.epochs == 7 and est.epochs == 3

    def test_random_state_reproducible(self):
        X = triples()
        a = SGDFactorizer(n_factors=4, epochs=5, random_state=3).fit(X)
        b = SGDFactorizer(n_factors=4, epochs=5, random_state=3).fit(X)
        assert np.array_equal(a.user_factors_, b.user_factors_)

    def test_mixed_pool_fit(self):
        X = triples(n=0)
        est = SGDFactorizer(n_factors=4, epochs=4, n_stream_workers=1,
                            n_batch_workers=1, batch_lanes=1, alpha=0.4,
                            random_state=1)
        est.fit(X)
        assert est.n_iter_ == 4

    def test_empty_fit_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            SGDFactorizer().fit(np.zeros((0, 3)))

    def test_target_rmse_early_stop(self):
        X = triples()
        est = SGDFactorizer(n_factors=4, epochs=60, learning_rate=0.02,
                            reg_user=0.0, reg_item=0.0, target_rmse=0.3,
                            random_state=0).fit(X)
        assert est.n_iter_ < 60
        assert -est.score(X) <= 0.3
