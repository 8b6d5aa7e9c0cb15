import numpy as np
import pytest

from hetmf import kernels
from hetmf.data import RatingMatrix


@pytest.fixture(scope="session", autouse=True)
def compiled_kernels():
    # compile once so timing-sensitive tests never pay the JIT cost
    kernels.warmup(4)
    kernels.warmup(8)


def random_matrix(n_users, n_items, nnz, seed, lo=1.0, hi=5.0):
    """Random coordinate matrix with unique (user, item) pairs."""
    rng = np.random.default_rng(seed)
    total = n_users * n_items
    assert nnz <= total
    chosen = rng.permutation(total)[:nnz]
    return RatingMatrix(
        n_users, n_items,
        (chosen // n_items).astype(np.int32),
        (chosen % n_items).astype(np.int32),
        rng.uniform(lo, hi, size=nnz),
    )
