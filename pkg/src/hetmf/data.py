"""Rating data ingestion, shuffling, block bucketing, and synthetic instances.

Ratings live in coordinate form: three parallel arrays (users, items,
ratings) plus remap tables bridging original ids and dense 0-based indices.
After grid construction the triples are re-bucketed block-major so that one
block epoch is a single contiguous scan.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

CACHE_MAGIC = b"HMF1"

REGION_STREAM = 0
REGION_BATCH = 1


class DataError(ValueError):
    """Malformed input file or inconsistent rating data."""


class GridError(ValueError):
    """Invalid block-grid geometry (bad cuts, wrong region tags, ...)."""


@dataclass
class RatingMatrix:
    """Sparse rating matrix in coordinate form with dense 0-based indices.

    user_ids / item_ids map dense index -> original id; user_index /
    item_index are the inverse maps.  Synthetic data keeps the identity
    mapping (ids == indices).
    """

    n_users: int
    n_items: int
    users: np.ndarray       # int32, dense user index per triple
    items: np.ndarray       # int32, dense item index per triple
    ratings: np.ndarray     # float64
    user_ids: np.ndarray = field(default=None)   # dense -> original
    item_ids: np.ndarray = field(default=None)
    user_index: dict = field(default=None)        # original -> dense
    item_index: dict = field(default=None)

    def __post_init__(self):
        if self.user_ids is None:
            self.user_ids = np.arange(self.n_users, dtype=np.int64)
        if self.item_ids is None:
            self.item_ids = np.arange(self.n_items, dtype=np.int64)
        if self.user_index is None:
            self.user_index = {int(x): i for i, x in enumerate(self.user_ids)}
        if self.item_index is None:
            self.item_index = {int(x): i for i, x in enumerate(self.item_ids)}

    @property
    def nnz(self) -> int:
        return len(self.ratings)

    def validate(self) -> None:
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise DataError("triple arrays have mismatched lengths")
        if self.nnz:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise DataError("item index out of range")
        if not np.all(np.isfinite(self.ratings)):
            raise DataError("non-finite rating value")


def parse_triples(path):
    """Parse a text file of "user item rating" lines.

    Lines starting with '#' and blank lines are ignored.  Duplicate
    (user, item) pairs keep the last occurrence.  Returns original-id
    arrays (int64, int64, float64).
    """
    users, items, vals = [], [], []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'user item rating', got {line!r}")
            try:
                u = int(parts[0])
                v = int(parts[1])
                r = float(parts[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if not np.isfinite(r):
                raise DataError(f"{path}:{lineno}: non-finite rating {parts[2]!r}")
            users.append(u)
            items.append(v)
            vals.append(r)
    u = np.asarray(users, dtype=np.int64)
    v = np.asarray(items, dtype=np.int64)
    r = np.asarray(vals, dtype=np.float64)
    if len(u):
        # keep-last dedup on (user, item)
        pairs = np.stack([u, v], axis=1)
        _, last = np.unique(pairs[::-1], axis=0, return_index=True)
        keep = np.sort(len(u) - 1 - last)
        u, v, r = u[keep], v[keep], r[keep]
    return u, v, r


def load_ratings(path) -> RatingMatrix:
    """Load a rating file and remap original ids to dense 0-based indices."""
    u, v, r = parse_triples(path)
    user_ids, users = np.unique(u, return_inverse=True)
    item_ids, items = np.unique(v, return_inverse=True)
    return RatingMatrix(
        n_users=len(user_ids),
        n_items=len(item_ids),
        users=users.astype(np.int32),
        items=items.astype(np.int32),
        ratings=r,
        user_ids=user_ids,
        item_ids=item_ids,
    )


def align_ratings(testset: RatingMatrix, train: RatingMatrix):
    """Map a held-out set into the training index space.

    Entries whose original user or item id never appeared in training
    cannot be scored; they are dropped and counted.  Returns
    (users, items, ratings, n_skipped) with train-space indices.
    """
    users = np.empty(testset.nnz, np.int64)
    items = np.empty(testset.nnz, np.int64)
    for i in range(testset.nnz):
        users[i] = train.user_index.get(int(testset.user_ids[testset.users[i]]), -1)
        items[i] = train.item_index.get(int(testset.item_ids[testset.items[i]]), -1)
    ok = (users >= 0) & (items >= 0)
    skipped = int((~ok).sum())
    return (users[ok].astype(np.int32), items[ok].astype(np.int32),
            testset.ratings[ok], skipped)


def shuffle_triples(matrix: RatingMatrix, seed: int) -> RatingMatrix:
    """Return the same ratings in a seed-deterministic permuted order."""
    perm = np.random.default_rng(seed).permutation(matrix.nnz)
    return RatingMatrix(
        n_users=matrix.n_users,
        n_items=matrix.n_items,
        users=matrix.users[perm],
        items=matrix.items[perm],
        ratings=matrix.ratings[perm],
        user_ids=matrix.user_ids,
        item_ids=matrix.item_ids,
        user_index=matrix.user_index,
        item_index=matrix.item_index,
    )


@dataclass
class BlockGrid:
    """Block decomposition of a rating matrix, triples bucketed block-major.

    Block id = row_band * n_col_bands + col_band; block_ptr is the CSR-style
    offset array into the bucketed triple arrays.  region_of_row tags each
    row band REGION_STREAM or REGION_BATCH; sub_row_parent (optional) maps
    each fine row band to the coarse row group it belongs to, used when
    batch-region rows are pre-split for fine-grained stealing.
    """

    n_rows: int
    n_cols: int
    row_cuts: np.ndarray
    col_cuts: np.ndarray
    region_of_row: np.ndarray          # int8 per row band
    sub_row_parent: np.ndarray | None  # int64 per row band, or None
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    block_ptr: np.ndarray

    @property
    def n_row_bands(self) -> int:
        return len(self.row_cuts) - 1

    @property
    def n_col_bands(self) -> int:
        return len(self.col_cuts) - 1

    @property
    def n_blocks(self) -> int:
        return self.n_row_bands * self.n_col_bands

    @property
    def nnz(self) -> int:
        return len(self.ratings)

    def block_id(self, row_band: int, col_band: int) -> int:
        return row_band * self.n_col_bands + col_band

    def block_range(self, block: int):
        return int(self.block_ptr[block]), int(self.block_ptr[block + 1])

    def block_nnz(self, block: int) -> int:
        lo, hi = self.block_range(block)
        return hi - lo

    def block_counts(self) -> np.ndarray:
        return np.diff(self.block_ptr)

    def row_span(self, row_band: int):
        return int(self.row_cuts[row_band]), int(self.row_cuts[row_band + 1])

    def col_span(self, col_band: int):
        return int(self.col_cuts[col_band]), int(self.col_cuts[col_band + 1])


def _check_cuts(cuts, extent, axis):
    cuts = np.asarray(cuts, dtype=np.int64)
    if len(cuts) < 2:
        raise GridError(f"{axis} cuts need at least two boundaries")
    if cuts[0] != 0 or cuts[-1] != extent:
        raise GridError(f"{axis} cuts must start at 0 and end at {extent}")
    if np.any(np.diff(cuts) <= 0):
        raise GridError(f"{axis} cuts must be strictly ascending")
    return cuts


def build_grid(matrix: RatingMatrix, row_cuts, col_cuts,
               region_of_row=None, sub_row_parent=None) -> BlockGrid:
    """Bucket a rating matrix into the grid induced by the given cuts.

    Triples are stably re-ordered so each block occupies one contiguous
    range; the relative order inside a block is preserved from the input.
    """
    row_cuts = _check_cuts(row_cuts, matrix.n_users, "row")
    col_cuts = _check_cuts(col_cuts, matrix.n_items, "column")
    n_row_bands = len(row_cuts) - 1
    n_col_bands = len(col_cuts) - 1

    if region_of_row is None:
        region = np.full(n_row_bands, REGION_STREAM, dtype=np.int8)
    else:
        region = np.asarray(region_of_row, dtype=np.int8)
        if len(region) != n_row_bands:
            raise GridError("region_of_row length must match row band count")
    if sub_row_parent is not None:
        sub_row_parent = np.asarray(sub_row_parent, dtype=np.int64)
        if len(sub_row_parent) != n_row_bands:
            raise GridError("sub_row_parent length must match row band count")

    rb = np.searchsorted(row_cuts, matrix.users, side="right") - 1
    cb = np.searchsorted(col_cuts, matrix.items, side="right") - 1
    bid = rb * n_col_bands + cb
    order = np.argsort(bid, kind="stable")
    counts = np.bincount(bid, minlength=n_row_bands * n_col_bands)
    ptr = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])

    return BlockGrid(
        n_rows=matrix.n_users,
        n_cols=matrix.n_items,
        row_cuts=row_cuts,
        col_cuts=col_cuts,
        region_of_row=region,
        sub_row_parent=sub_row_parent,
        users=np.ascontiguousarray(matrix.users[order]),
        items=np.ascontiguousarray(matrix.items[order]),
        ratings=np.ascontiguousarray(matrix.ratings[order]),
        block_ptr=ptr,
    )


def save_cache(path, matrix: RatingMatrix) -> None:
    """Write the triples to a binary cache: HMF1, u64 dims/nnz, fixed triples.

    Only dense indices are stored; a cache round trip yields identity remap
    tables, so caches are meant for matrices whose ids are already dense.
    """
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<QQQ", matrix.n_users, matrix.n_items, matrix.nnz))
        fh.write(matrix.users.astype("<u8").tobytes())
        fh.write(matrix.items.astype("<u8").tobytes())
        fh.write(matrix.ratings.astype("<f8").tobytes())


def load_cache(path) -> RatingMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise DataError(f"{path}: not a rating cache (bad magic {magic!r})")
        n_users, n_items, nnz = struct.unpack("<QQQ", fh.read(24))
        users = np.frombuffer(fh.read(8 * nnz), dtype="<u8").astype(np.int32)
        items = np.frombuffer(fh.read(8 * nnz), dtype="<u8").astype(np.int32)
        ratings = np.frombuffer(fh.read(8 * nnz), dtype="<f8").astype(np.float64)
    matrix = RatingMatrix(int(n_users), int(n_items), users, items, ratings)
    matrix.validate()
    return matrix


def synthetic_ratings(n_users=500, n_items=500, rank=8, density=0.05,
                      noise=0.1, seed=0, factor_scale=1.0) -> RatingMatrix:
    """Low-rank synthetic instance: ratings = dot(A[u], B[v]) + N(0, noise).

    Ground-truth factor entries are uniform on [0, factor_scale/sqrt(rank)],
    the same family the trainer initializes from, so a freshly initialized
    model starts near the right scale and fixed learning rates behave.  Ids
    are already dense (identity remap).
    """
    rng = np.random.default_rng(seed)
    total = n_users * n_items
    target = min(int(round(density * total)), total)
    chosen = np.empty(0, dtype=np.int64)
    while len(chosen) < target:
        draw = rng.integers(0, total, size=int((target - len(chosen)) * 1.3) + 16)
        chosen = np.unique(np.concatenate([chosen, draw]))
    chosen = rng.permutation(chosen)[:target]
    users = (chosen // n_items).astype(np.int32)
    items = (chosen % n_items).astype(np.int32)
    hi = factor_scale / np.sqrt(rank)
    a = rng.uniform(0.0, hi, size=(n_users, rank))
    b = rng.uniform(0.0, hi, size=(n_items, rank))
    ratings = np.einsum("ij,ij->i", a[users], b[items])
    if noise > 0:
        ratings = ratings + rng.normal(0.0, noise, size=target)
    return RatingMatrix(n_users, n_items, users, items, ratings)
