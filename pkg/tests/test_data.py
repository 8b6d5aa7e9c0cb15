import numpy as np
import pytest

from hetmf.data import (DataError, GridError, build_grid, load_cache,
                        load_ratings, parse_triples, save_cache,
                        shuffle_triples, synthetic_ratings)

from conftest import random_matrix


def write(tmp_path, text, name="ratings.txt"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestLoadRatings:
    def test_three_lines_remap(self, tmp_path):
        path = write(tmp_path, "1 2 5.0\n1 1 3.0\n2 2 4.0\n")
        m = load_ratings(path)
        assert (m.n_users, m.n_items, m.nnz) == (2, 2, 3)
        # original ids {1,2} map onto dense {0,1}
        assert set(m.user_index) == {1, 2}
        assert set(m.item_index) == {1, 2}

    def test_four_by_four_nine_ratings(self, tmp_path):
        # 9 ratings over 4 users x 4 items
        lines = ["1 2 5.0", "1 3 2.5", "2 1 4.0", "2 4 1.0", "3 2 3.0",
                 "3 3 2.0", "4 1 5.0", "4 3 4.0", "4 4 2.5"]
        m = load_ratings(write(tmp_path, "\n".join(lines)))
        assert (m.n_users, m.n_items, m.nnz) == (4, 4, 9)

    def test_empty_file(self, tmp_path):
        m = load_ratings(write(tmp_path, ""))
        assert (m.n_users, m.n_items, m.nnz) == (0, 0, 0)

    def test_comments_and_blanks_ignored(self, tmp_path):
        m = load_ratings(write(tmp_path, "# header\n\n1 1 2.0\n  \n# x\n2 2 3.0\n"))
        assert m.nnz == 2

    def test_duplicate_keeps_last(self, tmp_path):
        m = load_ratings(write(tmp_path, "1 1 2.0\n1 1 9.0\n"))
        assert m.nnz == 1
        assert m.ratings[0] == 9.0

    def test_malformed_line_reports_number(self, tmp_path):
        path = write(tmp_path, "1 1 2.0\nbad line here extra\n")
        with pytest.raises(DataError, match=":2"):
            load_ratings(path)

    def test_non_numeric_rating(self, tmp_path):
        with pytest.raises(DataError, match=":1"):
            load_ratings(write(tmp_path, "1 1 abc\n"))

    def test_non_finite_rating(self, tmp_path):
        with pytest.raises(DataError, match="non-finite"):
            load_ratings(write(tmp_path, "1 1 inf\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="cannot read"):
            load_ratings(tmp_path / "nope.txt")

    def test_remap_round_trip(self, tmp_path):
        ids = [(10, 7), (42, 7), (10, 99), (500, 3)]
        text = "\n".join(f"{u} {v} 1.0" for u, v in ids)
        m = load_ratings(write(tmp_path, text))
        for orig_u, orig_v in ids:
            assert int(m.user_ids[m.user_index[orig_u]]) == orig_u
            assert int(m.item_ids[m.item_index[orig_v]]) == orig_v


class TestShuffle:
    def test_empty(self):
        m = random_matrix(5, 5, 0, 1)
        s = shuffle_triples(m, 3)
        assert s.nnz == 0

    def test_deterministic(self):
        m = random_matrix(40, 40, 300, 2)
        a = shuffle_triples(m, 7)
        b = shuffle_triples(m, 7)
        assert np.array_equal(a.users, b.users)
        assert np.array_equal(a.items, b.items)
        assert np.array_equal(a.ratings, b.ratings)

    def test_same_multiset_different_order(self):
        # sort-and-compare oracle over a large instance
        m = random_matrix(200, 200, 10_000, 3)
        a = shuffle_triples(m, 1)
        b = shuffle_triples(m, 2)
        assert not np.array_equal(a.users, b.users)

        def canon(x):
            order = np.lexsort((x.items, x.users))
            return x.users[order], x.items[order], x.ratings[order]

        for left, right in zip(canon(a), canon(b)):
            assert np.array_equal(left, right)

    def test_dims_unchanged(self):
        m = random_matrix(13, 9, 40, 4)
        s = shuffle_triples(m, 1)
        assert (s.n_users, s.n_items, s.nnz) == (13, 9, 40)


class TestBuildGrid:
    def test_four_by_four_cell_membership(self):
        # unit-width bands: the triple at (0, 0) must land in the first block
        m = random_matrix(4, 4, 16, 5)
        grid = build_grid(m, [0, 1, 2, 3, 4], [0, 1, 2, 3, 4])
        assert grid.n_blocks == 16
        b = grid.block_id(0, 0)
        lo, hi = grid.block_range(b)
        assert hi - lo == 1
        assert grid.users[lo] == 0 and grid.items[lo] == 0

    def test_single_block(self):
        m = random_matrix(30, 20, 100, 6)
        grid = build_grid(m, [0, 30], [0, 20])
        assert grid.n_blocks == 1
        assert grid.block_nnz(0) == 100

    def test_membership_matches_bruteforce_scan(self):
        # independent per-triple scan over a ragged 3x5 grid
        m = random_matrix(100, 100, 2_000, 7)
        row_cuts = [0, 17, 60, 100]
        col_cuts = [0, 5, 30, 31, 77, 100]
        grid = build_grid(m, row_cuts, col_cuts)

        expected = np.zeros(grid.n_blocks, dtype=int)
        for u, v in zip(m.users, m.items):
            r = next(i for i in range(3) if row_cuts[i] <= u < row_cuts[i + 1])
            c = next(j for j in range(5) if col_cuts[j] <= v < col_cuts[j + 1])
            expected[r * 5 + c] += 1
        assert np.array_equal(grid.block_counts(), expected)
        assert grid.block_counts().sum() == m.nnz

        for b in range(grid.n_blocks):
            lo, hi = grid.block_range(b)
            r, c = divmod(b, 5)
            assert np.all(grid.users[lo:hi] >= row_cuts[r])
            assert np.all(grid.users[lo:hi] < row_cuts[r + 1])
            assert np.all(grid.items[lo:hi] >= col_cuts[c])
            assert np.all(grid.items[lo:hi] < col_cuts[c + 1])

    def test_partition_complete_random_grids(self):
        rng = np.random.default_rng(8)
        for trial in range(10):
            m = random_matrix(50, 60, 700, 100 + trial)
            rc = np.unique(rng.integers(1, 50, size=3)).tolist()
            cc = np.unique(rng.integers(1, 60, size=4)).tolist()
            grid = build_grid(m, [0] + rc + [50], [0] + cc + [60])
            assert grid.block_counts().sum() == m.nnz

    def test_preserves_input_order_within_block(self):
        m = random_matrix(10, 10, 50, 9)
        grid = build_grid(m, [0, 10], [0, 10])
        assert np.array_equal(grid.ratings, m.ratings)

    @pytest.mark.parametrize("row_cuts,col_cuts", [
        ([0, 5, 3, 10], [0, 10]),      # not ascending
        ([1, 10], [0, 10]),            # does not start at 0
        ([0, 9], [0, 10]),             # does not end at extent
        ([0], [0, 10]),                # too short
    ])
    def test_invalid_cuts(self, row_cuts, col_cuts):
        m = random_matrix(10, 10, 20, 10)
        with pytest.raises(GridError):
            build_grid(m, row_cuts, col_cuts)

    def test_region_length_checked(self):
        m = random_matrix(10, 10, 20, 11)
        with pytest.raises(GridError, match="region_of_row"):
            build_grid(m, [0, 5, 10], [0, 10], region_of_row=[0])


class TestCache:
    def test_round_trip(self, tmp_path):
        m = random_matrix(25, 35, 222, 12)
        path = tmp_path / "grid.bin"
        save_cache(path, m)
        back = load_cache(path)
        assert (back.n_users, back.n_items, back.nnz) == (25, 35, 222)
        assert np.array_equal(back.users, m.users)
        assert np.array_equal(back.items, m.items)
        assert np.array_equal(back.ratings, m.ratings)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 24)
        with pytest.raises(DataError, match="magic"):
            load_cache(path)


class TestSynthetic:
    def test_shape_and_density(self):
        m = synthetic_ratings(100, 120, rank=4, density=0.05, noise=0.0, seed=1)
        assert (m.n_users, m.n_items) == (100, 120)
        assert m.nnz == round(0.05 * 100 * 120)
        m.validate()

    def test_unique_pairs(self):
        m = synthetic_ratings(50, 50, rank=2, density=0.3, seed=2)
        pairs = set(zip(m.users.tolist(), m.items.tolist()))
        assert len(pairs) == m.nnz

    def test_deterministic(self):
        a = synthetic_ratings(60, 60, seed=3)
        b = synthetic_ratings(60, 60, seed=3)
        assert np.array_equal(a.ratings, b.ratings)

    def test_low_rank_values_bounded(self):
        # positive factor entries cap zero-noise ratings at rank * (1/sqrt(rank))^2
        m = synthetic_ratings(40, 40, rank=3, density=0.9, noise=0.0, seed=4)
        assert m.ratings.min() >= 0.0
        assert m.ratings.max() <= 1.0
        noisy = synthetic_ratings(40, 40, rank=3, density=0.9, noise=0.2, seed=4)
        assert not np.array_equal(noisy.ratings, m.ratings)


def test_parse_triples_dedup_order(tmp_path):
    path = tmp_path / "d.txt"
    path.write_text("5 5 1.0\n6 6 2.0\n5 5 3.0\n")
    u, v, r = parse_triples(path)
    assert len(u) == 2
    assert r[np.where(u == 5)[0][0]] == 3.0
