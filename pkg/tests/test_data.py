import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdrae.data import (
    ITEMS, USERS, DataError, DomainPair, RatingMatrix, SyntheticSpec, apply_cold_start, denormalize,
    generate_synthetic, ingest_pair, ingest_ratings, make_split, make_splits, normalize,
    read_pair, read_rating_log, write_pair,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_rating_matrix_rows_and_transpose():
    dense = np.array([[0.2, 0.0, 0.6], [0.0, 1.0, 0.0]])
    m = RatingMatrix.from_dense(dense)
    assert m.shape == (2, 3) and m.nnz == 3
    np.testing.assert_array_equal(m.item_rows(), dense)
    np.testing.assert_array_equal(m.user_rows([2, 0]), dense.T[[2, 0]])
    assert m.sparsity == pytest.approx(0.5)
    assert m.mean_rating() == pytest.approx(0.6)


@pytest.mark.parametrize("args", [
    (2, 2, [0], [2], [0.5]),      # user out of range
    (2, 2, [0], [0], [0.0]),      # stored zero
    (2, 2, [0, 0], [1, 1], [0.5, 0.6]),  # duplicate
    (2, 2, [0], [0, 1], [0.5]),   # ragged
])
def test_rating_matrix_rejects_invalid(args):
    with pytest.raises(DataError):
        RatingMatrix(*args)


def test_rating_matrix_immutable():
    m = RatingMatrix(2, 2, [0], [1], [0.5])
    with pytest.raises(ValueError):
        m.ratings[0] = 0.7


def test_drop_and_only_partition_entries():
    rng = np.random.default_rng(0)
    dense = np.where(rng.uniform(size=(6, 5)) < 0.5, rng.uniform(0.1, 1, (6, 5)), 0.0)
    m = RatingMatrix.from_dense(dense)
    a, b = m.drop(ITEMS, [1, 4]), m.only(ITEMS, [1, 4])
    assert a.nnz + b.nnz == m.nnz
    assert not a.item_rows([1, 4]).any()
    np.testing.assert_array_equal(b.item_rows([1, 4]), dense[[1, 4]])
    np.testing.assert_array_equal(m.drop(USERS, [0]).user_rows([0]), 0 * dense[:, [0]].T)


def test_normalize_examples():
    np.testing.assert_allclose(normalize([5, 3, 1], 5), [1.0, 0.6, 0.2])
    assert denormalize(normalize(4, 5), 5) == pytest.approx(4)
    with pytest.raises(DataError):
        normalize(0, 5)
    with pytest.raises(DataError):
        normalize(6, 5)


def test_ingest_three_line_file(tmp_path):
    p = write(tmp_path, "r.csv", "u1,i1,5\nu2,i1,3\nu1,i2,1\n")
    ing = ingest_ratings(p)
    assert ing.matrix.nnz == 3
    assert sorted(ing.matrix.ratings.tolist()) == pytest.approx([0.2, 0.6, 1.0])
    assert ing.user_ids == ["u1", "u2"] and ing.item_ids == ["i1", "i2"]


def test_ingest_header_timestamp_and_duplicates(tmp_path):
    p = write(tmp_path, "r.csv", "user,item,rating,ts\n1,10,2,100\n1,10,4,200\n2,11,5,300\n")
    ing = ingest_ratings(p)
    assert ing.matrix.nnz == 2
    i, u = ing.item_ids.index("10"), ing.user_ids.index("1")
    assert ing.matrix.item_rows([i])[0, u] == pytest.approx(0.8)  # last occurrence wins


def test_ingest_errors_report_line_numbers(tmp_path):
    with pytest.raises(DataError, match=":2:"):
        ingest_ratings(write(tmp_path, "a.csv", "1,1,3\n1,2\n"))
    with pytest.raises(DataError, match=":1:"):
        ingest_ratings(write(tmp_path, "b.csv", "1,1,7\n"))
    with pytest.raises(DataError, match="no ratings"):
        ingest_ratings(write(tmp_path, "c.csv", ""))
    with pytest.raises(DataError, match="not a number"):
        ingest_ratings(write(tmp_path, "d.csv", "1,1,3\n1,2,x\n"))


def test_ingest_min_interactions(tmp_path):
    p = write(tmp_path, "r.csv", "a,1,3\na,2,3\nb,1,4\n")
    ing = ingest_ratings(p, min_interactions=2)
    assert ing.user_ids == ["a"] and ing.matrix.nnz == 2


def test_ingest_pair_item_level(tmp_path):
    src = write(tmp_path, "s.csv", "".join(f"s{u},m{i},{1 + (u + i) % 5}\n" for u in range(6) for i in range(4)))
    # target shares m0..m2 only; user t9 has too few ratings
    tgt = write(tmp_path, "t.csv", "".join(f"t{u},m{i},4\n" for u in range(3) for i in range(3)) + "t9,m0,2\n")
    pair = ingest_pair(src, tgt, ITEMS, min_interactions=3)
    assert pair.n_shared == 3
    assert pair.source.shape == (3, 6) and pair.target.shape == (3, 3)
    assert [s for s, _ in pair.shared_ids] == ["m0", "m1", "m2"]


def test_ingest_pair_user_level_with_alignment(tmp_path):
    src = write(tmp_path, "s.csv", "".join(f"a{u},x{i},3\n" for u in range(4) for i in range(5)))
    tgt = write(tmp_path, "t.csv", "".join(f"b{u},y{i},2\n" for u in range(4) for i in range(5)) + "b3,y9,5\n")
    aln = write(tmp_path, "al.csv", "a0,b0\na1,b1\na3,b3\nzz,b2\n")
    pair = ingest_pair(src, tgt, USERS, aln, min_interactions=5)
    assert pair.shared_axis == USERS and pair.n_shared == 3
    assert pair.shared_ids == [("a0", "b0"), ("a1", "b1"), ("a3", "b3")]
    assert pair.target.n_items == 6  # y0..y4 plus y9


@pytest.mark.parametrize("n,ratio", [(10, 0.8), (7, 0.5), (200, 0.8), (3, 0.9)])
def test_split_is_disjoint_cover(n, ratio):
    plan = make_split(n, ratio, 1, 0)
    assert np.intersect1d(plan.train, plan.test).size == 0
    np.testing.assert_array_equal(np.union1d(plan.train, plan.test), np.arange(n))
    assert plan.train.size == min(max(round(ratio * n), 1), n - 1)


def test_splits_differ_by_repeat_and_reproduce():
    pair, _ = generate_synthetic(SyntheticSpec(m=20, n=15, rank=2, seed=1))
    plans = make_splits(pair, repeats=10, seed=3)
    assert len(plans) == 10
    assert len({tuple(p.test) for p in plans}) > 1
    again = make_splits(pair, repeats=10, seed=3)
    assert all(np.array_equal(a.test, b.test) for a, b in zip(plans, again))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), axis=st.sampled_from([ITEMS, USERS]))
def test_cold_start_removes_all_test_ratings(seed, axis):
    pair, _ = generate_synthetic(SyntheticSpec(m=12, n=9, rank=2, source_sparsity=0.5,
                                               target_sparsity=0.6, shared_axis=axis, seed=seed))
    plan = make_split(pair.n_shared, 0.75, seed, 0)
    train, held = apply_cold_start(pair, plan)
    assert train.source == pair.source
    assert not train.target_rows(plan.test).any()
    np.testing.assert_array_equal(train.target_rows(plan.train), pair.target_rows(plan.train))
    np.testing.assert_array_equal(held.rows(axis, plan.test), pair.target_rows(plan.test))
    assert held.nnz + train.target.nnz == pair.target.nnz


def test_synthetic_reference_shapes_and_determinism():
    spec = SyntheticSpec()
    pair, truth = generate_synthetic(spec)
    assert pair.source.shape == pair.target.shape == (200, 300)
    # frozen from a first run of the generator on the pinned spec
    assert (pair.source.nnz, pair.target.nnz) == (6062, 2979)
    again, _ = generate_synthetic(spec)
    assert again.source == pair.source and again.target == pair.target
    for m in (pair.source, pair.target):
        d = m.dense()
        assert d.any(axis=0).all() and d.any(axis=1).all()
        assert m.ratings.min() >= 0.01 and m.ratings.max() <= 1.0
    assert truth.shared_target.shape == (200, 8)


def test_synthetic_noiseless_is_exact_low_rank():
    spec = SyntheticSpec(m=30, n=20, rank=3, noise=0.0, cross_map="identity", seed=5)
    pair, truth = generate_synthetic(spec)
    clean = truth.scale_source * truth.shared_source @ truth.other_source.T
    d = pair.source.dense()
    mask = d > 0
    np.testing.assert_allclose(d[mask], np.clip(clean, 0.01, 1)[mask], rtol=1e-12)
    np.testing.assert_array_equal(truth.shared_target, truth.shared_source)


def test_synthetic_user_axis_orientation():
    pair, truth = generate_synthetic(SyntheticSpec(m=10, n=14, rank=2, shared_axis=USERS, seed=2))
    assert pair.n_shared == 14 and pair.source.shape == (10, 14)
    assert truth.shared_source.shape == (14, 2)


@pytest.mark.parametrize("kwargs", [dict(rank=0), dict(noise=-1.0), dict(source_sparsity=1.0),
                                    dict(cross_map="cubic"), dict(shared_axis="rows")])
def test_synthetic_spec_validation(kwargs):
    with pytest.raises(DataError):
        SyntheticSpec(**kwargs)


def test_pair_directory_round_trip(tmp_path):
    pair, truth = generate_synthetic(SyntheticSpec(m=15, n=12, rank=2, seed=9))
    write_pair(tmp_path / "p", pair, truth)
    assert sorted(f.name for f in (tmp_path / "p").iterdir()) == ["source.csv", "target.csv", "truth.json"]
    back, t2 = read_pair(tmp_path / "p")
    assert back.source == pair.source and back.target == pair.target
    np.testing.assert_array_equal(t2.shared_target, truth.shared_target)
    write_pair(tmp_path / "q", pair, truth)
    for name in ("source.csv", "target.csv", "truth.json"):
        assert (tmp_path / "p" / name).read_bytes() == (tmp_path / "q" / name).read_bytes()
    meta = json.loads((tmp_path / "p" / "truth.json").read_text())
    assert meta["format"] == "cdrae-pair" and meta["version"] == 1


def test_read_rating_log_keeps_string_ids_on_first_line(tmp_path):
    rows = read_rating_log(write(tmp_path, "r.csv", "alice,book,4\nbob,book,2\n"))
    assert [r[0] for r in rows] == ["alice", "bob"]


def test_domain_pair_rejects_misaligned():
    a = RatingMatrix(3, 2, [0], [0], [0.5])
    b = RatingMatrix(4, 2, [0], [0], [0.5])
    with pytest.raises(DataError):
        DomainPair(a, b, ITEMS)
    DomainPair(a, b, USERS)
