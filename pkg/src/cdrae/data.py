"""Rating storage, ingestion, splitting, cold-start masking and synthetic domains."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

ITEMS = "items"
USERS = "users"
AXES = (ITEMS, USERS)


class DataError(ValueError):
    pass


class RatingMatrix:
    """Sparse item x user rating store; a stored 0 never occurs (0 means unobserved).

    ``item_rows`` materializes rows of M = R (m x n) and ``user_rows`` rows of
    U = R^T (n x m), densely, for a chosen subset of indices.
    """

    def __init__(self, n_items: int, n_users: int, items, users, ratings):
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        ratings = np.asarray(ratings, dtype=np.float64).reshape(-1)
        if not (items.size == users.size == ratings.size):
            raise DataError("items, users and ratings must have equal length")
        if n_items < 1 or n_users < 1:
            raise DataError("a rating matrix needs at least one item and one user")
        if items.size:
            if items.min() < 0 or items.max() >= n_items:
                raise DataError("item index out of bounds")
            if users.min() < 0 or users.max() >= n_users:
                raise DataError("user index out of bounds")
            if not np.all(ratings > 0) or not np.all(np.isfinite(ratings)):
                raise DataError("stored ratings must be finite and strictly positive")
            if np.unique(items * n_users + users).size != items.size:
                raise DataError("duplicate (item, user) pair")
        order = np.lexsort((users, items))
        self.n_items = int(n_items)
        self.n_users = int(n_users)
        self.items = items[order]
        self.users = users[order]
        self.ratings = ratings[order]
        for a in (self.items, self.users, self.ratings):
            a.flags.writeable = False
        self._csr = sp.csr_matrix((self.ratings, (self.items, self.users)), shape=self.shape)
        self._csr_t = self._csr.T.tocsr()

    @classmethod
    def from_dense(cls, dense) -> "RatingMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        i, j = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], i, j, dense[i, j])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_items, self.n_users)

    @property
    def nnz(self) -> int:
        return int(self.ratings.size)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / (self.n_items * self.n_users)

    def item_rows(self, idx=None) -> np.ndarray:
        if idx is None:
            return self._csr.toarray()
        return self._csr[np.asarray(idx, dtype=np.int64)].toarray()

    def user_rows(self, idx=None) -> np.ndarray:
        if idx is None:
            return self._csr_t.toarray()
        return self._csr_t[np.asarray(idx, dtype=np.int64)].toarray()

    def rows(self, axis: str, idx=None) -> np.ndarray:
        """Dense rows along ``axis`` ("items" gives M rows, "users" gives U rows)."""
        return self.item_rows(idx) if axis == ITEMS else self.user_rows(idx)

    def axis_size(self, axis: str) -> int:
        return self.n_items if axis == ITEMS else self.n_users

    def dense(self) -> np.ndarray:
        return self.item_rows()

    def mean_rating(self) -> float:
        if self.nnz == 0:
            raise DataError("no observed ratings")
        return float(self.ratings.mean())

    def drop(self, axis: str, idx) -> "RatingMatrix":
        """Copy without any rating on the given entities of ``axis``."""
        keep = ~np.isin(self.items if axis == ITEMS else self.users, np.asarray(idx))
        return RatingMatrix(self.n_items, self.n_users, self.items[keep], self.users[keep],
                            self.ratings[keep])

    def only(self, axis: str, idx) -> "RatingMatrix":
        keep = np.isin(self.items if axis == ITEMS else self.users, np.asarray(idx))
        return RatingMatrix(self.n_items, self.n_users, self.items[keep], self.users[keep],
                            self.ratings[keep])

    def __eq__(self, other):
        if not isinstance(other, RatingMatrix):
            return NotImplemented
        return (self.shape == other.shape
                and np.array_equal(self.items, other.items)
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.ratings, other.ratings))

    def __repr__(self):
        return f"RatingMatrix(items={self.n_items}, users={self.n_users}, nnz={self.nnz})"


@dataclass
class DomainPair:
    """Source and target domains aligned on one shared axis.

    Index ``i`` on the shared axis denotes the same entity in both domains;
    ``shared_ids`` optionally keeps the original (source_id, target_id) pairs.
    """

    source: RatingMatrix
    target: RatingMatrix
    shared_axis: str = ITEMS
    shared_ids: Optional[List[Tuple[str, str]]] = None

    def __post_init__(self):
        if self.shared_axis not in AXES:
            raise DataError(f"shared_axis must be one of {AXES}")
        if self.source.axis_size(self.shared_axis) != self.target.axis_size(self.shared_axis):
            raise DataError(
                f"domains disagree on the number of shared {self.shared_axis}: "
                f"{self.source.axis_size(self.shared_axis)} vs "
                f"{self.target.axis_size(self.shared_axis)}"
            )

    @property
    def other_axis(self) -> str:
        return USERS if self.shared_axis == ITEMS else ITEMS

    @property
    def n_shared(self) -> int:
        return self.source.axis_size(self.shared_axis)

    def source_rows(self, idx=None) -> np.ndarray:
        return self.source.rows(self.shared_axis, idx)

    def target_rows(self, idx=None) -> np.ndarray:
        return self.target.rows(self.shared_axis, idx)

    def with_target(self, target: RatingMatrix) -> "DomainPair":
        return DomainPair(self.source, target, self.shared_axis, self.shared_ids)


# --------------------------------------------------------------------------- ingestion


def normalize(r, r_max: float):
    """Map raw ratings in (0, r_max] onto (0, 1] by r / r_max."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise DataError("ratings must be positive; 0 is reserved for unobserved cells")
    if np.any(r > r_max):
        raise DataError(f"rating exceeds the declared maximum {r_max}")
    out = r / r_max
    return float(out) if out.ndim == 0 else out


def denormalize(x, r_max: float):
    out = np.asarray(x, dtype=np.float64) * r_max
    return float(out) if out.ndim == 0 else out


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_rating_log(path, delimiter: str = ",") -> List[Tuple[str, str, float, int]]:
    """Parse ``user<d>item<d>rating[<d>timestamp]`` lines into (user, item, rating, line_no)."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(delimiter)]
            if line_no == 1 and not _is_number(parts[0]) and not (len(parts) > 2 and _is_number(parts[2])):
                continue  # header: non-numeric first field and no numeric rating
            if len(parts) not in (3, 4) or not parts[0] or not parts[1]:
                raise DataError(f"{path}:{line_no}: expected user{delimiter}item{delimiter}rating")
            try:
                rating = float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{line_no}: rating {parts[2]!r} is not a number") from None
            rows.append((parts[0], parts[1], rating, line_no))
    return rows


@dataclass
class IngestedMatrix:
    matrix: RatingMatrix
    item_ids: List[str]
    user_ids: List[str]


def ingest_ratings(
    path,
    r_max: float = 5.0,
    r_min: Optional[float] = None,
    delimiter: str = ",",
    min_interactions: int = 0,
) -> IngestedMatrix:
    """Load a rating log into a normalized RatingMatrix with contiguous id maps.

    Duplicate (user, item) pairs keep the last occurrence. Users with fewer than
    ``min_interactions`` ratings are dropped.
    """
    r_min = 0.0 if r_min is None else r_min
    rows = read_rating_log(path, delimiter)
    if not rows:
        raise DataError(f"{path}: no ratings")
    last: Dict[Tuple[str, str], float] = {}
    for user, item, rating, line_no in rows:
        if not (r_min <= rating <= r_max) or rating <= 0:
            raise DataError(f"{path}:{line_no}: rating {rating} outside ({r_min}, {r_max}]")
        last[(user, item)] = rating
    return _build_matrix(last, r_max, min_interactions, source=str(path))


def _build_matrix(ratings: Dict[Tuple[str, str], float], r_max, min_interactions, source=""):
    counts: Dict[str, int] = {}
    for user, _ in ratings:
        counts[user] = counts.get(user, 0) + 1
    kept = {k: v for k, v in ratings.items() if counts[k[0]] >= min_interactions}
    if not kept:
        raise DataError(f"{source}: no ratings left after filtering")
    user_index: Dict[str, int] = {}
    item_index: Dict[str, int] = {}
    for user, item in kept:
        user_index.setdefault(user, len(user_index))
        item_index.setdefault(item, len(item_index))
    keys = list(kept)
    matrix = RatingMatrix(
        len(item_index), len(user_index),
        [item_index[i] for _, i in keys], [user_index[u] for u, _ in keys],
        normalize(np.array([kept[k] for k in keys]), r_max),
    )
    return IngestedMatrix(matrix, list(item_index), list(user_index))


def read_alignment(path, delimiter: str = ",") -> List[Tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(delimiter)]
            if len(parts) != 2:
                raise DataError(f"{path}:{line_no}: expected source_id{delimiter}target_id")
            pairs.append((parts[0], parts[1]))
    if not pairs:
        raise DataError(f"{path}: empty alignment")
    return pairs


def ingest_pair(
    source_path,
    target_path,
    shared_axis: str = ITEMS,
    alignment_path=None,
    r_max: float = 5.0,
    delimiter: str = ",",
    min_interactions: int = 5,
) -> DomainPair:
    """Build an aligned DomainPair from two rating logs.

    Only shared entities present in both logs (and in the alignment file, when
    given) are kept. The per-user interaction threshold is applied after this
    restriction: in item mode to each domain's users, in user mode to the
    shared users, who must meet it in both domains.
    """
    if shared_axis not in AXES:
        raise DataError(f"shared_axis must be one of {AXES}")

    def load(path):
        out = {}
        for user, item, rating, line_no in read_rating_log(path, delimiter):
            if rating <= 0 or rating > r_max:
                raise DataError(f"{path}:{line_no}: rating {rating} outside (0, {r_max}]")
            out[(user, item)] = rating
        if not out:
            raise DataError(f"{path}: no ratings")
        return out

    src, tgt = load(source_path), load(target_path)
    pos = 1 if shared_axis == ITEMS else 0

    def entities(d):
        return {k[pos] for k in d}

    if alignment_path is not None:
        align = [(s, t) for s, t in read_alignment(alignment_path, delimiter)
                 if s in entities(src) and t in entities(tgt)]
    else:
        common = entities(src) & entities(tgt)
        align = [(e, e) for e in sorted(common)]

    for _ in range(100):
        s_ids = {s for s, _ in align}
        t_ids = {t for _, t in align}
        src_r = {k: v for k, v in src.items() if k[pos] in s_ids}
        tgt_r = {k: v for k, v in tgt.items() if k[pos] in t_ids}
        if shared_axis == ITEMS:
            src_r = _filter_users(src_r, min_interactions)
            tgt_r = _filter_users(tgt_r, min_interactions)
            s_ok, t_ok = entities(src_r), entities(tgt_r)
            new = [(s, t) for s, t in align if s in s_ok and t in t_ok]
        else:
            sc, tc = _user_counts(src_r), _user_counts(tgt_r)
            new = [(s, t) for s, t in align
                   if sc.get(s, 0) >= min_interactions and tc.get(t, 0) >= min_interactions]
        if new == align:
            break
        align = new
    if len(align) < 2:
        raise DataError("fewer than two shared entities after alignment and filtering")

    s_pos = {s: i for i, (s, _) in enumerate(align)}
    t_pos = {t: i for i, (_, t) in enumerate(align)}
    source = _aligned_matrix(src_r, s_pos, shared_axis, r_max)
    target = _aligned_matrix(tgt_r, t_pos, shared_axis, r_max)
    return DomainPair(source, target, shared_axis, shared_ids=align)


def _user_counts(d):
    counts: Dict[str, int] = {}
    for user, _ in d:
        counts[user] = counts.get(user, 0) + 1
    return counts


def _filter_users(d, threshold):
    counts = _user_counts(d)
    return {k: v for k, v in d.items() if counts[k[0]] >= threshold}


def _aligned_matrix(d, shared_pos, shared_axis, r_max) -> RatingMatrix:
    other: Dict[str, int] = {}
    items, users, vals = [], [], []
    for (user, item), rating in d.items():
        if shared_axis == ITEMS:
            i = shared_pos[item]
            j = other.setdefault(user, len(other))
        else:
            j = shared_pos[user]
            i = other.setdefault(item, len(other))
        items.append(i)
        users.append(j)
        vals.append(rating)
    n_shared = len(shared_pos)
    n_other = max(len(other), 1)
    shape = (n_shared, n_other) if shared_axis == ITEMS else (n_other, n_shared)
    return RatingMatrix(shape[0], shape[1], items, users, normalize(np.array(vals), r_max))


# --------------------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitPlan:
    train: np.ndarray
    test: np.ndarray
    ratio: float
    seed: int
    repeat: int

    def __post_init__(self):
        if np.intersect1d(self.train, self.test).size:
            raise DataError("train and test overlap")


def make_split(n: int, ratio: float, seed: int, repeat: int) -> SplitPlan:
    if not 0.0 < ratio < 1.0:
        raise DataError("ratio must lie in (0, 1)")
    if n < 2:
        raise DataError("need at least two shared entities to split")
    n_train = int(round(ratio * n))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng([seed, repeat]).permutation(n)
    return SplitPlan(np.sort(perm[:n_train]), np.sort(perm[n_train:]), ratio, seed, repeat)


def make_splits(pair: DomainPair, ratio: float = 0.8, repeats: int = 10, seed: int = 0) -> List[SplitPlan]:
    """``repeats`` independent train/test partitions of the shared axis."""
    if repeats < 1:
        raise DataError("repeats must be >= 1")
    return [make_split(pair.n_shared, ratio, seed, r) for r in range(repeats)]


def apply_cold_start(pair: DomainPair, plan: SplitPlan) -> Tuple[DomainPair, RatingMatrix]:
    """Withhold every target rating of the test entities.

    Returns the training pair (source untouched, target without test-entity
    ratings) and the held-out target ratings.
    """
    n = pair.n_shared
    if plan.test.size and (plan.test.min() < 0 or plan.test.max() >= n):
        raise DataError("split indices out of range for this pair")
    train_target = pair.target.drop(pair.shared_axis, plan.test)
    test_view = pair.target.only(pair.shared_axis, plan.test)
    return pair.with_target(train_target), test_view


# --------------------------------------------------------------------------- synthetic domains

MAP_IDENTITY = "identity"
MAP_LINEAR = "linear"
MAP_MLP = "mlp"
RATING_FLOOR = 0.01


@dataclass
class SyntheticSpec:
    m: int = 200
    n: int = 300
    rank: int = 8
    noise: float = 0.02
    source_sparsity: float = 0.90
    target_sparsity: float = 0.95
    cross_map: str = MAP_MLP
    shared_axis: str = ITEMS
    seed: int = 42

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise DataError("m and n must be positive")
        if not 0 < self.rank <= min(self.m, self.n):
            raise DataError("rank must satisfy 0 < rank <= min(m, n)")
        if self.noise < 0:
            raise DataError("noise must be non-negative")
        for s in (self.source_sparsity, self.target_sparsity):
            if not 0.0 <= s < 1.0:
                raise DataError("sparsity must lie in [0, 1)")
        if self.cross_map not in (MAP_IDENTITY, MAP_LINEAR, MAP_MLP):
            raise DataError(f"unknown cross-domain map {self.cross_map!r}")
        if self.shared_axis not in AXES:
            raise DataError(f"shared_axis must be one of {AXES}")


@dataclass
class SyntheticTruth:
    """Ground-truth factors: ratings are scale * shared @ other.T (+ noise).

    In item mode ``shared_*`` are item factors and ``other_*`` user factors;
    in user mode the roles swap.
    """

    spec: SyntheticSpec
    shared_source: np.ndarray
    shared_target: np.ndarray
    other_source: np.ndarray
    other_target: np.ndarray
    scale_source: float
    scale_target: float

    def to_json(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "shared_source": self.shared_source.tolist(),
            "shared_target": self.shared_target.tolist(),
            "other_source": self.other_source.tolist(),
            "other_target": self.other_target.tolist(),
            "scale_source": self.scale_source,
            "scale_target": self.scale_target,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticTruth":
        return cls(
            SyntheticSpec(**d["spec"]),
            np.array(d["shared_source"]), np.array(d["shared_target"]),
            np.array(d["other_source"]), np.array(d["other_target"]),
            d["scale_source"], d["scale_target"],
        )


def _cross_map(latents: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == MAP_IDENTITY:
        return latents.copy()
    k = latents.shape[1]
    if kind == MAP_LINEAR:
        mix = rng.uniform(0.0, 1.0, size=(k, k))
        out = latents @ (mix / mix.sum(axis=0, keepdims=True))
    else:
        hidden = 2 * k
        w1 = rng.normal(0.0, 1.0, size=(k, hidden)) / np.sqrt(k)
        b1 = rng.normal(0.0, 0.5, size=hidden)
        w2 = rng.normal(0.0, 1.0, size=(hidden, k)) / np.sqrt(hidden)
        out = np.maximum(np.maximum(latents @ w1 + b1, 0.0) @ w2, 0.0)
        lo, hi = out.min(axis=0), out.max(axis=0)
        span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
        out = np.where(hi - lo > 1e-12, (out - lo) / span, 0.5)
    return out


def _observe(shape, sparsity, rng, attempts=100) -> np.ndarray:
    mask = rng.uniform(size=shape) >= sparsity
    for axis in (1, 0):
        for _ in range(attempts):
            empty = np.flatnonzero(~mask.any(axis=axis))
            if empty.size == 0:
                break
            if axis == 1:
                mask[empty] = rng.uniform(size=(empty.size, shape[1])) >= sparsity
            else:
                mask[:, empty] = rng.uniform(size=(shape[0], empty.size)) >= sparsity
        else:
            raise DataError(
                f"sparsity {sparsity} leaves an entity without observations after {attempts} re-draws"
            )
    return mask


def generate_synthetic(spec: SyntheticSpec) -> Tuple[DomainPair, SyntheticTruth]:
    """Two coupled low-rank domains linked by a hidden map of the shared factors.

    The shared factors of the target are a fixed transform (identity, random
    linear mix, or random 2-layer ReLU net) of the source ones; the other axis
    has independent factors per domain. Every row and column of each domain
    keeps at least one observation.
    """
    rng = np.random.default_rng(spec.seed)
    n_shared, n_other = (spec.m, spec.n) if spec.shared_axis == ITEMS else (spec.n, spec.m)
    shared_s = rng.uniform(0.0, 1.0, size=(n_shared, spec.rank))
    other_s = rng.uniform(0.0, 1.0, size=(n_other, spec.rank))
    other_t = rng.uniform(0.0, 1.0, size=(n_other, spec.rank))
    shared_t = _cross_map(shared_s, spec.cross_map, rng)

    def domain(shared, other, sparsity):
        clean = shared @ other.T
        scale = 1.0 / clean.max()
        vals = clean * scale
        if spec.noise > 0:
            vals = vals + rng.normal(0.0, spec.noise, size=vals.shape)
        vals = np.clip(vals, RATING_FLOOR, 1.0)
        mask = _observe(vals.shape, sparsity, rng)
        dense = np.where(mask, vals, 0.0)
        if spec.shared_axis == USERS:
            dense = dense.T
        return RatingMatrix.from_dense(dense), float(scale)

    source, sc_s = domain(shared_s, other_s, spec.source_sparsity)
    target, sc_t = domain(shared_t, other_t, spec.target_sparsity)
    pair = DomainPair(source, target, spec.shared_axis)
    return pair, SyntheticTruth(spec, shared_s, shared_t, other_s, other_t, sc_s, sc_t)


# --------------------------------------------------------------------------- pair directories

PAIR_META = "pair.json"
TRUTH_FILE = "truth.json"


def _write_ratings(path, m: RatingMatrix):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id", "rating"])
        for i, j, r in zip(m.items, m.users, m.ratings):
            w.writerow([int(j), int(i), repr(float(r))])


def _read_ratings(path, n_items, n_users) -> RatingMatrix:
    rows = read_rating_log(path)
    try:
        users = [int(u) for u, _, _, _ in rows]
        items = [int(i) for _, i, _, _ in rows]
    except ValueError as exc:
        raise DataError(f"{path}: pair files must use integer indices") from exc
    return RatingMatrix(n_items, n_users, items, users, [r for _, _, r, _ in rows])


def _meta(pair: DomainPair) -> dict:
    return {
        "format": "cdrae-pair",
        "version": 1,
        "shared_axis": pair.shared_axis,
        "source_shape": list(pair.source.shape),
        "target_shape": list(pair.target.shape),
    }


def write_pair(directory, pair: DomainPair, truth: Optional[SyntheticTruth] = None):
    """Write ``source.csv``, ``target.csv`` and ``truth.json`` (synthetic) or ``pair.json``."""
    os.makedirs(directory, exist_ok=True)
    _write_ratings(os.path.join(directory, "source.csv"), pair.source)
    _write_ratings(os.path.join(directory, "target.csv"), pair.target)
    meta = _meta(pair)
    if truth is not None:
        meta["truth"] = truth.to_json()
        name = TRUTH_FILE
    else:
        if pair.shared_ids is not None:
            meta["shared_ids"] = [list(p) for p in pair.shared_ids]
        name = PAIR_META
    with open(os.path.join(directory, name), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def read_pair(directory) -> Tuple[DomainPair, Optional[SyntheticTruth]]:
    meta_path = os.path.join(directory, TRUTH_FILE)
    if not os.path.exists(meta_path):
        meta_path = os.path.join(directory, PAIR_META)
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    source = _read_ratings(os.path.join(directory, "source.csv"), *meta["source_shape"])
    target = _read_ratings(os.path.join(directory, "target.csv"), *meta["target_shape"])
    ids = meta.get("shared_ids")
    pair = DomainPair(source, target, meta["shared_axis"],
                      [tuple(p) for p in ids] if ids else None)
    truth = SyntheticTruth.from_json(meta["truth"]) if "truth" in meta else None
    return pair, truth
