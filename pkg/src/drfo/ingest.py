"""Rating ingestion: MovieLens parsing, binarization, k-core filtering,
train/validation/test splitting and attribute masking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AttrStatus, PartitionedDataset, SplitDataset, UsageError

GENDER_CODE = {"M": 0, "F": 1}

CANONICAL_HEADER = ("user", "item", "rating", "status", "s")
STATUS_NAMES = {AttrStatus.KNOWN: "known", AttrStatus.RECONSTRUCTABLE: "reconstructable",
                AttrStatus.FORBIDDEN: "forbidden"}


class ParseError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class IntegrityError(ValueError):
    pass


class EmptyResultError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RatingTable:
    """Interactions over a dense id space with one sensitive attribute per user.

    ``user_ids`` / ``item_ids`` map dense indices back to the source ids.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_attr: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    @property
    def n_users(self):
        return len(self.user_ids)

    @property
    def n_items(self):
        return len(self.item_ids)

    def __len__(self):
        return len(self.users)


@dataclass(frozen=True)
class MaskPlan:
    retention_ratio: float
    forbid_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.retention_ratio <= 1.0:
            raise UsageError("retention_ratio must lie in [0,1]")
        if not 0.0 <= self.forbid_fraction <= 1.0:
            raise UsageError("forbid_fraction must lie in [0,1]")


def _split_fields(line, path, lineno, n):
    parts = line.rstrip("\r\n").split("::")
    if len(parts) != n:
        raise ParseError(path, lineno, f"expected {n} '::'-separated fields, got {len(parts)}")
    return parts


def parse_movielens(ratings_path, users_path):
    """Read MovieLens-1M ``ratings.dat`` and ``users.dat``.

    Gender is coded M -> 0, F -> 1.  Users and items are re-indexed densely in
    ascending order of their source ids; only users appearing in the ratings
    file are kept.  Ratings stay on the raw 1-5 scale.
    """
    genders = {}
    with open(users_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            uid, gender, *_ = _split_fields(line, users_path, lineno, 5)
            if gender not in GENDER_CODE:
                raise ParseError(users_path, lineno, f"unknown gender {gender!r}")
            try:
                genders[int(uid)] = GENDER_CODE[gender]
            except ValueError:
                raise ParseError(users_path, lineno, f"bad user id {uid!r}") from None

    raw_u, raw_i, raw_r = [], [], []
    with open(ratings_path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            fields = _split_fields(line, ratings_path, lineno, 4)
            try:
                u, i, r, _ = (int(x) for x in fields)
            except ValueError:
                raise ParseError(ratings_path, lineno, "non-integer field") from None
            if u not in genders:
                raise IntegrityError(f"{ratings_path}:{lineno}: user {u} missing from {users_path}")
            raw_u.append(u)
            raw_i.append(i)
            raw_r.append(r)

    raw_u = np.asarray(raw_u, dtype=np.int64)
    raw_i = np.asarray(raw_i, dtype=np.int64)
    user_ids, users = np.unique(raw_u, return_inverse=True)
    item_ids, items = np.unique(raw_i, return_inverse=True)
    attr = np.array([genders[int(u)] for u in user_ids], dtype=np.int8)
    return RatingTable(users.astype(np.int64), items.astype(np.int64),
                       np.asarray(raw_r, dtype=np.float64), attr, user_ids, item_ids)


def binarize(table, threshold=3):
    """Rating becomes 1 iff the raw rating is strictly greater than ``threshold``."""
    ratings = (np.asarray(table.ratings) > threshold).astype(np.float64)
    return RatingTable(table.users, table.items, ratings, table.user_attr,
                       table.user_ids, table.item_ids)


def _reindex(table, keep):
    users, items = table.users[keep], table.items[keep]
    u_keep, new_u = np.unique(users, return_inverse=True)
    i_keep, new_i = np.unique(items, return_inverse=True)
    return RatingTable(new_u.astype(np.int64), new_i.astype(np.int64), table.ratings[keep],
                       table.user_attr[u_keep], table.user_ids[u_keep], table.item_ids[i_keep])


def k_core_filter(table, user_k, item_k):
    """Drop users with < user_k and items with < item_k interactions until nothing changes."""
    if user_k < 1 or item_k < 1:
        raise UsageError("user_k and item_k must be >= 1")
    keep = np.ones(len(table), dtype=bool)
    while True:
        u_deg = np.bincount(table.users[keep], minlength=table.n_users)
        i_deg = np.bincount(table.items[keep], minlength=table.n_items)
        ok = keep & (u_deg[table.users] >= user_k) & (i_deg[table.items] >= item_k)
        if np.array_equal(ok, keep):
            break
        keep = ok
    if not keep.any():
        raise EmptyResultError(f"{user_k}/{item_k}-core filtering removed every interaction")
    return _reindex(table, keep)


def split_sizes(n, ratios):
    """Largest-remainder apportionment of ``n`` rows; ties go to the earlier split."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios <= 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise UsageError("ratios must be positive and sum to 1")
    quotas = n * ratios
    sizes = np.floor(quotas).astype(int)
    rem = quotas - sizes
    order = sorted(range(len(ratios)), key=lambda j: (-round(rem[j], 12), j))
    for j in order[: n - sizes.sum()]:
        sizes[j] += 1
    return tuple(int(x) for x in sizes)


def split(table, ratios=(0.7, 0.15, 0.15), seed=0):
    """Global random interaction-level split into train/validation/test."""
    n_train, n_val, _ = split_sizes(len(table), ratios)
    perm = np.random.default_rng(seed).permutation(len(table))
    parts = np.split(perm, [n_train, n_train + n_val])

    def view(idx):
        idx = np.sort(idx)
        return PartitionedDataset.from_arrays(
            table.users[idx], table.items[idx], table.ratings[idx],
            table.user_attr[table.users[idx]], table.n_users, table.n_items)

    return SplitDataset(*(view(p) for p in parts), user_attr=np.array(table.user_attr, dtype=np.int8))


def draw_user_status(n_users, plan):
    """Per-user status: exactly round(retention * n_users) users keep their attribute,
    round(forbid_fraction * masked) of the rest are FORBIDDEN."""
    rng = np.random.default_rng(plan.seed)
    n_keep = int(math.floor(plan.retention_ratio * n_users + 0.5))
    perm = rng.permutation(n_users)
    status = np.full(n_users, AttrStatus.RECONSTRUCTABLE, dtype=np.int8)
    status[perm[:n_keep]] = AttrStatus.KNOWN
    masked = perm[n_keep:]
    n_forbid = int(math.floor(plan.forbid_fraction * len(masked) + 0.5))
    status[rng.permutation(masked)[:n_forbid]] = AttrStatus.FORBIDDEN
    return status


def apply_mask_plan(split_ds, plan):
    """Mask attributes per user in train and validation; test keeps everything known."""
    user_status = draw_user_status(split_ds.n_users, plan)
    train = split_ds.train.with_status(user_status[split_ds.train.users])
    val = split_ds.validation.with_status(user_status[split_ds.validation.users])
    test = split_ds.test.with_status(np.zeros(len(split_ds.test), dtype=np.int8))
    return SplitDataset(train, val, test, user_attr=split_ds.user_attr)


# -- canonical files -------------------------------------------------------

def write_canonical(ds, path):
    """Tab-separated ``user item rating status s``; ``s`` is blank unless known."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(CANONICAL_HEADER)
        for u, i, r, st, a in zip(ds.users, ds.items, ds.ratings, ds.status, ds.attr):
            w.writerow((int(u), int(i), int(r), STATUS_NAMES[AttrStatus(int(st))],
                        int(a) if st == AttrStatus.KNOWN else ""))


def read_canonical(path, n_users, n_items, user_attr=None):
    """Inverse of :func:`write_canonical`.  ``user_attr`` restores ground truth."""
    names = {v: k for k, v in STATUS_NAMES.items()}
    cols = {k: [] for k in CANONICAL_HEADER}
    with open(path, newline="") as fh:
        rd = csv.reader(fh, delimiter="\t")
        header = next(rd, None)
        if tuple(header or ()) != CANONICAL_HEADER:
            raise ParseError(path, 1, f"bad header {header!r}")
        for lineno, row in enumerate(rd, 2):
            if len(row) != 5 or row[3] not in names:
                raise ParseError(path, lineno, f"malformed row {row!r}")
            for k, v in zip(CANONICAL_HEADER, row):
                cols[k].append(v)
    users = np.asarray(cols["user"], dtype=np.int64)
    status = np.asarray([names[x] for x in cols["status"]], dtype=np.int8)
    known_s = np.asarray([int(x) if x else -1 for x in cols["s"]], dtype=np.int8)
    if user_attr is not None:
        true_attr = np.asarray(user_attr, dtype=np.int8)[users]
    else:
        true_attr = known_s
    ds = PartitionedDataset(users, np.asarray(cols["item"], dtype=np.int64),
                            np.asarray(cols["rating"], dtype=np.float64), status,
                            known_s, true_attr, n_users, n_items)
    return ds


def write_user_attrs(user_attr, path):
    with open(path, "w") as fh:
        fh.write("user\ts\n")
        for u, s in enumerate(user_attr):
            fh.write(f"{u}\t{int(s)}\n")


def read_user_attrs(path):
    with open(path) as fh:
        if fh.readline().strip().split("\t") != ["user", "s"]:
            raise ParseError(path, 1, "bad header")
        rows = [line.split("\t") for line in fh if line.strip()]
    out = np.full(len(rows), -1, dtype=np.int8)
    for u, s in rows:
        out[int(u)] = int(s)
    return out
