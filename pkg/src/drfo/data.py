"""Shared interaction data model.

Datasets are stored column-wise as read-only numpy arrays; one row per
(user, item) interaction.  Each row carries an attribute status that says
whether its user's sensitive attribute is known, missing but reconstructable,
or missing with reconstruction forbidden.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Optional

import numpy as np


class AttrStatus(IntEnum):
    KNOWN = 0
    RECONSTRUCTABLE = 1
    FORBIDDEN = 2


PARTITIONS = ("k", "r", "b", "m")


class UsageError(ValueError):
    """Raised when an operation is called with invalid arguments."""


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    rating: int
    status: AttrStatus
    attr: Optional[int] = None  # payload of a KNOWN status


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True).reshape(-1)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PartitionedDataset:
    """Interactions split into known (k), reconstructable (r) and forbidden (b) rows.

    ``attr`` holds the observed attribute (-1 unless the row is KNOWN).
    ``true_attr`` holds the ground-truth attribute when the data source has
    it; it is only read by evaluation code and the Oracle trainer.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    status: np.ndarray
    attr: np.ndarray
    true_attr: np.ndarray
    n_users: int
    n_items: int

    def __post_init__(self):
        n = len(self.users)
        for name, dtype in (("users", np.int64), ("items", np.int64),
                            ("ratings", np.float64), ("status", np.int8),
                            ("attr", np.int8), ("true_attr", np.int8)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
            if len(getattr(self, name)) != n:
                raise UsageError(f"column {name!r} has length {len(getattr(self, name))}, expected {n}")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise UsageError("user id out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise UsageError("item id out of range")
            if not np.all((self.ratings == 0) | (self.ratings == 1)):
                raise UsageError("ratings must be binary")
            known = self.status == AttrStatus.KNOWN
            if np.any(self.attr[known] < 0) or np.any(self.attr[~known] != -1):
                raise UsageError("attr must be set exactly on KNOWN rows")

    @classmethod
    def from_arrays(cls, users, items, ratings, true_attr, n_users=None, n_items=None,
                    status=None):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        true_attr = np.asarray(true_attr, dtype=np.int8)
        if status is None:
            status = np.zeros(len(users), dtype=np.int8)
        status = np.asarray(status, dtype=np.int8)
        attr = np.where(status == AttrStatus.KNOWN, true_attr, -1)
        if n_users is None:
            n_users = int(users.max()) + 1 if len(users) else 0
        if n_items is None:
            n_items = int(items.max()) + 1 if len(items) else 0
        return cls(users, items, ratings, status, attr, true_attr, n_users, n_items)

    def __len__(self):
        return len(self.users)

    @property
    def index_k(self):
        return np.flatnonzero(self.status == AttrStatus.KNOWN)

    @property
    def index_r(self):
        return np.flatnonzero(self.status == AttrStatus.RECONSTRUCTABLE)

    @property
    def index_b(self):
        return np.flatnonzero(self.status == AttrStatus.FORBIDDEN)

    @property
    def index_m(self):
        return np.flatnonzero(self.status != AttrStatus.KNOWN)

    def group_index(self, s):
        return np.flatnonzero((self.status == AttrStatus.KNOWN) & (self.attr == s))

    def records(self) -> Iterator[InteractionRecord]:
        for i in range(len(self)):
            st = AttrStatus(int(self.status[i]))
            yield InteractionRecord(int(self.users[i]), int(self.items[i]), int(self.ratings[i]),
                                    st, int(self.attr[i]) if st == AttrStatus.KNOWN else None)

    def with_status(self, status):
        """Copy with a new per-row status vector; ratings and ids untouched."""
        status = np.asarray(status, dtype=np.int8)
        attr = np.where(status == AttrStatus.KNOWN, self.true_attr, -1)
        return PartitionedDataset(self.users, self.items, self.ratings, status, attr,
                                  self.true_attr, self.n_users, self.n_items)

    def unmasked(self):
        """All rows KNOWN with their true attribute (used by the Oracle)."""
        if np.any(self.true_attr < 0):
            raise UsageError("true attributes unavailable for some rows")
        return self.with_status(np.zeros(len(self), dtype=np.int8))

    def user_status(self):
        """Per-user status (-1 for users without rows); assumes per-user consistency."""
        out = np.full(self.n_users, -1, dtype=np.int8)
        out[self.users] = self.status
        return out


@dataclass(frozen=True, eq=False)
class ReconstructedDataset:
    """A partitioned dataset plus reconstructed attributes for its missing rows.

    ``recon_attr`` and ``recon_confidence`` are row-aligned with ``base``;
    rows in k carry -1 / nan.
    """

    base: PartitionedDataset
    recon_attr: np.ndarray
    recon_confidence: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "recon_attr", _frozen(self.recon_attr, np.int8))
        object.__setattr__(self, "recon_confidence", _frozen(self.recon_confidence, np.float64))
        missing = self.base.status != AttrStatus.KNOWN
        if len(self.recon_attr) != len(self.base) or len(self.recon_confidence) != len(self.base):
            raise UsageError("reconstruction arrays must be row-aligned with the base dataset")
        if np.any(~np.isin(self.recon_attr[missing], (0, 1))):
            raise UsageError("every missing row needs a reconstructed attribute in {0,1}")
        conf = self.recon_confidence[missing]
        if np.any(np.isnan(conf)) or np.any((conf < 0) | (conf > 1)):
            raise UsageError("confidence must lie in [0,1] on missing rows")

    @classmethod
    def from_user_arrays(cls, base, user_attr, user_conf):
        """Broadcast per-user reconstructions onto the rows of ``base``."""
        user_attr = np.asarray(user_attr)
        user_conf = np.asarray(user_conf, dtype=np.float64)
        missing = base.status != AttrStatus.KNOWN
        attr = np.where(missing, user_attr[base.users], -1)
        conf = np.where(missing, user_conf[base.users], np.nan)
        return cls(base, attr, conf)

    def __len__(self):
        return len(self.base)


def group_subset(ds, partition, s):
    """Row indices of ``partition`` whose known or reconstructed attribute is ``s``.

    ``partition`` is one of ``"k"``, ``"r"``, ``"b"`` or ``"m"`` (r and b).
    Known rows are filtered on their observed attribute, missing rows on the
    reconstructed one.  Output is ascending.
    """
    if partition not in PARTITIONS:
        raise UsageError(f"unknown partition tag {partition!r}; expected one of {PARTITIONS}")
    if isinstance(ds, ReconstructedDataset):
        base, recon = ds.base, ds.recon_attr
    else:
        base, recon = ds, None
    if partition == "k":
        return base.group_index(s)
    if recon is None:
        raise UsageError(f"partition {partition!r} needs a ReconstructedDataset")
    if partition == "r":
        rows = base.status == AttrStatus.RECONSTRUCTABLE
    elif partition == "b":
        rows = base.status == AttrStatus.FORBIDDEN
    else:
        rows = base.status != AttrStatus.KNOWN
    return np.flatnonzero(rows & (recon == s))


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: PartitionedDataset
    validation: PartitionedDataset
    test: PartitionedDataset
    user_attr: np.ndarray = field(default=None)  # ground-truth attribute per user

    @property
    def n_users(self):
        return self.train.n_users

    @property
    def n_items(self):
        return self.train.n_items

    def user_status(self):
        """Per-user mask status taken from the train and validation rows."""
        st = self.train.user_status()
        val = self.validation.user_status()
        return np.where(st >= 0, st, val)
