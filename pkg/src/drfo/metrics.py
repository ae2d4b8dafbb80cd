"""Demographic-parity and accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class GroupWeights:
    """Mixing weights of the known / reconstructable / forbidden parts, per s."""

    eta_k: tuple
    eta_r: tuple
    eta_b: tuple

    @property
    def eta_m(self):
        return tuple(r + b for r, b in zip(self.eta_r, self.eta_b))


@dataclass
class FairnessReport:
    dp: float
    rmse: float
    per_group_deviation: dict = field(default_factory=dict)


def mad(predictions, attrs):
    """|mean(pred | s=0) - mean(pred | s=1)|."""
    predictions = np.asarray(predictions, dtype=np.float64)
    attrs = np.asarray(attrs)
    g0, g1 = predictions[attrs == 0], predictions[attrs == 1]
    if len(g0) == 0 or len(g1) == 0:
        raise MetricError("both groups need at least one prediction")
    return float(abs(g0.mean() - g1.mean()))


def rmse(predictions, labels):
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.size == 0:
        raise MetricError("rmse of an empty set")
    return float(np.sqrt(np.mean((predictions - np.asarray(labels, dtype=np.float64)) ** 2)))


def group_expectation(model, ds, record_indices):
    """Average predicted rating over the given rows of ``ds``."""
    idx = np.asarray(record_indices, dtype=np.int64)
    if idx.size == 0:
        raise MetricError("expectation over an empty index set")
    return float(model.predict(ds.users[idx], ds.items[idx]).mean())


def eta_fractions(counts):
    """Fractions count / sum(counts) as floats whose left-to-right sum is exactly 1.

    Every weight is the correctly rounded exact ratio except the last non-zero
    one, which is the floating-point complement of the weights before it.
    """
    counts = [int(c) for c in counts]
    total = sum(counts)
    if total <= 0:
        raise MetricError("all counts are zero; cannot form weights")
    last = max(j for j, c in enumerate(counts) if c > 0)
    out = [float(Fraction(c, total)) for c in counts]
    acc = 0.0
    for x in out[:last]:
        acc += x
    out[last] = 1.0 - acc
    return tuple(out)


def eta_weights(counts):
    """Weights from per-s counts ``(|D_k^s|, |D_r^s|, |D_b^s|)``.

    ``counts`` maps s -> triple (a pair is read as (k, r) with an empty b).
    Each triple is normalised with exact rational arithmetic so the three
    weights sum to one.
    """
    eta = {"k": [], "r": [], "b": []}
    for s in (0, 1):
        c = tuple(int(x) for x in counts[s])
        if len(c) == 2:
            c = c + (0,)
        if sum(c) <= 0:
            raise MetricError(f"no rows at all for s={s}; cannot form weights")
        fk, fr, fb = eta_fractions(c)
        eta["k"].append(fk)
        eta["r"].append(fr)
        eta["b"].append(fb)
    return GroupWeights(tuple(eta["k"]), tuple(eta["r"]), tuple(eta["b"]))


def group_deviation_report(model, ds, true_attr, known_mask):
    """|E_group[pred] - E_all[pred]| for {s=0,1} x {known, unknown}.

    ``true_attr`` and ``known_mask`` are row-aligned with ``ds``.  Absent
    groups map to ``None``.
    """
    pred = model.predict(ds.users, ds.items)
    true_attr = np.asarray(true_attr)
    known_mask = np.asarray(known_mask, dtype=bool)
    overall = float(pred.mean())
    out = {"global_mean": overall}
    for s in (0, 1):
        for tag, mask in (("known", known_mask), ("unknown", ~known_mask)):
            sel = (true_attr == s) & mask
            out[(s, tag)] = float(abs(pred[sel].mean() - overall)) if sel.any() else None
    return out


def fairness_report(model, ds, true_attr, known_mask=None):
    pred = model.predict(ds.users, ds.items)
    dev = {} if known_mask is None else group_deviation_report(model, ds, true_attr, known_mask)
    return FairnessReport(mad(pred, true_attr), rmse(pred, ds.ratings), dev)
