"""Synthetic rating populations with a binary user attribute.

Stand-in for datasets that cannot be redistributed or fetched.  Users choose
items and rate them under a low-rank model in which the attribute shifts both
which items a user consumes (so it can be inferred from histories) and how the
user rates them.  Group mean ratings are calibrated to given targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .ingest import RatingTable


@dataclass(frozen=True)
class PopulationSpec:
    n_users: int = 800
    n_items: int = 1000
    attr1_fraction: float = 3144 / 4297       # share of users with s=1
    mean_interactions: tuple = (198.0, 227.0)  # per user, for s=0 / s=1
    mean_rating: tuple = (0.5866, 0.5661)     # positive rate for s=0 / s=1
    latent_dim: int = 8
    choice_signal: float = 0.35               # attribute effect on item choice
    rating_signal: float = 0.25               # attribute effect on item taste
    user_bias_scale: float = 0.8
    item_bias_scale: float = 1.2
    taste_scale: float = 1.5
    min_interactions: int = 50


# Presets.  Per-user interaction counts, group shares and group positive rates
# follow MovieLens-1M and Tenrec after filtering; user and item counts are
# scaled down for desk-sized runs.
PRESETS = {
    "ml1m-desk": PopulationSpec(),
    "tenrec-desk": PopulationSpec(
        n_users=800, n_items=1200, attr1_fraction=2299 / 5407,
        mean_interactions=(99.0, 147.0), mean_rating=(0.4849, 0.4676),
        choice_signal=0.1),
    # small population for smoke tests and demos
    "tiny": PopulationSpec(n_users=150, n_items=200, mean_interactions=(40.0, 46.0),
                           min_interactions=20),
    "ml1m-full": PopulationSpec(
        n_users=4297, n_items=3244, mean_interactions=(198.0, 227.0)),
}


def generate(spec, seed=0):
    """Draw a :class:`RatingTable` with binary ratings from ``spec``."""
    # separate stream so that a mask plan drawn with the same integer seed
    # does not reuse this permutation
    rng = np.random.default_rng([seed, 0x5E7])
    n, m, k = spec.n_users, spec.n_items, spec.latent_dim
    n1 = int(round(spec.attr1_fraction * n))
    attr = np.zeros(n, dtype=np.int8)
    attr[rng.permutation(n)[:n1]] = 1
    sign = 2.0 * attr - 1.0

    lean = rng.standard_normal(m)
    popularity = rng.standard_normal(m)
    item_vec = rng.standard_normal((m, k)) / np.sqrt(k)
    user_vec = rng.standard_normal((n, k)) / np.sqrt(k)
    user_bias = spec.user_bias_scale * rng.standard_normal(n)
    item_bias = spec.item_bias_scale * rng.standard_normal(m)

    mean_n = np.where(attr == 1, spec.mean_interactions[1], spec.mean_interactions[0])
    extra = np.maximum(mean_n - spec.min_interactions, 1.0)
    counts = spec.min_interactions + rng.poisson(rng.gamma(2.0, extra / 2.0))
    counts = np.minimum(counts, m).astype(int)

    users, items = [], []
    for u in range(n):
        logits = popularity + spec.choice_signal * sign[u] * lean + 2.0 * item_vec @ user_vec[u]
        gumbel = rng.gumbel(size=m)
        chosen = np.argpartition(-(logits + gumbel), counts[u] - 1)[: counts[u]]
        users.append(np.full(counts[u], u))
        items.append(np.sort(chosen))
    users = np.concatenate(users)
    items = np.concatenate(items)

    base = (user_bias[users] + item_bias[items]
            + spec.taste_scale * np.sum(user_vec[users] * item_vec[items], axis=1) * np.sqrt(k)
            + spec.rating_signal * sign[users] * lean[items])
    row_attr = attr[users]
    offset = np.zeros(2)
    for s in (0, 1):
        z = base[row_attr == s]
        target = spec.mean_rating[s]
        offset[s] = brentq(lambda c: expit(z + c).mean() - target, -20.0, 20.0)
    p = expit(base + offset[row_attr])
    ratings = (rng.random(len(p)) < p).astype(np.float64)
    return RatingTable(users.astype(np.int64), items.astype(np.int64), ratings, attr,
                       np.arange(n), np.arange(m))


def preset(name, seed=0):
    try:
        spec = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return generate(spec, seed)
