"""Small model builders shared by the tests."""

import numpy as np
from scipy.special import logit

from drfo import dro
from drfo.data import PartitionedDataset, ReconstructedDataset
from drfo.dro import FairRegularizer
from drfo.mf import MFModel


def item_model(item_probs, n_users=4, dim=2):
    """Model whose prediction depends only on the item: p(u, v) = item_probs[v]."""
    item_probs = np.asarray(item_probs, dtype=float)
    return MFModel(np.zeros((n_users, dim)), np.zeros((len(item_probs), dim)), np.zeros(n_users),
                   logit(item_probs), np.zeros(1))


def random_model(n_users, n_items, dim=3, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return MFModel(scale * rng.normal(size=(n_users, dim)), scale * rng.normal(size=(n_items, dim)),
                   scale * rng.normal(size=n_users), scale * rng.normal(size=n_items),
                   np.array([0.1]), seed=seed)


def matched_population(rng, perturb=0.0):
    """Rows of a random population with a reconstruction whose row-level prior
    matches the truth (``perturb`` = 0) or is off by at most ``perturb``.

    Returns per-row true and reconstructed attributes.  Matching is exact:
    users are flipped in cross-group pairs with equal interaction counts.
    """
    n = int(rng.integers(30, 200))
    counts = rng.choice([5, 10, 20, 40], size=n)
    s = (rng.random(n) < rng.uniform(0.2, 0.8)).astype(int)
    s[:2] = (0, 1)
    s_hat = s.copy()
    for c in np.unique(counts):
        g0 = rng.permutation(np.flatnonzero((s == 0) & (counts == c)))
        g1 = rng.permutation(np.flatnonzero((s == 1) & (counts == c)))
        k = int(rng.integers(0, min(len(g0), len(g1)) + 1))
        s_hat[g0[:k]] = 1
        s_hat[g1[:k]] = 0
    if perturb > 0:
        total = counts.sum()
        budget = int(perturb * total)
        for u in rng.permutation(n):
            if counts[u] <= budget and rng.random() < 0.5 and s_hat[u] == s[u]:
                s_hat[u] = 1 - s_hat[u]
                budget -= counts[u]
    return np.repeat(s, counts), np.repeat(s_hat, counts)


# six rows, one per user and item; rows 0-1 known, rows 2-5 missing
TOY_ATTR = np.array([0, 1, 0, 0, 1, 1])
TOY_RECON = np.array([-1, -1, 0, 0, 1, 1])


def toy_recon(recon=TOY_RECON, status=(0, 0, 1, 1, 1, 1), true_attr=TOY_ATTR):
    n = len(status)
    base = PartitionedDataset.from_arrays(np.arange(n), np.arange(n), np.ones(n), true_attr,
                                          n, n, np.asarray(status))
    missing = np.asarray(status) != 0
    return ReconstructedDataset(base, recon, np.where(missing, 0.9, np.nan))


def extreme_value(a, center, rho, sign):
    """Closed-form max of sign * a.q over the simplex within TV rho of center:
    move rho mass off the worst supported rows onto the best row."""
    v = sign * np.asarray(a)
    q = center.copy()
    budget = rho
    for j in np.argsort(v, kind="stable"):
        take = min(q[j], budget)
        q[j] -= take
        budget -= take
    q[np.argmax(v)] += rho - budget
    return float(np.dot(sign * v, q))


def worst_case(pred, term, rho):
    """max over q in the ball of |c_s| for a single-block term."""
    b = term.blocks[0]
    const = dro.constraint_value(pred, term) - b.eta * np.dot(b.q, pred[b.rows])
    a = b.eta * pred[b.rows]
    w = b.ambiguity.center.weights
    hi = const + extreme_value(a, w, rho, 1.0)
    lo = const + extreme_value(a, w, rho, -1.0)
    return max(abs(hi), abs(lo)), hi, lo


def run_ascent(rec, pred_model, lam, rho, ascent, steps=200, alpha_q=20.0):
    terms = dro.make_terms(rec, (lam, lam), ("m",), {"m": (rho, rho)}, learnable=True)
    reg = FairRegularizer(rec.base, terms, alpha_q=alpha_q, ascent=ascent)
    reg.start(pred_model)
    for _ in range(steps):
        reg.after_step(pred_model)
    return terms, reg


def toy_records(rng):
    n = int(rng.integers(4, 7))
    status = np.array([0, 0] + [1] * (n - 2))
    true_attr = np.array([0, 1] + list(rng.integers(0, 2, n - 2)))
    recon = np.array([-1, -1] + list(rng.permutation([0, 1] + list(rng.integers(0, 2, n - 4)))))
    return toy_recon(recon, status, true_attr), item_model(rng.uniform(0.05, 0.95, n), n_users=n)
