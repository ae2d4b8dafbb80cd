"""Sensitive-attribute reconstruction from interaction histories and
estimation of the per-group reconstruction error rates (TV radii)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import AttrStatus, ReconstructedDataset

log = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AttrClassifier:
    weights: np.ndarray
    intercept: float
    iterations: int = 0
    grad_norm: float = 0.0

    def predict_proba(self, X):
        return expit(np.asarray(X @ self.weights).ravel() + self.intercept)


@dataclass
class RhoEstimate:
    rho: np.ndarray                 # P(S_hat != s | S = s) for s = 0, 1
    source_counts: np.ndarray       # confusion[s, s_hat]
    relaxed: Optional[np.ndarray] = None

    def recompute(self):
        c = self.source_counts
        return np.array([c[s, 1 - s] / c[s].sum() for s in (0, 1)])


def build_features(ds, n_users=None):
    """Binary user x item indicator matrix (CSR) of the rows of ``ds``."""
    n_users = ds.n_users if n_users is None else n_users
    X = sp.csr_matrix((np.ones(len(ds)), (ds.users, ds.items)), shape=(n_users, ds.n_items))
    X.data[:] = 1.0
    return X


def train_classifier(X, y, reg_strength=1.0, seed=0, tol=1e-6, max_iter=5000, balanced=True):
    """L2-regularised logistic regression by gradient descent.

    Minimises the weighted mean log-loss + reg_strength / (2n) * ||w||^2
    (intercept not penalised) with step 1/L.  ``balanced`` weights each class
    by n / (2 n_class) so both groups get comparable error rates.  Stops when
    the gradient norm drops below ``tol``.
    """
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("attribute classifier needs both classes among known users")
    X = sp.csr_matrix(X, dtype=np.float64)
    n, d = X.shape
    n1 = y.sum()
    cw = np.where(y == 1, n / (2 * n1), n / (2 * (n - n1))) if balanced else np.ones(n)
    rng = np.random.default_rng(seed)
    w = 1e-3 * rng.standard_normal(d)
    b = 0.0
    # Lipschitz bound of the gradient: max(cw) (||X||_2^2 + n) / (4n) + reg / n
    sq = sp.linalg.norm(X, "fro") ** 2 + n
    step = 1.0 / (cw.max() * sq / (4 * n) + reg_strength / n)
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        p = expit(X @ w + b)
        r = cw * (p - y) / n
        gw = X.T @ r + reg_strength / n * w
        gb = r.sum()
        gnorm = float(np.sqrt(gw @ gw + gb * gb))
        if gnorm < tol:
            break
        w -= step * gw
        b -= step * gb
    return AttrClassifier(w, float(b), it, gnorm)


def predict_attrs(clf, X):
    """(s_hat, confidence); p = 0.5 maps to s_hat = 0."""
    p = clf.predict_proba(X)
    s_hat = (p > 0.5).astype(np.int8)
    return s_hat, np.maximum(p, 1 - p)


def estimate_rho(clf, X, y, weights=None, margin=0.0):
    """Per-group error rate of ``clf`` on held-out users.

    ``weights`` (e.g. interaction counts) turns the user-level rate into an
    interaction-weighted one.  ``margin`` is added before clipping to [0,1].
    """
    y = np.asarray(y).astype(int)
    s_hat, _ = predict_attrs(clf, X)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    counts = np.zeros((2, 2))
    np.add.at(counts, (y, s_hat.astype(int)), w)
    for s in (0, 1):
        if counts[s].sum() == 0:
            raise DegenerateDataError(
                f"no held-out users with s={s}; widen the held-out set or use rho=1 for this group")
    est = RhoEstimate(np.zeros(2), counts)
    est.rho = np.clip(est.recompute() + margin, 0.0, 1.0)
    return est


def group_tv(true_attr, recon_attr, s):
    """Exact TV distance between the uniform distributions over rows with S=s
    and over rows with S_hat=s, returned as a Fraction.

    With a = |S=s|, b = |S_hat=s| and m = |S=s, S_hat=s| the distance is
    (m |1/a - 1/b| + (a - m)/a + (b - m)/b) / 2.
    """
    t = np.asarray(true_attr) == s
    r = np.asarray(recon_attr) == s
    a, b, m = int(t.sum()), int(r.sum()), int((t & r).sum())
    if a == 0 or b == 0:
        raise DegenerateDataError(f"no rows with S=s or S_hat=s for s={s}")
    return (m * abs(Fraction(1, a) - Fraction(1, b)) + Fraction(a - m, a) + Fraction(b - m, b)) / 2


def relaxed_rho(rho, prior_s, prior_shat):
    """Radius for mismatched priors: rho + k |P(S_hat=s) - P(S=s)|, clipped at 1,
    with k = P(S=s, S_hat=s) / (P(S=s) P(S_hat=s)) and P(S=s, S_hat=s) = P(S=s)(1 - rho)."""
    r = np.asarray(rho.rho if isinstance(rho, RhoEstimate) else rho, dtype=np.float64)
    ps = np.asarray(prior_s, dtype=np.float64)
    ph = np.asarray(prior_shat, dtype=np.float64)
    if np.any((ps <= 0) | (ps >= 1) | (ph <= 0) | (ph >= 1)):
        raise ValueError("priors must lie strictly inside (0,1)")
    k = ps * (1 - r) / (ps * ph)
    out = np.minimum(1.0, r + k * np.abs(ph - ps))
    if isinstance(rho, RhoEstimate):
        rho.relaxed = out
    return out


@dataclass
class Reconstruction:
    """Per-user reconstruction plus the radius estimate."""

    user_attr: np.ndarray            # s_hat per user (-1 for known users)
    user_confidence: np.ndarray      # nan for known users, 0 for forbidden users
    rho: RhoEstimate
    classifier: AttrClassifier
    holdout_users: np.ndarray = field(default=None)

    def apply(self, ds):
        return ReconstructedDataset.from_user_arrays(ds, self.user_attr, self.user_confidence)


def reconstruct(split_ds, holdout_fraction=0.2, reg_strength=1.0, seed=0,
                interaction_weighted=False, margin=0.0, balanced=True):
    """Train on 80% of known users (stratified), estimate rho on the rest,
    reconstruct reconstructable users and randomly assign forbidden users.

    Forbidden users draw s_hat from the known users' attribute frequencies and
    get confidence 0.
    """
    rng = np.random.default_rng(seed)
    train = split_ds.train
    status = split_ds.user_status()
    X = build_features(train)
    known_users = np.flatnonzero(status == AttrStatus.KNOWN)
    y_all = np.asarray(split_ds.user_attr)
    hold, fit_users = [], []
    for s in (0, 1):
        members = rng.permutation(known_users[y_all[known_users] == s])
        n_hold = int(round(holdout_fraction * len(members)))
        if len(members) >= 2:
            n_hold = min(max(n_hold, 1), len(members) - 1)
        hold.append(members[:n_hold])
        fit_users.append(members[n_hold:])
    hold, fit_users = np.sort(np.concatenate(hold)), np.sort(np.concatenate(fit_users))
    clf = train_classifier(X[fit_users], y_all[fit_users], reg_strength, seed,
                           balanced=balanced)
    weights = None
    if interaction_weighted:
        weights = np.bincount(train.users, minlength=split_ds.n_users)[hold]
    rho = estimate_rho(clf, X[hold], y_all[hold], weights, margin)

    user_attr = np.full(split_ds.n_users, -1, dtype=np.int8)
    conf = np.full(split_ds.n_users, np.nan)
    recon_users = np.flatnonzero(status == AttrStatus.RECONSTRUCTABLE)
    if len(recon_users):
        s_hat, c = predict_attrs(clf, X[recon_users])
        user_attr[recon_users] = s_hat
        conf[recon_users] = c
    forbidden = np.flatnonzero(status == AttrStatus.FORBIDDEN)
    if len(forbidden):
        prior1 = float(np.mean(y_all[known_users])) if len(known_users) else 0.5
        user_attr[forbidden] = (rng.random(len(forbidden)) < prior1).astype(np.int8)
        conf[forbidden] = 0.0
    return Reconstruction(user_attr, conf, rho, clf, hold)


def write_report(recon, path):
    """Tab-separated per-user report; ``#`` lines carry the radius summary."""
    with open(path, "w") as fh:
        for s in (0, 1):
            fh.write(f"# rho_{s}\t{recon.rho.rho[s]:.10g}\n")
        if recon.rho.relaxed is not None:
            for s in (0, 1):
                fh.write(f"# rho_relaxed_{s}\t{recon.rho.relaxed[s]:.10g}\n")
        fh.write("user\ts_hat\tconfidence\n")
        for u in np.flatnonzero(recon.user_attr >= 0):
            fh.write(f"{u}\t{recon.user_attr[u]}\t{recon.user_confidence[u]:.10g}\n")


def read_report(path, n_users):
    """Returns (user_attr, user_confidence, rho) from :func:`write_report` output."""
    rho = np.zeros(2)
    attr = np.full(n_users, -1, dtype=np.int8)
    conf = np.full(n_users, np.nan)
    with open(path) as fh:
        for line in fh:
            if line.startswith("# rho_") and not line.startswith("# rho_relaxed"):
                key, val = line[2:].split("\t")
                rho[int(key[-1])] = float(val)
            elif line.startswith("#") or line.startswith("user\t"):
                continue
            elif line.strip():
                u, s, c = line.split("\t")
                attr[int(u)] = int(s)
                conf[int(u)] = float(c)
    return attr, conf, rho
