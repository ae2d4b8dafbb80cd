"""Distributionally robust fair training.

For each attribute value ``s`` the fairness residual is

    c_s = eta_k * mean(pred over known rows with s)
          + sum over blocks of eta_block * sum_j q_j * pred_j
          - mean(pred over all training rows)

where each block is a partition of the missing rows (``m``, or ``r`` and
``b``) carrying a weight vector ``q`` over its rows.  Fixed ``q`` equal to the
uniform distribution on reconstructed group ``s`` gives plain fair learning on
reconstructed attributes; learnable ``q`` restricted to a total-variation ball
around that distribution and pushed uphill on ``|c_s|`` gives the robust
min-max objective ``BCE + sum_s lam_s * max_q |c_s|``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import projection
from .data import AttrStatus, UsageError, group_subset
from .metrics import eta_fractions
from .mf import TrainConfig, fit

log = logging.getLogger(__name__)


class DegenerateGroupError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    """Probability weights over the rows ``rows`` of one partition."""

    weights: np.ndarray
    partition_tag: str
    rows: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != np.shape(self.rows):
            raise UsageError("weights and rows differ in length")
        if np.any(w < 0) or w.sum() <= 0:
            raise UsageError("weights must be non-negative with positive mass")
        object.__setattr__(self, "weights", w / w.sum())

    def same_space(self, other):
        return self.partition_tag == other.partition_tag and np.array_equal(self.rows, other.rows)


@dataclass(frozen=True, eq=False)
class AmbiguitySet:
    center: EmpiricalDistribution
    radius: float

    def __post_init__(self):
        if not 0.0 <= self.radius <= 1.0:
            raise UsageError(f"radius {self.radius} outside [0,1]")

    def contains(self, weights, tol=1e-9):
        w = np.asarray(weights)
        return (w.min() >= -tol and abs(w.sum() - 1) <= tol
                and projection.tv(w, self.center.weights) <= self.radius + tol)


ASCENTS = ("two_sided", "signed")


@dataclass(frozen=True)
class DRFOConfig:
    lam: tuple = (10.0, 10.0)
    alpha_theta: float = 1e-3
    alpha_q: float = 1e-3
    epochs: int = 10
    batch_size: int = 1024
    weight_decay: float = 0.0
    refresh_interval: int = 1
    inner_steps: int = 1
    projector: str = "exact"
    ascent: str = "two_sided"
    seed: int = 0

    def __post_init__(self):
        if self.alpha_theta <= 0 or self.alpha_q <= 0:
            raise UsageError("learning rates must be positive")
        if self.epochs < 1 or self.refresh_interval < 1 or self.inner_steps < 1:
            raise UsageError("epochs, refresh_interval and inner_steps must be >= 1")
        if self.projector not in projection.PROJECTORS:
            raise UsageError(f"unknown projector {self.projector!r}")
        if self.ascent not in ASCENTS:
            raise UsageError(f"unknown ascent {self.ascent!r}; choose from {ASCENTS}")
        if len(self.lam) != 2 or min(self.lam) < 0:
            raise UsageError("lam must be a non-negative pair")

    def train_config(self):
        return TrainConfig(learning_rate=self.alpha_theta, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, max_epochs=self.epochs, seed=self.seed)

    def iterations(self, n_rows):
        return self.epochs * -(-n_rows // min(self.batch_size, n_rows))


def _partition_rows(base, tag):
    if tag == "m":
        return np.flatnonzero(base.status != AttrStatus.KNOWN)
    if tag == "r":
        return base.index_r
    if tag == "b":
        return base.index_b
    raise UsageError(f"unknown partition tag {tag!r}")


def init_center(recon, partition_tag, s):
    """Uniform weights on the partition's rows reconstructed as ``s``, zero elsewhere."""
    rows = _partition_rows(recon.base, partition_tag)
    members = recon.recon_attr[rows] == s
    if not members.any():
        raise DegenerateGroupError(
            f"partition {partition_tag!r} has no rows reconstructed as s={s}")
    return EmpiricalDistribution(members.astype(np.float64) / members.sum(), partition_tag, rows)


def tv_distance(p, q):
    if not p.same_space(q):
        raise UsageError("distributions live on different row sets")
    return projection.tv(p.weights, q.weights)


def project(q, aset, method="exact"):
    """Euclidean projection of the weight vector ``q`` onto ``aset``."""
    w = projection.PROJECTORS[method](q, aset.center.weights, aset.radius)
    return EmpiricalDistribution(np.maximum(w, 0.0), aset.center.partition_tag, aset.center.rows) \
        if aset.radius > 0 else aset.center


# -- constraint terms ------------------------------------------------------

@dataclass
class Block:
    tag: str
    rows: np.ndarray
    eta: float
    ambiguity: AmbiguitySet
    q: np.ndarray
    learnable: bool
    # per-branch adversary states for the two-sided ascent, keyed by +1 / -1
    branches: dict = field(default_factory=dict)


@dataclass
class GroupTerm:
    s: int
    lam: float
    known_rows: np.ndarray
    eta_k: float
    blocks: list = field(default_factory=list)


def constraint_value(pred, term):
    """Signed residual c_s for row-aligned predictions ``pred``."""
    c = -pred.mean()
    if term.eta_k > 0:
        c += term.eta_k * pred[term.known_rows].mean()
    for b in term.blocks:
        c += b.eta * np.dot(b.q, pred[b.rows])
    return float(c)


def theta_coefficients(n_rows, terms, signs):
    """d(sum_s lam_s |c_s|)/d(pred_j) as a dense row vector."""
    a = np.zeros(n_rows)
    for term, sg in zip(terms, signs):
        if sg == 0 or term.lam == 0:
            continue
        w = term.lam * sg
        if term.eta_k > 0:
            a[term.known_rows] += w * term.eta_k / len(term.known_rows)
        for b in term.blocks:
            a[b.rows] += w * b.eta * b.q
        a -= w / n_rows
    return a


def ascend_Q(q, block_pred, c_s, lam, eta, alpha_q):
    """One ascent step on lam * |c_s| with respect to q (subgradient 0 at c_s = 0)."""
    sg = np.sign(c_s)
    if sg == 0:
        return np.array(q, dtype=np.float64, copy=True)
    return q + alpha_q * lam * sg * eta * block_pred


def make_terms(recon, lam, blocks=("m",), radii=None, learnable=False):
    """Per-s constraint terms over the training rows of ``recon``.

    ``blocks`` lists the missing partitions that enter the constraint; rows of
    other missing partitions are left out.  ``radii`` maps a tag to the per-s
    TV radius.  A block whose partition is empty drops out.  For a non-empty
    learnable block with no rows reconstructed as ``s``, DegenerateGroupError.
    """
    base = recon.base
    radii = radii or {}
    terms = []
    for s in (0, 1):
        known = base.group_index(s)
        counts = [len(known)] + [len(group_subset(recon, tag, s)) for tag in blocks]
        if sum(counts) == 0:
            continue  # no rows at all for this s: constraint inactive
        etas = eta_fractions(counts)
        term = GroupTerm(s, float(lam[s]), known, etas[0])
        for j, tag in enumerate(blocks):
            rows = _partition_rows(base, tag)
            if len(rows) == 0:
                continue
            if counts[j + 1] == 0:
                if learnable:
                    raise DegenerateGroupError(
                        f"partition {tag!r} has no rows reconstructed as s={s}")
                continue
            center = init_center(recon, tag, s)
            radius = float(radii.get(tag, (0.0, 0.0))[s]) if learnable else 0.0
            term.blocks.append(Block(tag, rows, etas[j + 1], AmbiguitySet(center, radius),
                                     center.weights.copy(), learnable))
        terms.append(term)
    return terms


class FairRegularizer:
    """Adds sum_s lam_s |c_s| to the training objective and runs the ascent on q.

    Plugs into :func:`drfo.mf.fit`.  Predictions over the training rows are
    cached after every update; with ``refresh_interval > 1`` they are only
    refreshed every that many iterations and the theta-gradient in between is
    estimated on the current mini-batch.
    """

    def __init__(self, train, terms, alpha_q=1e-3, refresh_interval=1, inner_steps=1,
                 projector="exact", ascent="two_sided"):
        self.users, self.items = train.users, train.items
        self.n = len(train)
        self.terms = terms
        self.alpha_q = alpha_q
        self.refresh_interval = refresh_interval
        self.inner_steps = inner_steps
        self.project = projection.PROJECTORS[projector]
        self.ascent = ascent
        self.active = any(t.lam > 0 for t in terms)
        self.pred = None
        self.coef = None
        self.t = 0

    def start(self, model):
        self.pred = model.predict(self.users, self.items)
        self.t = 0

    def residuals(self):
        return [constraint_value(self.pred, t) for t in self.terms]

    def theta_term(self, model, batch):
        if not self.active:
            return None
        if self.t % self.refresh_interval == 0:
            signs = np.sign(self.residuals())
            self.coef = theta_coefficients(self.n, self.terms, signs)
            # None: the coefficients cover every training row
            return None, self.coef * self.pred * (1 - self.pred)
        pred = model.predict(self.users[batch], self.items[batch])
        return batch, self.coef[batch] * (self.n / len(batch)) * pred * (1 - pred)

    def after_step(self, model):
        if not self.active:
            return None
        self.t += 1
        if self.t % self.refresh_interval == 0:
            self.pred = model.predict(self.users, self.items)
        entry = {}
        for term in self.terms:
            learn = [b for b in term.blocks if b.learnable and term.lam > 0]
            for _ in range(self.inner_steps if learn else 0):
                self._ascend(term, learn)
            c = constraint_value(self.pred, term)
            entry[f"c_{term.s}"] = c
            entry[f"L_{term.s}"] = abs(c)
            for b in term.blocks:
                entry[f"tv_{term.s}_{b.tag}"] = projection.tv(b.q, b.ambiguity.center.weights)
        return entry

    def _step(self, term, blocks, c, start):
        out = []
        for b, q0 in zip(blocks, start):
            if b.ambiguity.radius <= 0:
                out.append(b.ambiguity.center.weights.copy())
                continue
            q = ascend_Q(q0, self.pred[b.rows], c, term.lam, b.eta, self.alpha_q)
            out.append(np.maximum(self.project(q, b.ambiguity.center.weights,
                                               b.ambiguity.radius), 0.0))
        return out

    def _ascend(self, term, blocks):
        """One projected ascent step on |c_s| for every learnable block of ``term``.

        ``signed`` follows sign(c_s) at the current q, which can only climb the
        branch of |c_s| it starts on.  ``two_sided`` keeps one adversary state
        per branch, one pushing c_s up and one pushing it down, steps both and
        exposes whichever has the larger |c_s|.  Each branch is a concave
        ascent on its own, so the pair tracks max(c_s, -c_s) over the ball.
        """
        if self.ascent == "signed":
            c = constraint_value(self.pred, term)
            for b, q in zip(blocks, self._step(term, blocks, c, [b.q for b in blocks])):
                b.q = q
            return
        best = None
        for sg in (1.0, -1.0):
            start = [b.branches.get(sg, b.q) for b in blocks]
            cand = self._step(term, blocks, sg, start)
            for b, q in zip(blocks, cand):
                b.branches[sg] = q
                b.q = q
            val = abs(constraint_value(self.pred, term))
            if best is None or val > best[0]:
                best = (val, cand)
        for b, q in zip(blocks, best[1]):
            b.q = q

    def distributions(self):
        out = {}
        for term in self.terms:
            out[term.s] = {b.tag: EmpiricalDistribution(b.q, b.tag, b.rows) for b in term.blocks}
        return out


def fairness_term_L_s(model, train, terms, s):
    """(c_s, L_s) for attribute value ``s`` with ``model``'s predictions on ``train``."""
    term = next((t for t in terms if t.s == s), None)
    if term is None:
        return 0.0, 0.0
    c = constraint_value(model.predict(train.users, train.items), term)
    return c, abs(c)


@dataclass
class TrainResult:
    model: object
    checkpoints: list
    log: list
    distributions: dict = field(default_factory=dict)


def train_with_terms(model, train, terms, config, evaluate=None):
    reg = FairRegularizer(train, terms, config.alpha_q, config.refresh_interval,
                          config.inner_steps, config.projector, config.ascent)
    res = fit(model, train, config.train_config(), evaluate=evaluate, fairness=reg)
    return TrainResult(res.model, res.checkpoints, res.log, reg.distributions())


def drfo_train(model, recon, rho, config, evaluate=None):
    """Robust fair fine-tuning of ``model`` on the training rows of ``recon``.

    ``rho`` gives the TV radius for s = 0, 1.  All missing rows form one block.
    """
    terms = make_terms(recon, config.lam, ("m",), {"m": tuple(rho)}, learnable=True)
    return train_with_terms(model, recon.base, terms, config, evaluate)


def drfo_train_forbidden(model, recon, rho_r, config, evaluate=None, rho_b=(1.0, 1.0)):
    """Robust training with separate blocks for reconstructable rows (radius
    ``rho_r``) and forbidden rows (radius ``rho_b``, 1 by default, i.e. the
    whole simplex).  Without forbidden rows this is :func:`drfo_train`."""
    if len(recon.base.index_b) == 0:
        return drfo_train(model, recon, rho_r, config, evaluate)
    terms = make_terms(recon, config.lam, ("r", "b"),
                       {"r": tuple(rho_r), "b": tuple(rho_b)}, learnable=True)
    return train_with_terms(model, recon.base, terms, config, evaluate)
