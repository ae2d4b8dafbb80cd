"""Matrix-factorization rating model trained with binary cross-entropy and Adam."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import UsageError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
INIT_STD = 0.01
PARAMS = ("user_emb", "item_emb", "user_bias", "item_bias", "global_bias")


class TrainingError(RuntimeError):
    pass


@dataclass(eq=False)
class MFModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: np.ndarray  # shape (1,) so it can be updated in place
    seed: int = 0

    @property
    def n_users(self):
        return self.user_emb.shape[0]

    @property
    def n_items(self):
        return self.item_emb.shape[0]

    @property
    def dim(self):
        return self.user_emb.shape[1]

    def scores(self, users, items):
        users, items = np.asarray(users), np.asarray(items)
        if users.size * 16 >= self.n_users * self.n_items:
            # many rows: one dense product beats gathering two embedding rows per pair
            inner = (self.user_emb @ self.item_emb.T).ravel()[users * self.n_items + items]
        else:
            inner = np.einsum("ij,ij->i", self.user_emb[users], self.item_emb[items])
        return inner + self.user_bias[users] + self.item_bias[items] + self.global_bias[0]

    def predict(self, users, items):
        return expit(self.scores(users, items))

    def copy(self):
        return MFModel(*(getattr(self, p).copy() for p in PARAMS), seed=self.seed)

    def params(self):
        return {p: getattr(self, p) for p in PARAMS}

    def equals(self, other):
        return all(np.array_equal(getattr(self, p), getattr(other, p)) for p in PARAMS)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 1024
    max_epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: Optional[int] = None  # early stopping on validation RMSE; None = off

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs < 0:
            raise UsageError("learning_rate, batch_size must be positive and max_epochs >= 0")
        if self.weight_decay < 0:
            raise UsageError("weight_decay must be non-negative")


def init_model(n_users, n_items, dim=32, seed=0):
    """Embeddings ~ N(0, 0.01^2), biases zero."""
    if min(n_users, n_items, dim) <= 0:
        raise UsageError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    return MFModel(INIT_STD * rng.standard_normal((n_users, dim)),
                   INIT_STD * rng.standard_normal((n_items, dim)),
                   np.zeros(n_users), np.zeros(n_items), np.zeros(1), seed=seed)


def predict(model, u, v):
    if not (0 <= u < model.n_users and 0 <= v < model.n_items):
        raise UsageError(f"index ({u}, {v}) outside a {model.n_users}x{model.n_items} model")
    return float(model.predict(np.array([u]), np.array([v]))[0])


def bce_from_probs(p, r):
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(r * np.log(p) + (1 - r) * np.log1p(-p)))


def bce_loss(model, users, items, ratings):
    """Mean binary cross-entropy; weight decay is not included."""
    users = np.asarray(users)
    if users.size == 0:
        raise UsageError("empty batch")
    z = model.scores(users, np.asarray(items))
    r = np.asarray(ratings, dtype=np.float64)
    # log(1 + e^z) - r z, stable for large |z|
    return float(np.mean(np.logaddexp(0.0, z) - r * z))


def score_grads(model, users, items, gz):
    """Gradients of sum_j gz_j * score_j with respect to every parameter."""
    A = sp.csr_matrix((gz, (users, items)), shape=(model.n_users, model.n_items))
    return {
        "user_emb": np.asarray(A @ model.item_emb),
        "item_emb": np.asarray(A.T @ model.user_emb),
        "user_bias": np.bincount(users, gz, model.n_users),
        "item_bias": np.bincount(items, gz, model.n_items),
        "global_bias": np.array([gz.sum()]),
    }


class RowPattern:
    """Fixed sparse layout of a set of (user, item) rows, so gradients of
    ``sum_j gz_j * score_j`` over all of them avoid rebuilding a sparse matrix."""

    def __init__(self, users, items, n_users, n_items):
        users, items = np.asarray(users), np.asarray(items)
        self.order = np.lexsort((items, users))
        self.users, self.items = users, items
        self.n_users, self.n_items = n_users, n_items
        indptr = np.concatenate([[0], np.cumsum(np.bincount(users, minlength=n_users))])
        self.A = sp.csr_matrix((np.zeros(len(users)), items[self.order], indptr),
                               shape=(n_users, n_items))

    def grads(self, model, gz):
        self.A.data[:] = gz[self.order]
        return {
            "user_emb": np.asarray(self.A @ model.item_emb),
            "item_emb": np.asarray(self.A.T @ model.user_emb),
            "user_bias": np.bincount(self.users, gz, self.n_users),
            "item_bias": np.bincount(self.items, gz, self.n_items),
            "global_bias": np.array([gz.sum()]),
        }


def bce_grads(model, users, items, ratings):
    p = model.predict(users, items)
    gz = (p - np.asarray(ratings, dtype=np.float64)) / len(users)
    return score_grads(model, users, items, gz)


class Adam:
    """Adam with decoupled weight decay (global bias is not decayed)."""

    def __init__(self, model, config):
        self.config = config
        self.m = {p: np.zeros_like(v) for p, v in model.params().items()}
        self.v = {p: np.zeros_like(v) for p, v in model.params().items()}
        self.t = 0

    def step(self, model, grads):
        c = self.config
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise TrainingError(f"non-finite gradient in {name} ({bad} entries) at step {self.t + 1}")
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for name, g in grads.items():
            p = getattr(model, name)
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if c.weight_decay and name != "global_bias":
                p *= 1 - c.learning_rate * c.weight_decay
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def grad_step(model, batch, config, optimizer=None):
    """One Adam update on ``batch = (users, items, ratings)``; returns a new model.

    Pass the same ``optimizer`` across calls to keep moment estimates.
    """
    users, items, ratings = (np.asarray(x) for x in batch)
    new = model.copy()
    opt = optimizer if optimizer is not None else Adam(new, config)
    opt.step(new, bce_grads(new, users, items, ratings))
    return new


# -- training loop ---------------------------------------------------------

@dataclass
class Checkpoint:
    epoch: int
    model: MFModel
    metrics: dict


@dataclass
class FitResult:
    model: MFModel
    checkpoints: list = field(default_factory=list)
    log: list = field(default_factory=list)
    stopped_epoch: int = 0


def fit(model, train, config, *, evaluate: Optional[Callable] = None, fairness=None):
    """Mini-batch Adam on BCE over the rows of ``train`` (a PartitionedDataset).

    ``fairness`` is an optional regulariser object (see ``drfo.dro``) with
    ``start(model)``, ``theta_term(model, batch)`` and ``after_step(model)``.
    ``theta_term`` returns None or ``(rows, gz)``, extra score gradients on the
    given training rows; ``rows=None`` means ``gz`` covers every training row.
    ``evaluate(model)`` returns a metrics dict; it is called at epoch 0 and at
    the end of every epoch and its results become checkpoints.  With
    ``config.patience`` set, training stops once validation RMSE has not
    improved for that many epochs and the best checkpoint's model is returned.
    """
    model = model.copy()
    users, items, ratings = train.users, train.items, train.ratings
    n = len(train)
    if n == 0:
        raise UsageError("empty training set")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model, config)
    bs = min(config.batch_size, n)
    result = FitResult(model)
    if fairness is not None:
        fairness.start(model)

    def checkpoint(epoch):
        if evaluate is not None:
            result.checkpoints.append(Checkpoint(epoch, model.copy(), evaluate(model)))

    checkpoint(0)
    pattern = None
    best, since_best = np.inf, 0
    it = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            batch = perm[start:start + bs]
            it += 1
            p = model.predict(users[batch], items[batch])
            gz_batch = (p - ratings[batch]) / len(batch)
            extra = fairness.theta_term(model, batch) if fairness is not None else None
            if extra is None:
                grads = score_grads(model, users[batch], items[batch], gz_batch)
            elif extra[0] is None:
                # coefficients over every training row; batch rows are distinct
                gz = extra[1].copy()
                gz[batch] += gz_batch
                if pattern is None:
                    pattern = RowPattern(users, items, model.n_users, model.n_items)
                grads = pattern.grads(model, gz)
            else:
                rows = np.concatenate([extra[0], batch])
                gz = np.concatenate([extra[1], gz_batch])
                grads = score_grads(model, users[rows], items[rows], gz)
            try:
                opt.step(model, grads)
            except TrainingError as exc:
                raise TrainingError(f"{exc} (epoch {epoch}, iteration {it})") from None
            if fairness is not None:
                entry = fairness.after_step(model)
                if entry is not None:
                    entry["iteration"] = it
                    entry["loss"] = bce_from_probs(p, ratings[batch])
                    result.log.append(entry)
        result.stopped_epoch = epoch
        checkpoint(epoch)
        if config.patience is not None and evaluate is not None:
            score = result.checkpoints[-1].metrics["rmse"]
            if score < best:
                best, since_best = score, 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    if config.patience is not None and result.checkpoints:
        best_ckpt = min(result.checkpoints, key=lambda c: (c.metrics["rmse"], c.epoch))
        result.model = best_ckpt.model.copy()
    else:
        result.model = model
    return result


def rmse_evaluator(ds):
    def evaluate(model):
        p = model.predict(ds.users, ds.items)
        return {"rmse": float(np.sqrt(np.mean((p - ds.ratings) ** 2)))}
    return evaluate


DEFAULT_GRID = {
    "learning_rate": (1e-2, 1e-3),
    "weight_decay": tuple(10.0 ** -k for k in range(1, 8)),
}


@dataclass
class PretrainResult:
    model: MFModel
    config: TrainConfig
    val_rmse: float
    runs: list


def pretrain(model, split_ds, config, grid=None):
    """Grid search over learning rate and weight decay, early stopping on
    validation RMSE.  Ties go to the smaller (learning rate, weight decay)."""
    grid = DEFAULT_GRID if grid is None else grid
    combos = list(itertools.product(grid["learning_rate"], grid["weight_decay"]))
    if not combos:
        raise UsageError("empty hyperparameter grid")
    if config.patience is None:
        config = replace(config, patience=3)
    evaluate = rmse_evaluator(split_ds.validation)
    runs = []
    for lr, wd in combos:
        cfg = replace(config, learning_rate=lr, weight_decay=wd)
        res = fit(model, split_ds.train, cfg, evaluate=evaluate)
        val = min(c.metrics["rmse"] for c in res.checkpoints)
        runs.append((val, lr, wd, cfg, res.model))
        log.info("pretrain lr=%g wd=%g -> val rmse %.5f", lr, wd, val)
    val, lr, wd, cfg, best = min(runs, key=lambda r: (r[0], r[1], r[2]))
    return PretrainResult(best, cfg, val, [(r[1], r[2], r[0]) for r in runs])


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(model, path, **meta):
    np.savez(path, version=np.array(CHECKPOINT_VERSION), seed=np.array(model.seed),
             **{p: getattr(model, p) for p in PARAMS},
             **{f"meta_{k}": np.array(v) for k, v in meta.items()})


def load_checkpoint(path):
    with np.load(path) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return MFModel(*(z[p].copy() for p in PARAMS), seed=int(z["seed"]))
