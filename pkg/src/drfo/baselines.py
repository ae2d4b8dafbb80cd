"""Comparison trainers sharing the MF backbone and the constraint machinery.

Every trainer fine-tunes a pretrained model with :func:`drfo.dro.train_with_terms`;
they differ only in which rows enter the per-s constraints and whether the
missing-row weights are fixed or adversarial.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import dro
from .data import AttrStatus, ReconstructedDataset, UsageError

METHODS = ("BasicMF", "Oracle", "RegK", "FLrSA", "CGL", "DRFO")


@dataclass(frozen=True)
class TrainerSpec:
    method: str
    lam: Optional[float] = None
    tau: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}")
        if (self.method == "CGL") != (self.tau is not None):
            raise UsageError("tau is required for CGL and only for CGL")
        if self.method != "BasicMF" and self.lam is None:
            raise UsageError(f"{self.method} needs lam")


def _known_only(ds):
    """Reconstruction view whose missing rows carry placeholder attributes.

    Used with ``blocks=()`` so the placeholders never enter a constraint and
    only known rows define the per-s expectations.
    """
    missing = ds.status != AttrStatus.KNOWN
    return ReconstructedDataset(ds, np.where(missing, 0, -1), np.where(missing, 0.0, np.nan))


def train_basic_mf(model, train, config, evaluate=None):
    """Continued MF training with no fairness term."""
    return dro.train_with_terms(model, train, [], config, evaluate)


def train_regk(model, train, config, evaluate=None):
    """Constraints over known rows only; missing rows only enter the global mean."""
    terms = dro.make_terms(_known_only(train), config.lam, blocks=())
    return dro.train_with_terms(model, train, terms, config, evaluate)


def train_oracle(model, train, config, evaluate=None):
    """RegK on the unmasked training rows (every true attribute known).

    With both s-constraints weighted equally, sum_s |E_s - E_all| equals the
    absolute gap |E_0 - E_1| between the group means.
    """
    return train_regk(model, train.unmasked(), config, evaluate)


def train_flrsa(model, recon, config, evaluate=None, include_forbidden=False):
    """Fixed uniform weights on reconstructed groups.

    Forbidden rows are left out of the constraints unless ``include_forbidden``.
    """
    has_b = len(recon.base.index_b) > 0
    blocks = ("m",) if include_forbidden or not has_b else ("r",)
    terms = dro.make_terms(recon, config.lam, blocks=blocks)
    return dro.train_with_terms(model, recon.base, terms, config, evaluate)


def randomize_low_confidence(recon, tau, seed=0):
    """Replace s_hat of users with confidence < tau by draws from the s_hat
    frequencies of the confident users (1/2 each if none are confident)."""
    base = recon.base
    missing = base.status != AttrStatus.KNOWN
    users = base.users[missing]
    u_unique, first = np.unique(users, return_index=True)
    attr = recon.recon_attr[missing][first]
    conf = recon.recon_confidence[missing][first]
    low = conf < tau
    confident = attr[~low]
    prior1 = float(confident.mean()) if len(confident) else 0.5
    rng = np.random.default_rng(seed)
    new_attr = attr.copy()
    new_attr[low] = (rng.random(int(low.sum())) < prior1).astype(np.int8)
    user_attr = np.full(base.n_users, -1, dtype=np.int8)
    user_conf = np.full(base.n_users, np.nan)
    user_attr[u_unique] = new_attr
    user_conf[u_unique] = conf
    return ReconstructedDataset.from_user_arrays(base, user_attr, user_conf)


def train_cgl(model, recon, config, tau, seed=0, evaluate=None):
    """Randomise low-confidence reconstructions, then fair learning on all missing rows."""
    return train_flrsa(model, randomize_low_confidence(recon, tau, seed), config, evaluate,
                       include_forbidden=True)


def train_drfo(model, recon, rho, config, evaluate=None):
    return dro.drfo_train_forbidden(model, recon, rho, config, evaluate)
