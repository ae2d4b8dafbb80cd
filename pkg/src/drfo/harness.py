"""Experiment sweeps, the model-selection rule and report tables.

A sweep is a cross product of methods x scenarios x replicate seeds.  Every
replicate seed shares one dataset, split, pretrained backbone and fine-tuning
batch order across all methods and scenarios, so differences between rows of
the same seed come only from the fairness terms.  All randomness is derived
from ``(master_seed, purpose, ...)`` through :func:`derive_seed`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import baselines, dro, ingest, mf, reconstruct, synthetic
from .data import AttrStatus, ReconstructedDataset, UsageError
from .metrics import MetricError, group_deviation_report, mad, rmse

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPERIMENTS = ("retention", "noise", "forbidden")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = SCHEMA_VERSION
    # a synthetic preset name, or "movielens:<dir>" holding ratings.dat/users.dat
    dataset: str = "ml1m-desk"
    user_k: int = 50
    item_k: int = 10
    binarize_threshold: int = 3
    split_ratios: tuple = (0.7, 0.15, 0.15)
    retention_ratios: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    flip_ratios: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    noise_retentions: tuple = (0.3, 0.5)
    forbid_fractions: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    forbid_retention: float = 0.3
    methods: tuple = baselines.METHODS
    seeds: tuple = (0, 1, 2, 3, 4)
    master_seed: int = 0
    rmse_budget: float = 0.98
    dim: int = 32
    pretrain_lr: tuple = mf.DEFAULT_GRID["learning_rate"]
    pretrain_wd: tuple = mf.DEFAULT_GRID["weight_decay"]
    pretrain_epochs: int = 50
    pretrain_patience: int = 3
    finetune_lr: float = 1e-3
    finetune_epochs: int = 10
    batch_size: int = 1024
    lam_grid: tuple = (0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0)
    tau_grid: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)
    drfo_lam: float = 10.0
    alpha_q: float = 1e-3
    projector: str = "exact"
    ascent: str = "two_sided"
    # attributes used for validation DP: "known" (known validation users,
    # falling back to reconstructed ones if a group is absent) or "reconstructed"
    validation_attrs: str = "known"
    holdout_fraction: float = 0.2
    jobs: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(f.default, tuple) and isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        self.validate()

    def validate(self):
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        if self.version != SCHEMA_VERSION:
            bad("version", f"unsupported schema version {self.version} (expected {SCHEMA_VERSION})")
        for name in ("retention_ratios", "flip_ratios", "noise_retentions", "forbid_fractions",
                     "lam_grid", "tau_grid", "split_ratios", "pretrain_lr", "pretrain_wd",
                     "methods", "seeds"):
            if not isinstance(getattr(self, name), tuple):
                bad(name, "must be a list")
        for name in ("retention_ratios", "flip_ratios", "noise_retentions", "forbid_fractions",
                     "lam_grid", "tau_grid", "split_ratios", "pretrain_lr", "pretrain_wd"):
            for x in getattr(self, name):
                if isinstance(x, bool) or not isinstance(x, (int, float)):
                    bad(name, f"value {x!r} is not a number")
        for name in ("retention_ratios", "flip_ratios", "noise_retentions", "forbid_fractions",
                     "tau_grid"):
            for r in getattr(self, name):
                if not isinstance(r, (int, float)) or not 0.0 <= r <= 1.0:
                    bad(name, f"value {r!r} outside [0, 1]")
        if not 0.0 <= self.forbid_retention <= 1.0:
            bad("forbid_retention", "outside [0, 1]")
        if not self.methods:
            bad("methods", "at least one method is required")
        for m in self.methods:
            if m not in baselines.METHODS:
                bad("methods", f"unknown method {m!r}; choose from {list(baselines.METHODS)}")
        if not self.seeds:
            bad("seeds", "at least one seed is required")
        if len(self.split_ratios) != 3 or min(self.split_ratios) <= 0 \
                or abs(sum(self.split_ratios) - 1) > 1e-9:
            bad("split_ratios", "three positive ratios summing to 1")
        if not 0.0 < self.rmse_budget <= 1.0:
            bad("rmse_budget", "must lie in (0, 1]")
        for name in ("dim", "user_k", "item_k", "pretrain_epochs", "finetune_epochs",
                     "batch_size", "jobs", "pretrain_patience"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        for name in ("finetune_lr", "alpha_q"):
            if not getattr(self, name) > 0:
                bad(name, "must be positive")
        if self.drfo_lam < 0 or any(x < 0 for x in self.lam_grid):
            bad("lam_grid" if self.drfo_lam >= 0 else "drfo_lam", "must be non-negative")
        if self.validation_attrs not in ("known", "reconstructed"):
            bad("validation_attrs", "one of 'known', 'reconstructed'")
        if self.projector not in ("exact", "dykstra"):
            bad("projector", "one of 'exact', 'dykstra'")
        if self.ascent not in dro.ASCENTS:
            bad("ascent", f"one of {list(dro.ASCENTS)}")
        if not 0.0 < self.holdout_fraction < 1.0:
            bad("holdout_fraction", "must lie in (0, 1)")

    # -- (de)serialisation --------------------------------------------------

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a mapping")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            default = f.default
            if isinstance(default, tuple):
                if not isinstance(v, (list, tuple)):
                    raise ConfigError(f"{f.name}: must be a list")
                v = tuple(_numeric(list(v)))
            elif isinstance(default, bool) or isinstance(default, str):
                if not isinstance(v, str):
                    raise ConfigError(f"{f.name}: must be a string")
            elif isinstance(default, int):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{f.name}: must be an integer")
            elif isinstance(default, float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{f.name}: must be a number")
                v = float(v)
            kwargs[f.name] = v
        return cls(**kwargs)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def with_overrides(self, overrides):
        """Apply ``key=value`` strings; values are parsed as YAML scalars/lists."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"{item}: override must look like key=value")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in d:
                raise ConfigError(f"{key}: unknown field")
            d[key] = _numeric(yaml.safe_load(raw))
        return ExperimentConfig.from_dict(d)


def _numeric(v):
    """YAML 1.1 reads ``1e-5`` as a string; turn such scalars into numbers."""
    if isinstance(v, list):
        return [_numeric(x) for x in v]
    if isinstance(v, str):
        for cast in (int, float):
            try:
                return cast(v)
            except ValueError:
                pass
    return v


def load_config(path=None, overrides=()):
    """Read a YAML (or JSON) config file; missing fields take their defaults."""
    d = {}
    if path is not None:
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
    return ExperimentConfig.from_dict(d).with_overrides(overrides)


def dump_config(config, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


def derive_seed(master, *parts):
    """64-bit seed from sha256 of ``master|part1|part2...`` (floats via repr)."""
    text = "|".join(str(p) if not isinstance(p, float) else repr(p) for p in (master,) + parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


# -- model selection ---------------------------------------------------------

@dataclass
class Selection:
    checkpoint: object
    flagged: bool
    tag: dict = field(default_factory=dict)


def select_model(checkpoints, baseline_rmse, budget=0.98):
    """Least validation DP among checkpoints with RMSE <= baseline_rmse / budget.

    ``checkpoints`` are :class:`drfo.mf.Checkpoint` objects (or pairs
    ``(checkpoint, tag)``) whose metrics hold ``rmse`` and ``dp``.  DP ties go
    to the lower RMSE, then to the earlier entry.  Missing DP counts as worst.
    With no qualifying checkpoint the least-RMSE one is returned, flagged.
    """
    items = [c if isinstance(c, tuple) else (c, {}) for c in checkpoints]
    if not items:
        raise UsageError("select_model needs at least one checkpoint")
    threshold = baseline_rmse / budget

    def dp(c):
        v = c.metrics.get("dp")
        return math.inf if v is None or not np.isfinite(v) else v

    ok = [(i, c, t) for i, (c, t) in enumerate(items) if c.metrics["rmse"] <= threshold]
    if ok:
        _, c, t = min(ok, key=lambda x: (dp(x[1]), x[1].metrics["rmse"], x[0]))
        return Selection(c, False, t)
    i, (c, t) = min(enumerate(items), key=lambda x: (x[1][0].metrics["rmse"], x[0]))
    return Selection(c, True, t)


# -- report tables -------------------------------------------------------------

METRICS = ("dp", "rmse", "dev_s0_known", "dev_s0_unknown", "dev_s1_known", "dev_s1_unknown")


@dataclass
class ReportRow:
    experiment: str
    method: str
    retention: float
    forbid: float
    flip: Optional[float]
    seed: int
    dp: Optional[float] = None
    rmse: Optional[float] = None
    dev_s0_known: Optional[float] = None
    dev_s0_unknown: Optional[float] = None
    dev_s1_known: Optional[float] = None
    dev_s1_unknown: Optional[float] = None
    lam: Optional[float] = None
    tau: Optional[float] = None
    epoch: Optional[int] = None
    flagged: bool = False
    status: str = "ok"

    def sort_key(self):
        m = baselines.METHODS.index(self.method) if self.method in baselines.METHODS else 99
        return (EXPERIMENTS.index(self.experiment), m, self.retention, self.forbid,
                -1.0 if self.flip is None else self.flip, self.seed)


COLUMNS = tuple(f.name for f in fields(ReportRow))
ID_COLUMNS = tuple(c for c in COLUMNS if c not in METRICS)
_INT = {"seed", "epoch"}
_FLOAT = {"retention", "forbid", "flip", "lam", "tau"} | set(METRICS)


@dataclass
class ReportTable:
    rows: list = field(default_factory=list)

    def sorted(self):
        return ReportTable(sorted(self.rows, key=ReportRow.sort_key))

    def extend(self, other):
        self.rows.extend(other.rows)
        return self

    def select(self, **where):
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in where.items())]

    def mean(self, metric, **where):
        vals = [getattr(r, metric) for r in self.select(**where)
                if r.status == "ok" and getattr(r, metric) is not None]
        return float(np.mean(vals)) if vals else math.nan

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, ReportTable) and self.rows == other.rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(col, text):
    if col == "flagged":
        return text == "1"
    if text == "":
        return None
    if col in _INT:
        return int(text)
    if col in _FLOAT:
        return float(text)
    return text


def emit_report(table, path, format="wide"):
    """Write ``table`` as tab-separated text sorted by (experiment, method,
    scenario, seed).  ``wide`` has one column per metric; ``long`` has one row
    per metric with ``metric`` and ``value`` columns.  Blank cells are missing
    values.  Floats are written with ``repr`` so reading back is exact."""
    if format not in ("wide", "long"):
        raise UsageError(f"unknown report format {format!r}")
    rows = table.sorted().rows
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if format == "wide":
            w.writerow(COLUMNS)
            for r in rows:
                w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        else:
            w.writerow(ID_COLUMNS + ("metric", "value"))
            for r in rows:
                ids = [_fmt(getattr(r, c)) for c in ID_COLUMNS]
                for m in METRICS:
                    w.writerow(ids + [m, _fmt(getattr(r, m))])
    return Path(path)


def read_report(path):
    """Parse either format written by :func:`emit_report`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = tuple(next(reader))
        body = list(reader)
    if header == COLUMNS:
        return ReportTable([ReportRow(**{c: _parse(c, t) for c, t in zip(COLUMNS, line)})
                            for line in body])
    if header == ID_COLUMNS + ("metric", "value"):
        out, index = [], {}
        for line in body:
            ids = tuple(line[:len(ID_COLUMNS)])
            if ids not in index:
                index[ids] = ReportRow(**{c: _parse(c, t) for c, t in zip(ID_COLUMNS, ids)})
                out.append(index[ids])
            setattr(index[ids], line[-2], _parse(line[-2], line[-1]))
        return ReportTable(out)
    raise UsageError(f"{path}: unrecognised report header")


# -- data and per-seed context ---------------------------------------------------

def load_dataset(config, seed):
    """Rating table after binarisation and k-core filtering."""
    if config.dataset.startswith("movielens:"):
        root = Path(config.dataset.split(":", 1)[1])
        table = ingest.parse_movielens(root / "ratings.dat", root / "users.dat")
        table = ingest.binarize(table, config.binarize_threshold)
    else:
        table = synthetic.preset(config.dataset, derive_seed(config.master_seed, "data", seed))
    return ingest.k_core_filter(table, config.user_k, config.item_k)


@dataclass
class SeedContext:
    seed: int
    split: object
    pretrained: object
    baseline_rmse: float
    basic: object          # Selection of the BasicMF run
    train_seed: int


def finetune_config(config, train_seed, lam=0.0):
    return dro.DRFOConfig(lam=(float(lam), float(lam)), alpha_theta=config.finetune_lr,
                          alpha_q=config.alpha_q, epochs=config.finetune_epochs,
                          batch_size=config.batch_size, projector=config.projector,
                          ascent=config.ascent, seed=train_seed)


def make_evaluator(validation, attrs):
    """Validation RMSE and DP (over rows with ``attrs`` >= 0)."""
    attrs = np.asarray(attrs)
    has = attrs >= 0

    def evaluate(model):
        p = model.predict(validation.users, validation.items)
        try:
            dp = mad(p[has], attrs[has])
        except MetricError:
            dp = math.nan
        return {"rmse": rmse(p, validation.ratings), "dp": dp}
    return evaluate


def prepare_seed(config, seed):
    table = load_dataset(config, seed)
    split = ingest.split(table, config.split_ratios, derive_seed(config.master_seed, "split", seed))
    train_seed = derive_seed(config.master_seed, "train", seed)
    model = mf.init_model(split.n_users, split.n_items, config.dim, train_seed)
    pre_cfg = mf.TrainConfig(batch_size=config.batch_size, max_epochs=config.pretrain_epochs,
                             seed=train_seed, patience=config.pretrain_patience)
    pre = mf.pretrain(model, split, pre_cfg,
                      {"learning_rate": config.pretrain_lr, "weight_decay": config.pretrain_wd})
    evaluate = make_evaluator(split.validation, split.validation.true_attr)
    res = baselines.train_basic_mf(pre.model, split.train,
                                   finetune_config(config, train_seed), evaluate)
    # BasicMF is selected on accuracy alone; its RMSE is the budget reference
    best = min(res.checkpoints, key=lambda c: (c.metrics["rmse"], c.epoch))
    return SeedContext(seed, split, pre.model, best.metrics["rmse"],
                       Selection(best, False, {"lam": 0.0}), train_seed)


# -- cells ---------------------------------------------------------------------------

def validation_attributes(masked, recon, mode):
    """Per-row validation attributes (-1 = excluded) for the DP used in selection."""
    val = masked.validation
    known = np.where(val.status == AttrStatus.KNOWN, val.true_attr, -1)
    r = recon.apply(val) if recon is not None else None
    guessed = known
    if r is not None:
        guessed = np.where(val.status == AttrStatus.RECONSTRUCTABLE, r.recon_attr, known)
    if mode == "reconstructed":
        return guessed
    if all(np.any(known == s) for s in (0, 1)):
        return known
    return guessed


def test_metrics(model, split, masked):
    test = split.test
    p = model.predict(test.users, test.items)
    status = masked.user_status()
    known_mask = status[test.users] == AttrStatus.KNOWN
    dev = group_deviation_report(model, test, test.true_attr, known_mask)
    return {"dp": mad(p, test.true_attr), "rmse": rmse(p, test.ratings),
            "dev_s0_known": dev[(0, "known")], "dev_s0_unknown": dev[(0, "unknown")],
            "dev_s1_known": dev[(1, "known")], "dev_s1_unknown": dev[(1, "unknown")]}


def flip_reconstruction(masked, flip_ratio, seed):
    """Reconstruction equal to the truth except for k users per group whose
    attribute is flipped, k = round(flip_ratio * smaller group size) among the
    missing users.  Flipping the same number in both groups keeps the
    reconstructed marginal equal to the true one."""
    status = masked.user_status()
    truth = np.asarray(masked.user_attr)
    missing = np.flatnonzero(status == AttrStatus.RECONSTRUCTABLE)
    groups = [missing[truth[missing] == s] for s in (0, 1)]
    k = int(math.floor(flip_ratio * min(len(g) for g in groups) + 0.5))
    for s, g in enumerate(groups):
        if k > len(g):
            raise ConfigError(f"flip_ratios: {k} flips exceed the {len(g)} missing users with s={s}")
    rng = np.random.default_rng(seed)
    user_attr = np.full(masked.n_users, -1, dtype=np.int8)
    user_attr[missing] = truth[missing]
    for g in groups:
        chosen = rng.choice(g, size=k, replace=False)
        user_attr[chosen] = 1 - truth[chosen]
    conf = np.where(user_attr >= 0, 1.0, np.nan)
    assert all(np.sum(user_attr[missing] == s) == len(groups[s]) for s in (0, 1))
    return user_attr, conf, k


def _candidates(method, config, ctx, masked, recon_train, rho, scenario_seed, evaluate,
                oracle_evaluate):
    """Yield (TrainResult, tag) for every hyperparameter setting of ``method``."""
    train = masked.train
    cfg = finetune_config(config, ctx.train_seed)
    if method == "DRFO":
        c = replace(cfg, lam=(config.drfo_lam, config.drfo_lam))
        yield baselines.train_drfo(ctx.pretrained, recon_train, rho, c, evaluate), \
            {"lam": config.drfo_lam}
        return
    for lam in config.lam_grid:
        c = replace(cfg, lam=(lam, lam))
        if method == "Oracle":
            yield baselines.train_oracle(ctx.pretrained, train, c, oracle_evaluate), {"lam": lam}
        elif method == "RegK":
            yield baselines.train_regk(ctx.pretrained, train, c, evaluate), {"lam": lam}
        elif method == "FLrSA":
            yield baselines.train_flrsa(ctx.pretrained, recon_train, c, evaluate), {"lam": lam}
        elif method == "CGL":
            for tau in config.tau_grid:
                yield baselines.train_cgl(ctx.pretrained, recon_train, c, tau, scenario_seed,
                                          evaluate), {"lam": lam, "tau": tau}


def run_cell(config, ctx, method, experiment, retention, forbid=0.0, flip=None):
    """Train, select and test one (method, scenario, seed) cell."""
    row = ReportRow(experiment, method, float(retention), float(forbid),
                    None if flip is None else float(flip), ctx.seed)
    try:
        mask_seed = derive_seed(config.master_seed, "mask", ctx.seed, float(retention))
        masked = ingest.apply_mask_plan(ctx.split, ingest.MaskPlan(retention, forbid, mask_seed))
        if method == "BasicMF":
            sel = ctx.basic
        else:
            scenario_seed = derive_seed(config.master_seed, method, ctx.seed, float(retention),
                                        float(forbid), "none" if flip is None else float(flip))
            recon_train, rho, recon = None, None, None
            if method in ("FLrSA", "CGL", "DRFO") or config.validation_attrs == "reconstructed":
                if flip is None:
                    rec = reconstruct.reconstruct(
                        masked, config.holdout_fraction,
                        seed=derive_seed(config.master_seed, "recon", ctx.seed, float(retention)))
                    recon, rho = rec, rec.rho.rho
                else:
                    ua, uc, _ = flip_reconstruction(
                        masked, flip, derive_seed(config.master_seed, "flip", ctx.seed,
                                                  float(retention), float(flip)))
                    recon = _UserRecon(ua, uc)
                    rho = np.array([flip, flip], dtype=np.float64)
                recon_train = recon.apply(masked.train)
            evaluate = make_evaluator(masked.validation,
                                      validation_attributes(masked, recon, config.validation_attrs))
            oracle_eval = make_evaluator(masked.validation, masked.validation.true_attr)
            cands = []
            for res, tag in _candidates(method, config, ctx, masked, recon_train, rho,
                                        scenario_seed, evaluate, oracle_eval):
                cands.extend((c, dict(tag, epoch=c.epoch)) for c in res.checkpoints)
            sel = select_model(cands, ctx.baseline_rmse, config.rmse_budget)
        for k, v in test_metrics(sel.checkpoint.model, ctx.split, masked).items():
            setattr(row, k, v)
        row.lam = sel.tag.get("lam")
        row.tau = sel.tag.get("tau")
        row.epoch = sel.checkpoint.epoch
        row.flagged = sel.flagged
    except Exception as exc:  # recorded, the sweep goes on
        log.exception("cell %s %s r=%s b=%s f=%s seed=%s failed", experiment, method,
                      retention, forbid, flip, ctx.seed)
        row.status = f"error: {type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " ")
    return row


@dataclass
class _UserRecon:
    user_attr: np.ndarray
    user_confidence: np.ndarray

    def apply(self, ds):
        return ReconstructedDataset.from_user_arrays(ds, self.user_attr, self.user_confidence)


# -- sweeps ----------------------------------------------------------------------------

NOISE_METHODS = ("RegK", "FLrSA", "DRFO")
FORBIDDEN_METHODS = ("FLrSA", "CGL", "DRFO")


def _cells(config, experiment):
    if experiment == "retention":
        return [(m, r, 0.0, None) for m in config.methods for r in config.retention_ratios]
    if experiment == "noise":
        return [(m, r, 0.0, f) for m in config.methods if m in NOISE_METHODS
                for r in config.noise_retentions for f in config.flip_ratios]
    if experiment == "forbidden":
        return [(m, config.forbid_retention, b, None) for m in config.methods
                if m in FORBIDDEN_METHODS for b in config.forbid_fractions]
    raise UsageError(f"unknown experiment {experiment!r}")


# methods whose cells ignore the reconstruction (and so the flip ratio)
_RECON_FREE = ("BasicMF", "Oracle", "RegK")


def _run_seed(args):
    config, seed, experiments = args
    ctx = prepare_seed(config, seed)
    rows, done = [], {}
    for exp in experiments:
        for method, r, b, f in _cells(config, exp):
            key = (method, r, b)
            reusable = f is None or (method in _RECON_FREE and config.validation_attrs == "known")
            if reusable and key in done:
                # identical training and selection; only the scenario labels differ
                row = replace(done[key], experiment=exp, flip=None if f is None else float(f))
            else:
                row = run_cell(config, ctx, method, exp, r, b, f)
                if reusable:
                    done.setdefault(key, row)
            rows.append(row)
    return rows


def run_experiments(config, experiments=EXPERIMENTS):
    """Run the named sweeps for every seed; seeds run in up to ``config.jobs`` processes."""
    for e in experiments:
        if e not in EXPERIMENTS:
            raise UsageError(f"unknown experiment {e!r}")
    jobs = [(config, s, tuple(experiments)) for s in config.seeds]
    table = ReportTable()
    if config.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(config.jobs, len(jobs))) as pool:
            for rows in pool.map(_run_seed, jobs):
                table.rows.extend(rows)
    else:
        for j in jobs:
            table.rows.extend(_run_seed(j))
    return table.sorted()


def run_retention_sweep(config):
    return run_experiments(config, ("retention",))


def run_noise_injection(config):
    return run_experiments(config, ("noise",))


def run_forbidden_sweep(config):
    return run_experiments(config, ("forbidden",))


def summarize(table, metric="dp"):
    """Mean of ``metric`` per (experiment, method, scenario) over ok rows, as JSON-ready rows."""
    groups = {}
    for r in table.rows:
        if r.status != "ok":
            continue
        key = (r.experiment, r.method, r.retention, r.forbid, r.flip)
        groups.setdefault(key, []).append(getattr(r, metric))
    return [dict(experiment=k[0], method=k[1], retention=k[2], forbid=k[3], flip=k[4],
                 n=len(v), mean=float(np.mean(v))) for k, v in sorted(
                     groups.items(), key=lambda kv: (EXPERIMENTS.index(kv[0][0]), baselines.METHODS.index(kv[0][1]),
                                                     kv[0][2], kv[0][3], kv[0][4] or -1))]


def write_manifest(artifact, config, seed=None, **extra):
    """Sidecar ``<artifact>.manifest.json`` holding the resolved config and seed."""
    path = Path(str(artifact) + ".manifest.json")
    body = {"artifact": os.path.basename(str(artifact)), "schema_version": SCHEMA_VERSION,
            "seed": seed, "config": config.to_dict() if hasattr(config, "to_dict") else config}
    body.update(extra)
    with open(path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path
