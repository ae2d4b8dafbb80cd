"""Command-line entry point: ``drfo <stage> [options]``.

Stages exchange plain files inside one data directory (``--out``, or
``$DRFO_DATA_DIR``, or ``./drfo-data``):

    ingest       train.tsv validation.tsv test.tsv user_attrs.tsv dataset.json
    pretrain     pretrained.npz pretrain.tsv
    reconstruct  reconstruction.tsv
    train        model_<method>.npz checkpoints_<method>.tsv
    evaluate     metrics_<name>.tsv
    sweep        report.tsv report_long.tsv

Every artifact gets a ``<artifact>.manifest.json`` sidecar with the resolved
config and seed.  Exit status: 0 ok, 2 usage or config error, 3 missing
upstream artifact, 4 bad input data, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baselines, dro, harness, ingest, mf, reconstruct
from .data import AttrStatus, ReconstructedDataset, SplitDataset, UsageError

log = logging.getLogger("drfo")

DATA_ENV = "DRFO_DATA_DIR"
METHOD_NAMES = {m.lower(): m for m in baselines.METHODS}


class MissingArtifact(FileNotFoundError):
    def __init__(self, path, stage):
        super().__init__(f"missing {path}; run `drfo {stage}` first")


def _need(path, stage):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path, stage)
    return path


def _manifest(args, config, artifact, **extra):
    harness.write_manifest(artifact, config, seed=config.master_seed, stage=args.command,
                           argv=sys.argv[1:], **extra)


# -- data directory helpers ------------------------------------------------------

def load_split(root):
    meta = json.loads(_need(root / "dataset.json", "ingest").read_text())
    attrs = ingest.read_user_attrs(_need(root / "user_attrs.tsv", "ingest"))
    parts = [ingest.read_canonical(_need(root / f"{name}.tsv", "ingest"), meta["n_users"],
                                   meta["n_items"], attrs)
             for name in ("train", "validation", "test")]
    return SplitDataset(*parts, user_attr=attrs), meta


def load_reconstruction(root, n_users):
    path = _need(root / "reconstruction.tsv", "reconstruct")
    return reconstruct.read_report(path, n_users)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- stages -------------------------------------------------------------------------

def cmd_ingest(args, config, root):
    table = harness.load_dataset(config, 0)
    split = ingest.split(table, config.split_ratios,
                         harness.derive_seed(config.master_seed, "split", 0))
    plan = ingest.MaskPlan(args.retention, args.forbid,
                           harness.derive_seed(config.master_seed, "mask", 0, float(args.retention)))
    masked = ingest.apply_mask_plan(split, plan)
    for name, ds in (("train", masked.train), ("validation", masked.validation),
                     ("test", masked.test)):
        ingest.write_canonical(ds, root / f"{name}.tsv")
        _manifest(args, config, root / f"{name}.tsv", mask_plan=vars(plan))
    ingest.write_user_attrs(masked.user_attr, root / "user_attrs.tsv")
    _manifest(args, config, root / "user_attrs.tsv")
    meta = {"n_users": int(masked.n_users), "n_items": int(masked.n_items),
            "retention": float(args.retention), "forbid": float(args.forbid)}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")
    _manifest(args, config, root / "dataset.json")
    print(f"ingested {len(table)} interactions: {meta['n_users']} users, {meta['n_items']} items "
          f"-> {len(masked.train)}/{len(masked.validation)}/{len(masked.test)} rows")


def cmd_pretrain(args, config, root):
    split, _ = load_split(root)
    seed = harness.derive_seed(config.master_seed, "train", 0)
    model = mf.init_model(split.n_users, split.n_items, config.dim, seed)
    cfg = mf.TrainConfig(batch_size=config.batch_size, max_epochs=config.pretrain_epochs,
                         seed=seed, patience=config.pretrain_patience)
    res = mf.pretrain(model, split, cfg, {"learning_rate": config.pretrain_lr,
                                          "weight_decay": config.pretrain_wd})
    mf.save_checkpoint(res.model, root / "pretrained.npz", learning_rate=res.config.learning_rate,
                       weight_decay=res.config.weight_decay, val_rmse=res.val_rmse)
    _manifest(args, config, root / "pretrained.npz")
    _write_rows(root / "pretrain.tsv", ("learning_rate", "weight_decay", "val_rmse"),
                [(repr(lr), repr(wd), repr(v)) for lr, wd, v in res.runs])
    _manifest(args, config, root / "pretrain.tsv")
    print(f"pretrained: lr={res.config.learning_rate:g} wd={res.config.weight_decay:g} "
          f"val rmse={res.val_rmse:.5f}")


def cmd_reconstruct(args, config, root):
    split, _ = load_split(root)
    seed = harness.derive_seed(config.master_seed, "recon", 0)
    rec = reconstruct.reconstruct(split, config.holdout_fraction, seed=seed)
    reconstruct.write_report(rec, root / "reconstruction.tsv")
    _manifest(args, config, root / "reconstruction.tsv", classifier_iterations=rec.classifier.iterations)
    print("rho = " + ", ".join(f"{r:.4f}" for r in rec.rho.rho))


def _parse_pair(text, name):
    vals = [float(x) for x in str(text).split(",")]
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise harness.ConfigError(f"{name}: expected one value or two comma-separated values")
    return np.array(vals)


def cmd_train(args, config, root):
    method = METHOD_NAMES.get(args.method.lower())
    if method is None:
        raise harness.ConfigError(f"method: unknown {args.method!r}; choose from {sorted(METHOD_NAMES)}")
    split, _ = load_split(root)
    model = mf.load_checkpoint(_need(root / "pretrained.npz", "pretrain"))
    lam = config.drfo_lam if args.lam is None and method == "DRFO" else \
        (args.lam if args.lam is not None else 1.0)
    seed = harness.derive_seed(config.master_seed, "train", 0)
    cfg = harness.finetune_config(config, seed, 0.0 if method == "BasicMF" else lam)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    evaluate = harness.make_evaluator(split.validation, np.where(
        split.validation.status == AttrStatus.KNOWN, split.validation.true_attr, -1))
    recon_train = rho = None
    if method in ("FLrSA", "CGL", "DRFO"):
        attr, conf, rho = load_reconstruction(root, split.n_users)
        recon_train = ReconstructedDataset.from_user_arrays(split.train, attr, conf)
        if args.rho is not None:
            rho = _parse_pair(args.rho, "rho")
    if method == "BasicMF":
        res = baselines.train_basic_mf(model, split.train, cfg, evaluate)
    elif method == "Oracle":
        res = baselines.train_oracle(model, split.train, cfg, evaluate)
    elif method == "RegK":
        res = baselines.train_regk(model, split.train, cfg, evaluate)
    elif method == "FLrSA":
        res = baselines.train_flrsa(model, recon_train, cfg, evaluate)
    elif method == "CGL":
        tau = 0.7 if args.tau is None else args.tau
        res = baselines.train_cgl(model, recon_train, cfg, tau,
                                  harness.derive_seed(config.master_seed, "CGL", 0), evaluate)
    else:
        res = baselines.train_drfo(model, recon_train, rho, cfg, evaluate)
    name = method.lower()
    mf.save_checkpoint(res.model, root / f"model_{name}.npz", method=method, lam=lam)
    _manifest(args, config, root / f"model_{name}.npz", method=method, lam=lam,
              rho=None if rho is None else [float(r) for r in rho], epochs=cfg.epochs)
    for c in res.checkpoints:
        mf.save_checkpoint(c.model, root / f"model_{name}_epoch{c.epoch}.npz", method=method,
                           epoch=c.epoch)
    _write_rows(root / f"checkpoints_{name}.tsv", ("epoch", "val_rmse", "val_dp"),
                [(c.epoch, repr(c.metrics["rmse"]), repr(c.metrics["dp"])) for c in res.checkpoints])
    _manifest(args, config, root / f"checkpoints_{name}.tsv", method=method)
    last = res.checkpoints[-1].metrics
    print(f"{method}: {cfg.epochs} epochs, final val rmse={last['rmse']:.5f} dp={last['dp']:.5f}")


def cmd_evaluate(args, config, root):
    split, _ = load_split(root)
    path = _need(args.model if args.model else root / "pretrained.npz", "train")
    model = mf.load_checkpoint(path)
    m = harness.test_metrics(model, split, split)
    name = Path(path).stem
    out = root / f"metrics_{name}.tsv"
    _write_rows(out, ("metric", "value"), [(k, "" if v is None else repr(v)) for k, v in m.items()])
    _manifest(args, config, out, model=str(path))
    print("  ".join(f"{k}={v:.5f}" for k, v in m.items() if v is not None))


def cmd_sweep(args, config, root):
    experiments = harness.EXPERIMENTS if args.experiment == "all" else (args.experiment,)
    table = harness.run_experiments(config, experiments)
    for fmt, name in (("wide", "report.tsv"), ("long", "report_long.tsv")):
        harness.emit_report(table, root / name, fmt)
        _manifest(args, config, root / name, experiments=list(experiments), format=fmt)
    failed = sum(r.status != "ok" for r in table.rows)
    print(f"{len(table)} rows written to {root / 'report.tsv'} ({failed} failed)")
    for row in harness.summarize(table):
        print(f"{row['experiment']:>9} {row['method']:>7} r={row['retention']:.2f} "
              f"b={row['forbid']:.2f} f={row['flip'] if row['flip'] is not None else '-'} "
              f"mean DP={row['mean']:.5f} (n={row['n']})")
    return 0 if failed == 0 else 1


COMMANDS = {"ingest": cmd_ingest, "pretrain": cmd_pretrain, "reconstruct": cmd_reconstruct,
            "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field (repeatable)")
    common.add_argument("--out", help=f"data/artifact directory (default ${DATA_ENV} or ./drfo-data)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="drfo", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True
    s = sub.add_parser("ingest", parents=[common], help="load, filter, split and mask a dataset")
    s.add_argument("--retention", type=float, default=0.3)
    s.add_argument("--forbid", type=float, default=0.0)
    sub.add_parser("pretrain", parents=[common], help="grid-search the MF backbone")
    sub.add_parser("reconstruct", parents=[common], help="infer missing attributes and rho")
    s = sub.add_parser("train", parents=[common], help="fine-tune one method")
    s.add_argument("--method", required=True, help="/".join(m.lower() for m in baselines.METHODS))
    s.add_argument("--lam", type=float)
    s.add_argument("--tau", type=float, help="CGL confidence threshold")
    s.add_argument("--rho", help="DRFO radius override: one value or 'rho0,rho1'")
    s.add_argument("--epochs", type=int)
    s = sub.add_parser("evaluate", parents=[common], help="test metrics of a checkpoint")
    s.add_argument("--model", help="checkpoint (default: pretrained.npz)")
    s = sub.add_parser("sweep", parents=[common], help="run experiment sweeps")
    s.add_argument("--experiment", default="retention", choices=harness.EXPERIMENTS + ("all",))
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"master_seed={args.seed}")
        config = harness.load_config(args.config, overrides)
        root = Path(args.out or os.environ.get(DATA_ENV) or "drfo-data")
        root.mkdir(parents=True, exist_ok=True)
        status = COMMANDS[args.command](args, config, root)
        return 0 if status is None else status
    except (harness.ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except (ingest.ParseError, ingest.IntegrityError, ingest.EmptyResultError,
            reconstruct.DegenerateDataError, dro.DegenerateGroupError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
