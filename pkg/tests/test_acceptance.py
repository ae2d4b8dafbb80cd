"""Acceptance suite.  Each test records one pass/fail line per criterion,
printed in the terminal summary, and then asserts it.

Criteria 6-8 run the desk-scale sweeps of ``configs/desk.yaml`` once per
session (about 100 minutes on one core).
"""

from fractions import Fraction
from pathlib import Path

import cvxpy as cp
import numpy as np
import pytest

from conftest import ACCEPTANCE
from drfo import baselines, dro, harness, ingest, mf, projection, reconstruct
from drfo.data import PartitionedDataset
from drfo.dro import DRFOConfig
from drfo.ingest import MaskPlan
from drfo.metrics import eta_weights, group_deviation_report, mad, rmse

from helpers import (item_model, matched_population, random_model, run_ascent, toy_records,
                     worst_case)

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


# 1 -- projection ----------------------------------------------------------------

def test_criterion_1_projection_matches_qp_oracle():
    rng = np.random.default_rng(2024)
    worst_dist = worst_feas = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 5))
        c = rng.dirichlet(np.ones(n)) * (rng.random(n) < 0.8)
        if c.sum() == 0:
            c[0] = 1.0
        c /= c.sum()
        rho = float(rng.uniform(0, 1))
        q = rng.normal(size=n)
        w = projection.project_tv_ball(q, c, rho)
        v = cp.Variable(n)
        cp.Problem(cp.Minimize(cp.sum_squares(v - q)),
                   [v >= 0, cp.sum(v) == 1, 0.5 * cp.norm1(v - c) <= rho]).solve(
            solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
        worst_dist = max(worst_dist, float(np.linalg.norm(w - v.value)))
        worst_feas = max(worst_feas, -w.min(), abs(w.sum() - 1), projection.tv(w, c) - rho)
    record(1, worst_dist <= 1e-4 and worst_feas <= 1e-9,
           f"max L2 gap to QP {worst_dist:.1e} (<= 1e-4), max infeasibility {worst_feas:.1e} (<= 1e-9)")


# 2 -- TV bound -------------------------------------------------------------------

def test_criterion_2_tv_bounded_by_reconstruction_error():
    rng = np.random.default_rng(7)
    violations, trials = 0, 0
    for _ in range(150):
        t, r = matched_population(rng)
        for s in (0, 1):
            trials += 1
            err = Fraction(int(((t == s) & (r != s)).sum()), int((t == s).sum()))
            violations += reconstruct.group_tv(t, r, s) > err
    relaxed_violations = 0
    for _ in range(150):
        t, r = matched_population(rng, perturb=0.05)
        n = len(t)
        for s in (0, 1):
            a, b, m = int((t == s).sum()), int((r == s).sum()), int(((t == s) & (r == s)).sum())
            rho = Fraction(a - m, a)
            k = Fraction(m * n, a * b)
            bound = min(Fraction(1), rho + k * abs(Fraction(b - a, n)))
            relaxed_violations += reconstruct.group_tv(t, r, s) > bound
    record(2, violations == 0 and relaxed_violations == 0,
           f"matched priors: {violations} violations in {trials} exact checks; "
           f"|dp| <= 0.05: {relaxed_violations} violations of the relaxed bound")


# 3 -- gradients ------------------------------------------------------------------

def _fd(f, model, h=1e-6):
    out = {}
    for name in mf.PARAMS:
        p = getattr(model, name)
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = f(model)
            p[idx] = old - h
            down = f(model)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def _rel(a, b):
    return max(np.linalg.norm(a[k] - b[k]) / max(np.linalg.norm(b[k]), 1e-12) for k in b)


def test_criterion_3_gradients_match_finite_differences():
    from helpers import toy_recon
    rng = np.random.default_rng(3)
    worst = {"bce": 0.0, "theta": 0.0, "q": 0.0}
    rec = toy_recon()
    users, items = rec.base.users, rec.base.items
    for seed in range(5):
        model = random_model(6, 6, seed=seed)
        ratings = rng.integers(0, 2, 6).astype(float)
        worst["bce"] = max(worst["bce"], _rel(mf.bce_grads(model, users, items, ratings),
                                              _fd(lambda m: mf.bce_loss(m, users, items, ratings),
                                                  model)))
        terms = dro.make_terms(rec, (0.5, 2.0), ("m",), {"m": (0.3, 0.3)}, learnable=True)
        for t in terms:
            t.blocks[0].q = rng.dirichlet(np.ones(4))
        p = model.predict(users, items)
        signs = np.sign([dro.constraint_value(p, t) for t in terms])
        if np.min(np.abs([dro.constraint_value(p, t) for t in terms])) < 1e-4:
            continue  # too close to the kink of |c|
        gz = dro.theta_coefficients(6, terms, signs) * p * (1 - p)
        L = lambda m: sum(t.lam * abs(dro.constraint_value(m.predict(users, items), t))
                          for t in terms)
        worst["theta"] = max(worst["theta"], _rel(mf.score_grads(model, users, items, gz),
                                                  _fd(L, model)))
        for t in terms:
            b = t.blocks[0]
            c = dro.constraint_value(p, t)
            analytic = dro.ascend_Q(b.q, p[b.rows], c, t.lam, b.eta, 1.0) - b.q
            num = np.zeros(len(b.q))
            q0 = b.q.copy()
            for j in range(len(q0)):
                b.q = q0 + 1e-7 * np.eye(len(q0))[j]
                up = t.lam * abs(dro.constraint_value(p, t))
                b.q = q0 - 1e-7 * np.eye(len(q0))[j]
                down = t.lam * abs(dro.constraint_value(p, t))
                num[j] = (up - down) / 2e-7
            b.q = q0
            worst["q"] = max(worst["q"], np.linalg.norm(analytic - num) / np.linalg.norm(num))
    record(3, max(worst.values()) <= 1e-4,
           "max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<= 1e-4)")


# 4 -- reductions -----------------------------------------------------------------

def test_criterion_4_reduction_identities(tiny_split):
    model = mf.init_model(tiny_split.n_users, tiny_split.n_items, 8, seed=1)
    cfg = DRFOConfig(lam=(5.0, 5.0), alpha_theta=1e-2, alpha_q=1e-2, epochs=2, batch_size=256)
    masked = ingest.apply_mask_plan(tiny_split, MaskPlan(0.4, 0.0, 3))
    recon = reconstruct.reconstruct(masked, seed=0).apply(masked.train)
    checks = {}
    checks["rho=0 == FLrSA"] = dro.drfo_train(model, recon, (0.0, 0.0), cfg).model.equals(
        baselines.train_flrsa(model, recon, cfg).model)
    zero = DRFOConfig(lam=(0.0, 0.0), alpha_theta=1e-2, epochs=2, batch_size=256)
    checks["lam=0 == BasicMF"] = baselines.train_drfo(model, recon, (0.3, 0.3), zero).model.equals(
        baselines.train_basic_mf(model, masked.train, zero).model)
    # three-partition terms with an empty forbidden block vs the single missing block
    rb = dro.make_terms(recon, cfg.lam, ("r", "b"), {"r": (0.2, 0.2), "b": (1.0, 1.0)},
                        learnable=True)
    checks["empty D_b == two-partition"] = dro.train_with_terms(
        model, recon.base, rb, cfg).model.equals(dro.drfo_train(model, recon, (0.2, 0.2), cfg).model)
    full = ingest.apply_mask_plan(tiny_split, MaskPlan(1.0, 0.0, 3))
    checks["RegK(100%) == Oracle"] = baselines.train_regk(model, full.train, cfg).model.equals(
        baselines.train_oracle(model, full.train, cfg).model)
    record(4, all(checks.values()), "; ".join(f"{k}: {'bit-exact' if v else 'DIFFERS'}"
                                              for k, v in checks.items()))


# 5 -- worst case and monotonicity ------------------------------------------------

def test_criterion_5_worst_case_and_monotonicity():
    rng = np.random.default_rng(55)
    gap, non_monotone = 0.0, 0
    for _ in range(30):
        rec, model = toy_records(rng)
        pred = model.predict(rec.base.users, rec.base.items)
        values = []
        for rho in np.round(np.linspace(0, 1, 11), 10):
            terms, _ = run_ascent(rec, model, 1.0, float(rho), "two_sided")
            fresh = dro.make_terms(rec, (1.0, 1.0), ("m",), {"m": (rho, rho)}, learnable=True)
            total = 0.0
            for t, f in zip(terms, fresh):
                got = abs(dro.constraint_value(pred, t))
                gap = max(gap, abs(got - worst_case(pred, f, rho)[0]))
                total += got
            values.append(total)
        non_monotone += any(b < a - 1e-9 for a, b in zip(values, values[1:]))
    record(5, gap <= 1e-6 and non_monotone == 0,
           f"max gap to closed-form worst case {gap:.1e} (<= 1e-6); "
           f"{non_monotone} of 30 toys non-monotone in rho")


# 9 -- metric units ---------------------------------------------------------------

def test_criterion_9_metric_units():
    checks = {}
    p = np.array([0.5866, 0.5866, 0.5661, 0.5661, 0.5661])
    checks["MAD"] = mad(p, [0, 0, 1, 1, 1]) == pytest.approx(0.0205, abs=1e-15)
    checks["RMSE"] = rmse([0.2, 0.9], [0, 1]) == pytest.approx(np.sqrt(0.025), abs=1e-15)
    w = eta_weights({0: (3, 1, 0), 1: (2, 2, 2)})
    checks["eta"] = (w.eta_k == (0.75, 1 / 3) and w.eta_r == (0.25, 1 / 3)
                     and w.eta_b == (0.0, 1 - 2 / 3) and w.eta_k[1] + w.eta_r[1] + w.eta_b[1] == 1.0)
    ds = PartitionedDataset.from_arrays([0, 1, 2, 3], [0, 0, 1, 1], [1, 0, 1, 0], [0, 0, 1, 1],
                                        4, 2)
    dev = group_deviation_report(item_model([0.4, 0.6]), ds, ds.true_attr,
                                 np.array([True, False, True, False]))
    checks["deviations"] = all(dev[k] == pytest.approx(0.1, abs=1e-15)
                               for k in ((0, "known"), (0, "unknown"), (1, "known"), (1, "unknown")))
    record(9, all(checks.values()), ", ".join(f"{k} {'ok' if v else 'WRONG'}"
                                               for k, v in checks.items()))


# 6-8 -- desk-scale sweeps --------------------------------------------------------

@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    config = harness.load_config(DESK_CONFIG)
    table = harness.run_experiments(config)
    out = tmp_path_factory.mktemp("desk")
    harness.emit_report(table, out / "report.tsv")
    for row in harness.summarize(table):
        print(row)
    return config, table


def _mean(table, method, **where):
    return table.mean("dp", method=method, **where)


def test_criterion_6_retention_trends(desk):
    config, table = desk
    rows = table.select(experiment="retention")
    assert all(r.status == "ok" for r in rows), [r.status for r in rows if r.status != "ok"]
    problems, parts = [], []
    basic_rmse = {r.seed: r.rmse for r in rows if r.method == "BasicMF"}
    for ratio in config.retention_ratios:
        dp = {m: _mean(table, m, experiment="retention", retention=ratio)
              for m in ("BasicMF", "Oracle", "RegK", "FLrSA", "DRFO")}
        parts.append(f"r={ratio}: " + " ".join(f"{m} {v:.4f}" for m, v in dp.items()))
        if not dp["DRFO"] < dp["FLrSA"]:
            problems.append(f"DRFO >= FLrSA at {ratio}")
        if not dp["DRFO"] < dp["RegK"]:
            problems.append(f"DRFO >= RegK at {ratio}")
        if not dp["Oracle"] <= 0.5 * dp["BasicMF"]:
            problems.append(f"Oracle reduction < 50% at {ratio}")
    worst = max(r.rmse / basic_rmse[r.seed] - 1 for r in rows)
    if worst > 0.025:
        problems.append(f"test RMSE {100 * worst:.2f}% above BasicMF")
    parts.append(f"max RMSE increase {100 * worst:.2f}% (<= 2.5%)")
    record(6, not problems, "; ".join(problems or ["all orderings hold"]) + " | " + " | ".join(parts))


def test_criterion_7_noise_robustness(desk):
    config, table = desk
    rows = table.select(experiment="noise")
    assert rows and all(r.status == "ok" for r in rows)
    problems, parts = [], []
    retention = config.noise_retentions[0]
    for f in config.flip_ratios:
        dp = {m: _mean(table, m, experiment="noise", retention=retention, flip=float(f))
              for m in ("RegK", "FLrSA", "DRFO")}
        parts.append(f"f={f}: " + " ".join(f"{m} {v:.4f}" for m, v in dp.items()))
        if not dp["DRFO"] <= dp["RegK"]:
            problems.append(f"DRFO > RegK at flip {f}")
        if f > 0.2 and not dp["FLrSA"] > dp["RegK"]:
            problems.append(f"FLrSA <= RegK at flip {f}")
    record(7, not problems, "; ".join(problems or ["all orderings hold"]) + " | " + " | ".join(parts))


def test_criterion_8_forbidden_sweep(desk):
    config, table = desk
    rows = table.select(experiment="forbidden")
    assert rows and all(r.status == "ok" for r in rows)
    dp = {(m, b): _mean(table, m, experiment="forbidden", forbid=float(b))
          for m in ("FLrSA", "DRFO") for b in config.forbid_fractions}
    problems = []
    if not dp[("DRFO", 1.0)] <= 2 * dp[("DRFO", 0.0)]:
        problems.append("DRFO at 100% forbidden > 2x its 0% value")
    if not dp[("FLrSA", 1.0)] > dp[("DRFO", 1.0)]:
        problems.append("FLrSA at 100% forbidden <= DRFO")
    detail = " ".join(f"{m}@{b}={v:.4f}" for (m, b), v in dp.items())
    record(8, not problems, "; ".join(problems or ["all orderings hold"]) + " | " + detail)
