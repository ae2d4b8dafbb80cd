import numpy as np
import pytest

from drfo import baselines, ingest, mf, reconstruct
from drfo.data import AttrStatus, ReconstructedDataset, UsageError
from drfo.dro import DRFOConfig
from drfo.ingest import MaskPlan
from drfo.baselines import TrainerSpec


def _cfg(lam=5.0, **kw):
    return DRFOConfig(lam=(lam, lam), alpha_theta=1e-2, epochs=2, batch_size=256, **kw)


@pytest.fixture(scope="module")
def pretrained(tiny_split):
    return mf.init_model(tiny_split.n_users, tiny_split.n_items, 8, seed=4)


def test_trainer_spec_validation():
    TrainerSpec("BasicMF")
    TrainerSpec("CGL", lam=1.0, tau=0.7)
    with pytest.raises(UsageError):
        TrainerSpec("Magic", lam=1.0)
    with pytest.raises(UsageError):
        TrainerSpec("CGL", lam=1.0)
    with pytest.raises(UsageError):
        TrainerSpec("FLrSA", lam=1.0, tau=0.5)
    with pytest.raises(UsageError):
        TrainerSpec("DRFO")


def test_regk_at_full_retention_equals_oracle(tiny_split, pretrained):
    masked = ingest.apply_mask_plan(tiny_split, MaskPlan(1.0, 0.0, 1))
    assert np.all(masked.train.status == AttrStatus.KNOWN)
    a = baselines.train_regk(pretrained, masked.train, _cfg())
    b = baselines.train_oracle(pretrained, masked.train, _cfg())
    assert a.model.equals(b.model)


def test_regk_ignores_missing_attributes(tiny_split, pretrained):
    masked = ingest.apply_mask_plan(tiny_split, MaskPlan(0.5, 0.0, 1))
    a = baselines.train_regk(pretrained, masked.train, _cfg())
    # scrambling the hidden attributes of missing rows must not matter
    train = masked.train
    flipped = type(train)(train.users, train.items, train.ratings, train.status,
                          train.attr, 1 - train.true_attr, train.n_users, train.n_items)
    b = baselines.train_regk(pretrained, flipped, _cfg())
    assert a.model.equals(b.model)


def test_fairness_terms_change_the_model(tiny_split, pretrained):
    masked = ingest.apply_mask_plan(tiny_split, MaskPlan(0.5, 0.0, 1))
    basic = baselines.train_basic_mf(pretrained, masked.train, _cfg())
    oracle = baselines.train_oracle(pretrained, masked.train, _cfg())
    assert not basic.model.equals(oracle.model)
    t = masked.train
    def gap(m):
        p = m.predict(t.users, t.items)
        return abs(p[t.true_attr == 0].mean() - p[t.true_attr == 1].mean())
    assert gap(oracle.model) < gap(basic.model)


def _recon(masked, conf):
    user_attr = np.where(masked.user_status() > 0, masked.user_attr, -1)
    user_conf = np.where(user_attr >= 0, conf, np.nan)
    return ReconstructedDataset.from_user_arrays(masked.train, user_attr, user_conf)


def test_cgl_randomisation(tiny_split):
    masked = ingest.apply_mask_plan(tiny_split, MaskPlan(0.3, 0.0, 1))
    rng = np.random.default_rng(0)
    conf = rng.uniform(0.5, 1.0, masked.n_users)
    rec = _recon(masked, conf)
    same = baselines.randomize_low_confidence(rec, 0.0, seed=3)
    np.testing.assert_array_equal(same.recon_attr, rec.recon_attr)
    out = baselines.randomize_low_confidence(rec, 0.8, seed=3)
    again = baselines.randomize_low_confidence(rec, 0.8, seed=3)
    np.testing.assert_array_equal(out.recon_attr, again.recon_attr)
    confident = (rec.recon_confidence >= 0.8)
    np.testing.assert_array_equal(out.recon_attr[confident], rec.recon_attr[confident])
    # attributes stay constant per user
    base = rec.base
    for u in np.unique(base.users[base.status != 0])[:20]:
        assert len(np.unique(out.recon_attr[base.users == u])) == 1
    everyone = baselines.randomize_low_confidence(rec, 1.01, seed=3)
    missing = base.status != 0
    assert set(np.unique(everyone.recon_attr[missing])) <= {0, 1}


def test_flrsa_excludes_forbidden_rows(tiny_split, pretrained):
    masked = ingest.apply_mask_plan(tiny_split, MaskPlan(0.3, 0.5, 1))
    rec = reconstruct.reconstruct(masked, seed=0).apply(masked.train)
    a = baselines.train_flrsa(pretrained, rec, _cfg())
    # changing the forbidden rows' guesses does not affect FLrSA
    attr = np.where(rec.base.status == AttrStatus.FORBIDDEN, 1 - rec.recon_attr, rec.recon_attr)
    b = baselines.train_flrsa(pretrained, ReconstructedDataset(rec.base, attr, rec.recon_confidence),
                              _cfg())
    assert a.model.equals(b.model)
    c = baselines.train_cgl(pretrained, rec, _cfg(), tau=0.5)
    assert np.all(np.isfinite(c.model.item_emb))


def test_drfo_trainer_runs_with_forbidden(tiny_split, pretrained):
    masked = ingest.apply_mask_plan(tiny_split, MaskPlan(0.3, 1.0, 1))
    rec = reconstruct.reconstruct(masked, seed=0).apply(masked.train)
    assert len(rec.base.index_r) == 0
    res = baselines.train_drfo(pretrained, rec, (0.2, 0.2), _cfg())
    assert set(res.distributions[0]) == {"b"}
