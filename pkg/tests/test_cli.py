import json

import pytest

from drfo import cli, mf

TINY = ["--set", "dataset=tiny", "--set", "user_k=5", "--set", "item_k=5",
        "--set", "pretrain_lr=[0.01]", "--set", "pretrain_wd=[1e-5]",
        "--set", "pretrain_epochs=3", "--set", "dim=8", "--set", "finetune_lr=0.01"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for stage in (["ingest", "--retention", "0.5", "--forbid", "0.2"], ["pretrain"],
                  ["reconstruct"]):
        assert cli.main(stage + ["--out", str(root)] + TINY) == 0
    return root


def test_missing_artifact_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--out", str(tmp_path), *TINY)
    assert code == 3 and "drfo ingest" in err


def test_usage_errors(tmp_path, capsys):
    code, _, err = run(capsys, "ingest", "--out", str(tmp_path), "--set", "nope=1")
    assert code == 2 and "nope" in err
    code, _, err = run(capsys, "ingest", "--out", str(tmp_path), "--set", "dim=0")
    assert code == 2 and "dim" in err
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])


def test_bad_input_data(tmp_path, capsys):
    d = tmp_path / "ml"
    d.mkdir()
    (d / "users.dat").write_text("1::X::1::1::1\n")
    (d / "ratings.dat").write_text("1::1::5::0\n")
    code, _, err = run(capsys, "ingest", "--out", str(tmp_path), "--set", f"dataset=movielens:{d}")
    assert code == 4 and "gender" in err


def test_pipeline_artifacts(pipeline, capsys):
    for name in ("train.tsv", "validation.tsv", "test.tsv", "user_attrs.tsv", "dataset.json",
                 "pretrained.npz", "reconstruction.tsv"):
        assert (pipeline / name).exists()
        manifest = json.loads((pipeline / f"{name}.manifest.json").read_text())
        assert manifest["config"]["dataset"] == "tiny"
    for method in ("basicmf", "oracle", "regk", "flrsa", "cgl", "drfo"):
        code, out, _ = run(capsys, "train", "--method", method, "--epochs", "1",
                           "--out", str(pipeline), *TINY)
        assert code == 0 and "val rmse" in out
        assert (pipeline / f"model_{method}.npz").exists()
    code, _, _ = run(capsys, "train", "--method", "nope", "--out", str(pipeline), *TINY)
    assert code == 2
    code, out, _ = run(capsys, "evaluate", "--model", str(pipeline / "model_drfo.npz"),
                       "--out", str(pipeline), *TINY)
    assert code == 0 and "dp=" in out
    rows = (pipeline / "metrics_model_drfo.tsv").read_text().splitlines()
    assert rows[0] == "metric\tvalue" and rows[1].startswith("dp\t")


def test_zero_radius_matches_flrsa(pipeline, capsys):
    # without forbidden rows zero-radius DRFO is the fixed-weight trainer
    root = pipeline.parent / "cli_nob"
    for stage in (["ingest", "--retention", "0.5"], ["pretrain"], ["reconstruct"]):
        assert cli.main(stage + ["--out", str(root)] + TINY) == 0
    for method, extra in (("drfo", ["--rho", "0"]), ("flrsa", [])):
        assert cli.main(["train", "--method", method, "--lam", "5", "--epochs", "1",
                         "--out", str(root)] + extra + TINY) == 0
    a = mf.load_checkpoint(root / "model_drfo.npz")
    b = mf.load_checkpoint(root / "model_flrsa.npz")
    assert a.equals(b)


def test_sweep_command(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--out", str(tmp_path), *TINY,
                       "--set", "seeds=[0]", "--set", "retention_ratios=[0.5]",
                       "--set", "methods=[BasicMF, RegK]", "--set", "lam_grid=[1.0]",
                       "--set", "finetune_epochs=1")
    assert code == 0 and "mean DP" in out
    assert (tmp_path / "report.tsv").exists() and (tmp_path / "report_long.tsv").exists()
