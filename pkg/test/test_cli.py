import logging

import pandas as pd
import pytest

from evf import cli
from evf.pushworld import read_manifest

TINY = """\
# tiny corpus and model
data.K_train=3
data.K_test=2
data.N=8
data.T=6
data.T_eval=6
model.context_dim=3
model.latent_dim=3
model.hidden_dim=8
train.steps=2
train.meta_batch_objects=2
train.trajectories_per_object=2
train.support_size=3
eval.K=2
eval.horizon=3
eval.support_size=3
embed.draws=2
embed.support_size=3
plan.candidates=8
plan.elites=2
plan.cem_iters=2
plan.horizon=2
plan.episodes=2
plan.episode_length=2
plan.support_size=3
"""


@pytest.fixture
def tiny_args(tmp_path):
    config = tmp_path / "tiny.txt"
    config.write_text(TINY)
    return ["--config", str(config), "--set", "data_dir=%s" % (tmp_path / "data"), "-q"]


def run(command, args, *extra):
    return cli.main([command, *args, *extra])


def test_gen_data(tmp_path, tiny_args):
    assert run("gen-data", tiny_args) == 0
    data = tmp_path / "data"
    assert len(read_manifest(data / "manifest.txt")) == 5
    lines = (data / "resolved_config.txt").read_text().splitlines()
    assert lines[0].startswith("# build: ")
    assert "data.K_train=3" in lines and "seed=0" in lines


def test_gen_data_existing_outputs(tmp_path, tiny_args, caplog):
    assert run("gen-data", tiny_args) == 0
    before = (tmp_path / "data" / "object_000.evfd").read_bytes()
    with caplog.at_level(logging.ERROR, logger="evf"):
        assert run("gen-data", tiny_args) == 1
    assert "FileExistsError" in caplog.text
    assert run("gen-data", tiny_args, "--force") == 0
    assert (tmp_path / "data" / "object_000.evfd").read_bytes() == before


@pytest.mark.parametrize(
    "extra, message",
    [
        pytest.param(["--set", "train.nope=1"], "unknown config key", id="unknown_key"),
        pytest.param(["--set", "novalue"], "key=value", id="malformed"),
    ],
)
def test_bad_settings(tiny_args, caplog, extra, message):
    with caplog.at_level(logging.ERROR, logger="evf"):
        assert run("gen-data", tiny_args, *extra) == 1
    assert message in caplog.text


def test_seed_and_set_order(tiny_args):
    args = cli.build_parser().parse_args(["gen-data", *tiny_args, "--seed", "3"])
    assert cli.settings_from_args(args)["seed"] == 3
    args = cli.build_parser().parse_args(["gen-data", *tiny_args, "--seed", "3",
                                          "--set", "seed=4"])
    assert cli.settings_from_args(args)["seed"] == 4


def test_missing_manifest(tmp_path, tiny_args, caplog):
    with caplog.at_level(logging.ERROR, logger="evf"):
        assert run("train", tiny_args) == 1
    assert str(tmp_path / "data" / "manifest.txt") in caplog.text


def test_missing_checkpoint(tmp_path, tiny_args, caplog):
    assert run("gen-data", tiny_args) == 0
    with caplog.at_level(logging.ERROR, logger="evf"):
        assert run("eval", tiny_args) == 1
    assert "model.evfp" in caplog.text


def test_derived_paths(tmp_path):
    settings = cli.resolve_settings(overrides={"data_dir": str(tmp_path)})
    assert cli.manifest_path(settings) == tmp_path / "manifest.txt"
    assert cli.checkpoint_path(settings, "no-context") == (
        tmp_path / "runs" / "train-no-context" / "model.evfp")
    settings["paths.checkpoint"] = str(tmp_path / "elsewhere.evfp")
    assert cli.checkpoint_path(settings, "evf") == tmp_path / "elsewhere.evfp"


@pytest.fixture
def trained(tmp_path, tiny_args):
    assert run("gen-data", tiny_args) == 0
    assert run("train", tiny_args) == 0
    assert run("train", tiny_args, "--method", "no-context") == 0
    return tmp_path / "data" / "runs"


def test_train_outputs(trained, tiny_args):
    log = pd.read_csv(trained / "train-evf" / "train_log.csv")
    assert list(log["step"]) == [1, 2]
    assert (trained / "train-no-context" / "model.evfp.cfg").exists()
    assert run("train", tiny_args) == 1
    assert run("train", tiny_args, "--resume", "--set", "train.steps=3") == 0
    log = pd.read_csv(trained / "train-evf" / "train_log.csv")
    assert list(log["step"]) == [1, 2, 3]


def test_pipeline(trained, tiny_args):
    assert run("eval", tiny_args) == 0
    assert run("eval", tiny_args, "--method", "no-context") == 0
    assert run("eval", tiny_args, "--set", "eval.mismatched=true") == 0
    curves = pd.read_csv(trained / "eval-evf" / "eval_curves.csv")
    assert list(curves.columns) == ["time", "psnr", "ssim"] and len(curves) == 3
    assert (trained / "eval-evf-mismatched" / "eval_summary.txt").exists()

    assert run("embed", tiny_args) == 0
    pca = pd.read_csv(trained / "embed" / "pca.csv")
    assert list(pca.columns) == ["object_id", "draw", "x", "y"] and len(pca) == 4
    assert len(pd.read_csv(trained / "embed" / "objects.csv")) == 2

    for method in ("evf", "no-context", "no-motion"):
        assert run("plan", tiny_args, "--method", method) == 0
    episodes = pd.read_csv(trained / "plan-no-motion-reposition" / "episodes.csv")
    assert len(episodes) == 2 * 2 * 2
    assert (episodes[["action_x", "action_y"]] == 0).all().all()
    assert set(episodes["split"]) == {"train", "test"}

    assert run("report", tiny_args) == 0
    control = pd.read_csv(trained / "report" / "report_control.csv")
    assert set(control["method"]) == {"evf", "no-context", "no-motion"}
    paired = pd.read_csv(trained / "report" / "report_paired.csv")
    assert len(paired) == 4 and set(paired["run_a"]) == {"eval-evf"}
    assert "paired comparison" in (trained / "report" / "report.txt").read_text()


def test_eval_reproducible(trained, tiny_args, tmp_path):
    assert run("eval", tiny_args, "--out", str(tmp_path / "a")) == 0
    assert run("eval", tiny_args, "--out", str(tmp_path / "b")) == 0
    for name in ("eval_trajectories.csv", "resolved_config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_without_runs(tmp_path, tiny_args, caplog):
    (tmp_path / "data" / "runs" / "empty").mkdir(parents=True)
    with caplog.at_level(logging.ERROR, logger="evf"):
        assert run("report", tiny_args) == 1
    assert "FileNotFoundError" in caplog.text
