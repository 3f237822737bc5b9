"""Command-line driver tests: config plumbing, the full pipeline, reruns, exit codes.

Everything runs in-process through main(argv) against a deliberately tiny
config, so the whole file stays fast while still exercising real training.
"""

import json
import os

import numpy as np
import pytest

import heaprlab.cli as cli
from heaprlab.bench import load_corpus
from heaprlab.heapr import read_importance_csv, read_manifest_json
from heaprlab.model import load_model

TINY_TOML = """
calib_batch_size = 4
seed = 0
out_dir = "run"

[model]
vocab = 8
d_model = 4
d_inter = 2
num_experts = 2
kappa = 1
num_layers = 1
seq_len = 8
seed = 0

[corpus]
vocab = 8
num_sequences = 40
seq_len = 8
fractions = [0.6, 0.2, 0.2]
seed = 0

[train]
hot_steps = 60
hot_lr = 0.5
hot_chunk = 30
cool_steps = 40
polish_steps = 40
batch_size = 4

[prune]
ratio = 0.5
channel_floor = 0

[eval]
split = "test"
batch_size = 8
"""


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.toml").write_text(TINY_TOML)
    return tmp_path


def run(*argv) -> int:
    return cli.main(list(argv))


# --- parser surface -----------------------------------------------------------


def test_help_and_version_exit_zero(capsys):
    for argv in (["--help"], ["--version"], ["train", "--help"], ["sweep", "--help"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 0
    assert "COMMAND" in capsys.readouterr().out


def test_every_promised_subcommand_exists():
    assert set(cli._COMMANDS) == {
        "gen-corpus", "train", "calibrate", "score", "prune",
        "eval", "oracle", "sweep", "compare",
    }


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["transmogrify"])
    assert exc.value.code == 2


# --- config handling -----------------------------------------------------------


def test_config_file_and_overrides_compose(workdir):
    config = cli.load_config("tiny.toml", ["prune.ratio=0.25", "seed=7", "eval.split=calib"])
    assert config.model.vocab == 8
    assert config.prune.ratio == 0.25
    assert config.seed == 7
    assert config.eval.split == "calib"
    assert config.corpus.fractions == (0.6, 0.2, 0.2)


def test_override_value_coercion(workdir):
    config = cli.load_config(None, [
        "corpus.fractions=0.5,0.25,0.25",
        "corpus.num_sequences=100",
        "deterministic=true",
        "prune.mode=layerwise",
    ])
    assert config.corpus.fractions == (0.5, 0.25, 0.25)
    assert config.corpus.num_sequences == 100
    assert config.deterministic is True
    assert config.prune.mode == "layerwise"


def test_config_errors_exit_2(workdir, capsys):
    (workdir / "broken.toml").write_text("[model\nvocab = 8\n")
    (workdir / "unknown.toml").write_text("[rocket]\nfuel = 3\n")
    (workdir / "badkey.toml").write_text("[model]\nwingspan = 3\n")
    (workdir / "badval.toml").write_text("[model]\nvocab = 1\n")
    cases = [
        ("train", "--config", "missing.toml"),
        ("train", "--config", "broken.toml"),
        ("train", "--config", "unknown.toml"),
        ("train", "--config", "badkey.toml"),
        ("train", "--config", "badval.toml"),
        ("train", "--set", "novalue"),
        ("train", "--set", "rocket.fuel=3"),
        ("gen-corpus", "--config", "tiny.toml", "--set", "model.vocab=16"),  # vocab mismatch
    ]
    for argv in cases:
        assert run(*argv) == 2, argv
        assert "config error" in capsys.readouterr().err


# --- the pipeline ----------------------------------------------------------------


def test_full_pipeline_writes_every_artifact(workdir, capsys):
    base = ("--config", "tiny.toml")
    assert run("gen-corpus", *base) == 0
    assert run("train", *base) == 0
    assert run("calibrate", *base) == 0
    assert run("score", *base) == 0
    assert run("prune", *base) == 0
    assert run("eval", *base) == 0
    assert run("oracle", *base) == 0
    assert run("sweep", *base, "--ratios", "0,0.5") == 0
    assert run("compare", *base, "--ratios", "0,0.5", "--methods", "heapr,random") == 0
    capsys.readouterr()

    out = workdir / "run"
    corpus = load_corpus(out / "corpus.npz")
    assert corpus.train.shape == (24, 8)
    assert corpus.calib.shape == (8, 8)

    model = load_model(out / "model.npz")
    assert model.config.vocab == 8

    train_report = json.loads((out / "train.json").read_text())
    assert train_report["steps_kept"] > 0
    assert np.isfinite(train_report["calib_perplexity"])

    calibrate = json.loads((out / "calibrate.json").read_text())
    assert calibrate["forward_passes"] == calibrate["batches"]
    assert calibrate["backward_passes"] == calibrate["batches"]
    with np.load(out / "covariances.npz") as data:
        assert "matrix:0:0" in data and "count:0:1" in data

    table = read_importance_csv(out / "importance.csv")
    assert table.method == "heapr"
    assert len(table.scores) == 4  # 1 layer * 2 experts * 2 channels

    manifest = read_manifest_json(out / "prune_manifest.json")
    assert len(manifest.pruned) == 2  # ratio 0.5 of 4 channels
    pruned_model = load_model(out / "pruned_model.npz")
    assert sum(w.channels for w in pruned_model.layers[0].experts) == 2

    eval_report = json.loads((out / "eval.json").read_text())
    assert eval_report["split"] == "test"
    # with kappa=1 a whole dropped expert leaves expected flops unchanged,
    # so only the parameter count is guaranteed to shrink here
    assert eval_report["pruned_flops"]["param_fraction_removed"] > 0.0
    assert eval_report["pruned_flops"]["total_saving"] >= 0.0
    assert eval_report["pruned_perplexity"] >= 1.0

    oracle_report = json.loads((out / "oracle.json").read_text())
    assert -1.0 <= oracle_report["spearman_rho"] <= 1.0
    assert oracle_report["fisher_exact_rel_error"] <= 1e-12
    assert (out / "obs.csv").exists() and (out / "obs.json").exists()

    sweep_lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(sweep_lines) == 1 + 2
    compare_lines = (out / "compare.csv").read_text().strip().splitlines()
    assert len(compare_lines) == 1 + 2 * 2

    for command in ("gen-corpus", "train", "calibrate", "score", "prune", "eval",
                    "oracle", "sweep", "compare"):
        payload = json.loads((out / f"{command}_run.json").read_text())
        assert payload["command"] == command
        assert len(payload["config_hash"]) == 16
        assert payload["config"]["model"]["vocab"] == 8


def test_rerun_reproduces_artifacts_byte_for_byte(workdir, capsys):
    base = ("--config", "tiny.toml")
    assert run("gen-corpus", *base) == 0
    assert run("train", *base) == 0
    assert run("score", *base) == 0
    assert run("prune", *base) == 0
    capsys.readouterr()
    out = workdir / "run"
    first = {
        name: (out / name).read_bytes()
        for name in ("importance.csv", "prune_manifest.json", "model.npz")
    }
    (out / "importance.csv").unlink()
    (out / "prune_manifest.json").unlink()
    assert run("score", *base) == 0
    assert run("prune", *base) == 0
    capsys.readouterr()
    assert (out / "importance.csv").read_bytes() == first["importance.csv"]
    assert (out / "prune_manifest.json").read_bytes() == first["prune_manifest.json"]
    assert (out / "model.npz").read_bytes() == first["model.npz"]  # untouched by reruns


def test_score_reuses_saved_covariances(workdir, capsys):
    base = ("--config", "tiny.toml")
    assert run("gen-corpus", *base) == 0
    assert run("train", *base) == 0
    assert run("calibrate", *base) == 0
    assert run("score", *base) == 0
    assert run("score", *base, "--out", "direct") == 0  # no covariances.npz there
    capsys.readouterr()
    via_cache = (workdir / "run" / "importance.csv").read_bytes()
    direct = (workdir / "direct" / "importance.csv").read_bytes()
    assert via_cache == direct


def test_out_root_env_redirects_relative_out_dirs(workdir, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(workdir / "elsewhere"))
    assert run("gen-corpus", "--config", "tiny.toml") == 0
    capsys.readouterr()
    assert (workdir / "elsewhere" / "run" / "corpus.npz").exists()
    assert not (workdir / "run").exists()


def test_stale_corpus_from_other_spec_is_refused(workdir, capsys):
    base = ("--config", "tiny.toml")
    assert run("gen-corpus", *base) == 0
    assert run("calibrate", *base, "--set", "corpus.skew=0.2") == 2
    assert "different corpus spec" in capsys.readouterr().err


def test_runtime_failures_exit_1(workdir, capsys):
    (workdir / "blocked").write_text("a file where a directory must go")
    assert run("gen-corpus", "--config", "tiny.toml", "--out", "blocked") == 1
    capsys.readouterr()
    assert run("sweep", "--config", "tiny.toml", "--ratios", "0.5,0.2") == 1  # not ascending
    capsys.readouterr()
    assert run("sweep", "--config", "tiny.toml", "--ratios", "abc") == 2  # unusable flag value
    capsys.readouterr()


def test_seed_flag_rewrites_manifest(workdir, capsys):
    assert run("gen-corpus", "--config", "tiny.toml", "--set", "corpus.seed=5", "--seed", "5", "--out", "s5") == 0
    capsys.readouterr()
    payload = json.loads((workdir / "s5" / "gen-corpus_run.json").read_text())
    assert payload["config"]["seed"] == 5
    assert payload["config"]["corpus"]["seed"] == 5


def test_compare_rejects_unknown_methods(workdir, capsys):
    assert run("compare", "--config", "tiny.toml", "--methods", "heapr,entropy") == 2
    assert "unknown methods" in capsys.readouterr().err
