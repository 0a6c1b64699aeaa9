import json

import numpy as np
import pytest

from conftest import needs_mnist
from ewc.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    CheckpointError,
    ConfigError,
    ExperimentConfig,
    build_config,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    main,
    parse_schedule,
    parse_value,
    penalties_from_arrays,
    perturbation_checks,
    read_config_file,
    save_checkpoint,
    segment_arrays,
)
from ewc.consolidation import FisherDiagonal, PenaltySet, QuadraticPenalty
from ewc.network import NetworkSpec, init_params

TINY = {"hidden": "12", "epochs": "1", "train_size": "300", "test_size": "200", "fisher_batches": "3"}


def tiny_args(tmp_path, command, *extra, out="out"):
    args = [command, "--out", str(tmp_path / out), "-q"]
    for k, v in TINY.items():
        args += ["--set", f"{k}={v}"]
    return args + list(extra)


# configuration


def test_precedence_flags_over_file_over_defaults(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("lr = 0.01\nepochs = 3  # comment\nhidden = 5, 6\n")
    file_values = read_config_file(cfg_file)
    cfg = build_config("permuted-mnist", file_values, {"epochs": 7})
    assert cfg.lr == 0.01 and cfg.epochs == 7 and cfg.hidden == (5, 6)
    assert cfg.batch_size == ExperimentConfig().batch_size


def test_experiment_defaults_layer_under_file():
    cfg = build_config("overlap")
    assert cfg.hidden == (100,) * 6 and cfg.regime == "ewc"
    cfg = build_config("overlap", {"hidden": (50, 50)})
    assert cfg.hidden == (50, 50)


def test_field_path_diagnostics(tmp_path):
    cfg_file = tmp_path / "bad.cfg"
    cfg_file.write_text("lr = 0.01\nepochs = many\n")
    with pytest.raises(ConfigError) as err:
        read_config_file(cfg_file)
    assert err.value.path == "bad.cfg:2.epochs"
    with pytest.raises(ConfigError) as err:
        build_config("permuted-mnist", {"lr": -1.0})
    assert err.value.path == "lr"
    with pytest.raises(ConfigError) as err:
        parse_value("learning_rate", "1", "--set")
    assert err.value.path == "--set.learning_rate"
    with pytest.raises(ConfigError):
        build_config("permuted-mnist", {"regime": "adam"})
    with pytest.raises(ConfigError):
        build_config("perturb", {"sigmas": ()})
    with pytest.raises(ConfigError):
        build_config("permuted-mnist", {"data_dir": str(tmp_path / "missing")})


def test_parse_values():
    assert parse_value("train_size", "none", "") is None
    assert parse_value("merge_penalties", "yes", "") is True
    assert parse_value("sigmas", "0, 0.1,0.2", "") == (0.0, 0.1, 0.2)
    assert parse_schedule("0:5, 1:7") == [(0, 5), (1, 7)]
    with pytest.raises(ConfigError):
        parse_schedule("0-5")
    with pytest.raises(ConfigError):
        parse_schedule("")


def test_config_errors_exit_one(tmp_path, capsys):
    assert main(["permuted-mnist", "--set", "lr=-3", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "lr" in capsys.readouterr().err
    assert main(["perturb", "--set", "sigmas=", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["permuted-mnist", "--config", str(tmp_path / "nope.cfg")]) == EXIT_CONFIG
    assert main(["recognize", "--set", "schedule=0:10", "--set", "burn_in=20"]) == EXIT_CONFIG
    # nothing was computed, so nothing was written
    assert not (tmp_path / "manifest.json").exists()


def test_full_and_desk_scale_flags():
    with pytest.raises(SystemExit):
        main(["permuted-mnist", "--full", "--desk-scale"])


# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    spec = NetworkSpec((5, 4, 3), task_conditioned=True, n_contexts=2)
    p = init_params(spec, 0)
    rng = np.random.default_rng(0)
    pens = PenaltySet((QuadraticPenalty(p.values, rng.random(spec.n_params)),))
    fish = [FisherDiagonal(rng.random(spec.n_params))]
    arrays = segment_arrays(p, pens, fish)
    digest = save_checkpoint(tmp_path / "a.ckpt", spec, arrays, {"segment": 0})
    spec2, arrays2, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert spec2 == spec and meta == {"segment": 0} and len(digest) == 64
    for k in arrays:
        assert np.array_equal(arrays[k], arrays2[k])
    restored = penalties_from_arrays(arrays2)
    assert np.array_equal(restored.penalties[0].coefficients, pens.penalties[0].coefficients)
    assert encode_checkpoint(spec, arrays, {"segment": 0}) == (tmp_path / "a.ckpt").read_bytes()


def test_checkpoint_corruption_detected():
    spec = NetworkSpec((3, 2))
    data = bytearray(encode_checkpoint(spec, {"params": np.arange(spec.n_params, dtype=float)}))
    data[-40] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(data))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"garbage" * 10)


def test_checkpoint_little_endian_payload():
    spec = NetworkSpec((1, 1))
    data = encode_checkpoint(spec, {"params": np.array([1.0, 2.0])})
    payload = data[-32 - 16 : -32]
    assert payload == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_perturbation_checks():
    s = {"unperturbed_accuracy": 0.9, "curves": {"uniform": [0.9, 0.7], "inverse-fisher": [0.9, 0.8],
                                                  "nullspace": [0.9, 0.85]}}
    out = perturbation_checks(s)
    assert out["damaged_sigma_indices"] == [1] and out["inverse_fisher_at_least_uniform"]
    assert out["nullspace_max_gap_to_inverse_fisher"] == pytest.approx(0.05)


# end to end on tiny settings


@needs_mnist
def test_permuted_mnist_writes_reports_and_is_deterministic(tmp_path):
    for out in ("a", "b"):
        assert main(tiny_args(tmp_path, "permuted-mnist", "--regime", "ewc", "--tasks", "2", out=out)) == EXIT_OK
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert set(manifest["checkpoints"]) == {"checkpoints/segment_0.ckpt", "checkpoints/segment_1.ckpt"}
    assert manifest["config"]["regime"] == "ewc" and manifest["artifact_version"]
    header = (a / "report.csv").read_text().splitlines()[0]
    assert header == "segment,task,metric,value"
    spec, arrays, meta = load_checkpoint(a / "checkpoints" / "segment_1.ckpt")
    assert "penalty/1/anchor" in arrays and meta["task"] == "B"


@needs_mnist
def test_perturb_from_checkpoint_and_manifest_ridge(tmp_path):
    assert main(tiny_args(tmp_path, "perturb", "--set", "eval_size=100", "--set", "episodes=1", out="p")) == EXIT_OK
    manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
    summary = json.loads((tmp_path / "p" / "perturb.json").read_text())
    fisher = load_checkpoint(tmp_path / "p" / "checkpoints" / "trained.ckpt")[1]["fisher/0"]
    # default ridge is the mean Fisher entry
    assert manifest["config"]["ridge_used"] == summary["ridge"] == float(fisher.mean())
    ckpt = tmp_path / "p" / "checkpoints" / "trained.ckpt"
    args = tiny_args(tmp_path, "perturb", "--set", "eval_size=100", "--set", "episodes=1",
                     "--set", f"checkpoint={ckpt}", out="q")
    assert main(args) == EXIT_OK
    p = json.loads((tmp_path / "p" / "perturb.json").read_text())
    q = json.loads((tmp_path / "q" / "perturb.json").read_text())
    assert p["curves"] == q["curves"]


@needs_mnist
def test_recognize_single_task_spawns_one_context(tmp_path):
    assert main(["recognize", "--out", str(tmp_path), "-q", "--set", "schedule=0:200"]) == EXIT_OK
    summary = json.loads((tmp_path / "recognition.json").read_text())
    assert summary["n_contexts"] == 1
    assert (tmp_path / "trace.csv").read_text().splitlines()[0] == "t,true_context,inferred_context,entropy"


@needs_mnist
def test_search_single_point_and_rerun_identical(tmp_path):
    point = ["--set", "lr_range=0.001,0.001", "--set", "width_range=8,8", "--set", "lam_range=5,5",
             "--set", "trials=2", "--tasks", "2"]
    for out in ("s1", "s2"):
        assert main(tiny_args(tmp_path, "search", *point, out=out)) == EXIT_OK
    best = json.loads((tmp_path / "s1" / "best.json").read_text())["best"]
    assert best == {"lam": 5.0, "lr": 0.001, "width": 8}
    assert (tmp_path / "s1" / "trials.csv").read_bytes() == (tmp_path / "s2" / "trials.csv").read_bytes()


@needs_mnist
def test_runtime_error_exit_two(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all, definitely not" * 3)
    args = tiny_args(tmp_path, "perturb", "--set", f"checkpoint={bad}")
    assert main(args) == EXIT_RUNTIME
