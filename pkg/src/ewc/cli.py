"""Command-line experiments: sequential permuted MNIST, Fisher overlap,
weight perturbation, online task recognition and random search.

Configuration comes from built-in defaults, then an optional flat
``key = value`` file, then command-line flags (highest precedence).
Exit codes: 0 success, 1 configuration error, 2 runtime or numerics error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import struct
import sys
import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .consolidation import (
    FISHER_MODES,
    PERTURBATION_SHAPES,
    ConsolidationError,
    EmptyNullspaceError,
    FisherDiagonal,
    PenaltySet,
    QuadraticPenalty,
    estimate_fisher_diagonal,
    layerwise_overlap,
    perturbation_sensitivity,
)
from .network import LOSS_REDUCTIONS, DropoutConfig, NetworkError, NetworkSpec, NonFiniteLossError, ParamVector
from .recognition import COMMIT_STATISTICS, RecognitionError, TaskRecognizer, burn_in_mask, relabeled_accuracy, task_stream
from .tasks import (
    IdxError,
    Permutation,
    PermutationError,
    load_mnist,
    make_partial_permutation,
    make_permutation,
    make_permuted_tasks,
    make_task,
    mnist_paths,
    split,
    subsample,
)
from .trainer import (
    DropoutRegime,
    EarlyStopConfig,
    EWCRegime,
    IntUniform,
    L2Regime,
    LogUniform,
    SequenceReport,
    SGDRegime,
    TrainConfig,
    TrainingError,
    evaluate,
    random_search,
    run_sequence,
)

logger = logging.getLogger("ewc")

EXPERIMENTS = ("permuted-mnist", "overlap", "perturb", "recognize", "search")
REGIMES = ("sgd", "l2", "dropout", "ewc")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

CHECKPOINT_MAGIC = b"EWCCKPT\x00"
CHECKPOINT_VERSION = 1
_DIGEST_SIZE = 32


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class CheckpointError(ValueError):
    pass


# configuration


@dataclass
class ExperimentConfig:
    experiment: str = "permuted-mnist"
    seed: int = 0
    out: str = "runs"
    data_dir: Optional[str] = None
    # sequential training
    tasks: int = 3
    regime: str = "sgd"
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 20
    hidden: tuple = (400, 400)
    loss_reduction: str = "sum"
    # searched on validation data for 2x400 at batch 128 with the summed loss
    lam: float = 10000.0
    l2: float = 1.0
    fisher_batches: int = 100
    fisher_batch_size: int = 32
    fisher_mode: str = "model"
    merge_penalties: bool = False
    input_drop: float = 0.2
    hidden_drop: float = 0.5
    patience: int = 5
    train_size: Optional[int] = 10000
    valid_fraction: float = 0.1
    test_size: Optional[int] = None
    checkpoints: bool = True
    # overlap
    small_square: int = 8
    large_square: int = 26
    # perturbation
    checkpoint: Optional[str] = None
    sigmas: tuple = (0.06, 0.08, 0.1, 0.15, 0.2, 0.3)
    # None: the mean Fisher entry
    ridge: Optional[float] = None
    episodes: int = 5
    eval_size: int = 1000
    # recognition
    schedule: str = "0:500,1:500,2:500,0:300,1:300"
    levels: int = 2
    downscale: int = 1
    window: int = 4
    update_period: int = 1
    prior_strength: float = 1.0
    burn_in: int = 50
    commit_statistic: str = "window-evidence"
    stream_split: str = "test"
    # search
    trials: int = 50
    workers: int = 1
    lr_range: tuple = (1e-5, 1e-3)
    width_range: tuple = (400, 2000)
    lam_range: tuple = (0.1, 100.0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# per-experiment defaults layered under the file and the flags
EXPERIMENT_DEFAULTS: dict[str, dict[str, Any]] = {
    "overlap": {"hidden": (100,) * 6, "regime": "ewc", "epochs": 20, "tasks": 2, "lam": 1000.0},
    "perturb": {"tasks": 1},
    "recognize": {},
    "search": {"regime": "ewc"},
    "permuted-mnist": {},
}

_TUPLE_ITEM = {"hidden": int, "sigmas": float, "lr_range": float, "width_range": int, "lam_range": float}
_CHOICES = {
    "experiment": EXPERIMENTS,
    "regime": REGIMES,
    "loss_reduction": LOSS_REDUCTIONS,
    "fisher_mode": FISHER_MODES,
    "commit_statistic": COMMIT_STATISTICS,
    "stream_split": ("train", "test"),
}
_OPTIONAL_INT = ("train_size", "test_size")
_OPTIONAL_STR = ("data_dir", "checkpoint")
_OPTIONAL_FLOAT = ("ridge",)


def _field_types() -> dict[str, Any]:
    return {f.name: type(f.default) for f in dataclasses.fields(ExperimentConfig)}


def parse_value(key: str, raw: str, where: str):
    """Convert one textual setting to the type of ``ExperimentConfig.key``."""
    types = _field_types()
    path = f"{where}.{key}" if where else key
    if key not in types:
        raise ConfigError(path, "unknown setting")
    text = raw.strip()
    try:
        if key in _TUPLE_ITEM:
            items = [s for s in text.replace(" ", "").split(",") if s]
            return tuple(_TUPLE_ITEM[key](s) for s in items)
        if key in _OPTIONAL_INT:
            return None if text.lower() in ("none", "full", "") else int(text)
        if key in _OPTIONAL_FLOAT:
            return None if text.lower() in ("none", "auto", "") else float(text)
        if key in _OPTIONAL_STR:
            return None if text.lower() in ("none", "") else text
        kind = types[key]
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as err:
        raise ConfigError(path, f"cannot parse {raw!r} ({err})") from None


def read_config_file(path) -> dict[str, Any]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"file not found: {p}")
    values: dict[str, Any] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p.name}:{lineno}", f"expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = parse_value(key, raw, f"{p.name}:{lineno}")
    return values


def build_config(experiment: str, file_values=None, overrides=None) -> ExperimentConfig:
    """Layer defaults < experiment defaults < file < overrides, then validate."""
    merged: dict[str, Any] = dict(EXPERIMENT_DEFAULTS.get(experiment, {}))
    merged.update(file_values or {})
    merged.update(overrides or {})
    if merged.get("experiment", experiment) != experiment:
        raise ConfigError("experiment", f"file declares {merged['experiment']!r} but command is {experiment!r}")
    merged["experiment"] = experiment
    cfg = ExperimentConfig(**merged)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    for key, options in _CHOICES.items():
        if getattr(cfg, key) not in options:
            raise ConfigError(key, f"must be one of {', '.join(options)}; got {getattr(cfg, key)!r}")
    positive = ("lr", "batch_size", "epochs", "tasks", "fisher_batches", "fisher_batch_size",
                "patience", "episodes", "eval_size", "levels", "downscale", "window",
                "update_period", "prior_strength", "trials", "workers")
    for key in positive:
        if not getattr(cfg, key) > 0:
            raise ConfigError(key, f"must be > 0; got {getattr(cfg, key)!r}")
    if cfg.ridge is not None and not cfg.ridge > 0:
        raise ConfigError("ridge", f"must be > 0; got {cfg.ridge!r}")
    for key in ("lam", "l2", "burn_in"):
        if getattr(cfg, key) < 0:
            raise ConfigError(key, f"must be >= 0; got {getattr(cfg, key)!r}")
    for key in ("input_drop", "hidden_drop"):
        if not 0.0 <= getattr(cfg, key) < 1.0:
            raise ConfigError(key, f"must lie in [0, 1); got {getattr(cfg, key)!r}")
    if not 0.0 < cfg.valid_fraction < 1.0:
        raise ConfigError("valid_fraction", f"must lie in (0, 1); got {cfg.valid_fraction!r}")
    for key in _OPTIONAL_INT:
        v = getattr(cfg, key)
        if v is not None and v < 1:
            raise ConfigError(key, f"must be >= 1 or 'none'; got {v!r}")
    if not cfg.hidden or any(w < 1 for w in cfg.hidden):
        raise ConfigError("hidden", f"needs positive widths; got {cfg.hidden!r}")
    if cfg.experiment == "perturb":
        if not cfg.sigmas:
            raise ConfigError("sigmas", "the sigma grid is empty")
        if any(s < 0 for s in cfg.sigmas):
            raise ConfigError("sigmas", "sigmas must be >= 0")
    for key in ("lr_range", "width_range", "lam_range"):
        lo_hi = getattr(cfg, key)
        if len(lo_hi) != 2 or not 0 < lo_hi[0] <= lo_hi[1]:
            raise ConfigError(key, f"needs 0 < low <= high; got {lo_hi!r}")
    for key in ("small_square", "large_square"):
        if not 0 <= getattr(cfg, key) <= 28:
            raise ConfigError(key, "square must fit a 28x28 image")
    if cfg.experiment == "recognize":
        sched = parse_schedule(cfg.schedule)
        if 28 % cfg.downscale:
            raise ConfigError("downscale", "must divide the image side 28")
        if cfg.burn_in >= min(n for _, n in sched):
            raise ConfigError("burn_in", "must be shorter than every segment")
    if cfg.experiment == "perturb" and cfg.checkpoint is not None and not Path(cfg.checkpoint).is_file():
        raise ConfigError("checkpoint", f"file not found: {cfg.checkpoint}")
    try:
        for split_name in ("train", "test"):
            mnist_paths(cfg.data_dir, split_name)
    except FileNotFoundError as err:
        raise ConfigError("data_dir", str(err)) from None


def parse_schedule(text: str) -> list[tuple[int, int]]:
    """``"0:500,1:500"`` -> [(0, 500), (1, 500)]."""
    out = []
    for part in (p.strip() for p in text.split(",") if p.strip()):
        try:
            task, length = (int(s) for s in part.split(":"))
        except ValueError:
            raise ConfigError("schedule", f"segment {part!r} is not task:length") from None
        if task < 0 or length < 1:
            raise ConfigError("schedule", f"segment {part!r} needs task >= 0 and length >= 1")
        out.append((task, length))
    if not out:
        raise ConfigError("schedule", "empty schedule")
    return out


def regime_from_config(cfg: ExperimentConfig):
    if cfg.regime == "sgd":
        return SGDRegime()
    if cfg.regime == "l2":
        return L2Regime(cfg.l2)
    if cfg.regime == "dropout":
        return DropoutRegime(DropoutConfig(cfg.input_drop, cfg.hidden_drop), EarlyStopConfig(cfg.patience))
    return EWCRegime(
        cfg.lam,
        fisher_batches=cfg.fisher_batches,
        fisher_mode=cfg.fisher_mode,
        fisher_batch_size=cfg.fisher_batch_size,
        merge_penalties=cfg.merge_penalties,
    )


def train_config(cfg: ExperimentConfig, regime=None, lr=None) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg.lr if lr is None else lr,
        batch_size=cfg.batch_size,
        epochs_per_task=cfg.epochs,
        regime=regime_from_config(cfg) if regime is None else regime,
        seed=cfg.seed,
        loss_reduction=cfg.loss_reduction,
    )


# checkpoints


def _block_map_dict(spec: NetworkSpec) -> list[dict]:
    def sl(s):
        return None if s is None else [s.start, s.stop]

    return [
        {
            "weight": sl(b.weight),
            "weight_shape": list(b.weight_shape),
            "bias": sl(b.bias),
            "context_bias": [sl(s) for s in b.context_bias],
            "context_gain": [sl(s) for s in b.context_gain],
        }
        for b in spec.block_map
    ]


def encode_checkpoint(spec: NetworkSpec, arrays: dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    """Serialize named float arrays with a JSON header and a trailing SHA-256."""
    names = list(arrays)
    header = {
        "spec": spec.to_dict(),
        "block_map": _block_map_dict(spec),
        "arrays": [{"name": n, "length": int(np.asarray(arrays[n]).size)} for n in names],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    for n in names:
        buf.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes) -> tuple[NetworkSpec, dict[str, np.ndarray], dict]:
    fixed = len(CHECKPOINT_MAGIC) + 8
    if len(data) < fixed + _DIGEST_SIZE or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    version, head_len = struct.unpack("<II", body[len(CHECKPOINT_MAGIC) : fixed])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(body[fixed : fixed + head_len])
    spec = NetworkSpec.from_dict(header["spec"])
    if header["block_map"] != _block_map_dict(spec):
        raise CheckpointError("block map does not match the stored spec")
    arrays = {}
    pos = fixed + head_len
    for entry in header["arrays"]:
        nbytes = 8 * entry["length"]
        if pos + nbytes > len(body):
            raise CheckpointError(f"array {entry['name']!r} is truncated")
        arrays[entry["name"]] = np.frombuffer(body[pos : pos + nbytes], dtype="<f8").astype(np.float64)
        pos += nbytes
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last array")
    return spec, arrays, header["meta"]


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, spec, arrays, meta=None) -> str:
    """Write a checkpoint atomically; returns its SHA-256 hex digest."""
    data = encode_checkpoint(spec, arrays, meta)
    _atomic_write(Path(path), data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[NetworkSpec, dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def segment_arrays(params: ParamVector, penalties: PenaltySet, fishers: Sequence[FisherDiagonal]) -> dict:
    arrays = {"params": params.values}
    for i, p in enumerate(penalties):
        arrays[f"penalty/{i}/anchor"] = p.anchor
        arrays[f"penalty/{i}/coefficients"] = p.coefficients
    for i, f in enumerate(fishers):
        arrays[f"fisher/{i}"] = f.values
    return arrays


def penalties_from_arrays(arrays: dict) -> PenaltySet:
    out = []
    i = 0
    while f"penalty/{i}/anchor" in arrays:
        out.append(QuadraticPenalty(arrays[f"penalty/{i}/anchor"], arrays[f"penalty/{i}/coefficients"]))
        i += 1
    return PenaltySet(tuple(out))


# reports


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_bytes(header: Sequence[str], rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue().encode()


def json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


@dataclass
class RunManifest:
    experiment: str
    config: dict
    artifact_version: str = __version__
    checkpoints: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "manifest.json"
        _atomic_write(path, json_bytes(dataclasses.asdict(self)))
        return path


class Run:
    """Output directory plus the manifest being collected for it."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(cfg.experiment, cfg.to_dict())
        self.start = time.perf_counter()

    def write(self, name: str, data: bytes) -> Path:
        path = self.out / name
        _atomic_write(path, data)
        self.manifest.outputs[name] = hashlib.sha256(data).hexdigest()
        return path

    def checkpoint(self, name: str, spec, arrays, meta=None) -> Path:
        path = self.out / "checkpoints" / name
        self.manifest.checkpoints[f"checkpoints/{name}"] = save_checkpoint(path, spec, arrays, meta)
        return path

    def finish(self, **timing) -> Path:
        self.manifest.timing = {"total_seconds": time.perf_counter() - self.start, **timing}
        return self.manifest.write(self.out)


def network_spec(cfg: ExperimentConfig, n_inputs: int = 784, n_classes: int = 10) -> NetworkSpec:
    return NetworkSpec((n_inputs, *cfg.hidden, n_classes))


def load_splits(cfg: ExperimentConfig):
    return load_mnist(cfg.data_dir, "train"), load_mnist(cfg.data_dir, "test")


def sequence_rows(report: SequenceReport):
    return report.rows()


# commands


def cmd_permuted_mnist(cfg: ExperimentConfig) -> dict:
    """Train ``cfg.tasks`` permuted tasks in sequence and write the report."""
    run = Run(cfg)
    train, test = load_splits(cfg)
    tasks = make_permuted_tasks(
        train, test, cfg.tasks, cfg.seed, cfg.valid_fraction, cfg.train_size, cfg.test_size
    )
    spec = network_spec(cfg, train.n_pixels)
    tcfg = train_config(cfg)

    def on_segment(i: int, report: SequenceReport) -> None:
        if cfg.checkpoints:
            run.checkpoint(
                f"segment_{i}.ckpt",
                spec,
                segment_arrays(report.params, report.penalties, report.fishers),
                {"segment": i, "task": tasks[i].name, "permutation_seed": tasks[i].permutation.seed},
            )

    report = run_sequence(spec, tasks, tcfg, on_segment=on_segment)
    run.write("report.csv", csv_bytes(("segment", "task", "metric", "value"), report.rows()))
    summary = report.to_dict(include_timing=False)
    summary["permutation_seeds"] = [t.permutation.seed for t in tasks]
    summary["config"] = tcfg.to_dict()
    run.write("report.json", json_bytes(summary))
    run.finish(segment_seconds=report.seconds)
    return {"report": report, "tasks": tasks, "spec": spec}


def overlap_tasks(cfg: ExperimentConfig, train, test, square: int):
    """Plain MNIST followed by a version with a centred ``square`` block shuffled."""
    pool = subsample(train, cfg.train_size, cfg.seed)
    tr, va = split(pool, cfg.valid_fraction, cfg.seed + 1)
    te = subsample(test, cfg.test_size, cfg.seed + 2)
    side = int(round(train.n_pixels ** 0.5))
    first = Permutation.identity(train.n_pixels)
    second = make_partial_permutation(side, square, [cfg.seed, square])
    return [make_task(first, tr, va, te, "original"), make_task(second, tr, va, te, f"square{square}")]


def cmd_overlap(cfg: ExperimentConfig) -> dict:
    """Per-layer Fisher overlap for a small and a large partial permutation."""
    run = Run(cfg)
    train, test = load_splits(cfg)
    spec = network_spec(cfg, train.n_pixels)
    regime = regime_from_config(cfg)
    if not isinstance(regime, EWCRegime):
        # Fishers are needed for both tasks whatever the training regime
        regime = EWCRegime(0.0, cfg.fisher_batches, cfg.fisher_mode, cfg.fisher_batch_size)
    tcfg = train_config(cfg, regime=regime)
    rows, result = [], {}
    for square in (cfg.small_square, cfg.large_square):
        tasks = overlap_tasks(cfg, train, test, square)
        report = run_sequence(spec, tasks, tcfg)
        f1, f2 = report.fishers
        layers = layerwise_overlap(spec, f1, f2)
        condition = f"{square}x{square}"
        result[condition] = {"overlap": layers, "accuracy": report.accuracy}
        for layer, value in enumerate(layers):
            rows.append((condition, layer, "overlap", value))
        for seg, accs in enumerate(report.accuracy):
            for t, acc in zip(tasks, accs):
                rows.append((condition, seg, f"test_accuracy_{t.name}", acc))
        if cfg.checkpoints:
            run.checkpoint(
                f"overlap_{condition}.ckpt",
                spec,
                segment_arrays(report.params, report.penalties, report.fishers),
                {"condition": condition},
            )
    run.write("overlap.csv", csv_bytes(("condition", "index", "metric", "value"), rows))
    run.write("overlap.json", json_bytes(result))
    run.finish()
    return result


def cmd_perturb(cfg: ExperimentConfig) -> dict:
    """Accuracy under uniform, inverse-Fisher and nullspace weight noise."""
    run = Run(cfg)
    train, test = load_splits(cfg)
    tasks = make_permuted_tasks(train, test, 1, cfg.seed, cfg.valid_fraction, cfg.train_size, cfg.test_size)
    task = tasks[0]
    if cfg.checkpoint is not None:
        spec, arrays, _ = load_checkpoint(cfg.checkpoint)
        if "fisher/0" not in arrays:
            raise ConfigError("checkpoint", "checkpoint carries no Fisher diagonal (fisher/0)")
        params = ParamVector(spec, arrays["params"])
        fisher = FisherDiagonal(arrays["fisher/0"], cfg.fisher_batches * cfg.fisher_batch_size, cfg.fisher_mode)
    else:
        spec = network_spec(cfg, train.n_pixels)
        report = run_sequence(spec, tasks, train_config(cfg, regime=SGDRegime()))
        params = report.params
        fisher = estimate_fisher_diagonal(
            spec, params, task.train, cfg.fisher_batches, cfg.fisher_batch_size, cfg.fisher_mode, [cfg.seed, 0, 2]
        )
        if cfg.checkpoints:
            run.checkpoint("trained.ckpt", spec, segment_arrays(params, PenaltySet(), [fisher]), {"task": task.name})
    ridge = float(fisher.values.mean()) if cfg.ridge is None else cfg.ridge
    eval_set = subsample(task.test, cfg.eval_size, cfg.seed + 3)
    curves = {}
    for k, shape in enumerate(PERTURBATION_SHAPES):
        try:
            curves[shape] = perturbation_sensitivity(
                spec, params, fisher, shape, cfg.sigmas, eval_set, cfg.episodes, [cfg.seed, k], ridge
            )
        except EmptyNullspaceError as err:
            logger.warning("%s", err)
    rows = []
    for shape, c in curves.items():
        for sigma, acc in c.rows():
            rows.append((shape, sigma, "accuracy", acc))
    summary = {
        "ridge": ridge,
        "sigmas": list(cfg.sigmas),
        "unperturbed_accuracy": evaluate(spec, params, eval_set),
        "curves": {s: c.accuracy for s, c in curves.items()},
        "nullspace_size": curves["nullspace"].nullspace_size if "nullspace" in curves else 0,
        "n_params": spec.n_params,
    }
    summary.update(perturbation_checks(summary))
    run.write("perturb.csv", csv_bytes(("shape", "sigma", "metric", "value"), rows))
    run.write("perturb.json", json_bytes(summary))
    run.manifest.config["ridge_used"] = ridge
    run.finish()
    return summary


def perturbation_checks(summary: dict, drop: float = 0.10) -> dict:
    """Inverse-Fisher vs uniform on every sigma where uniform lost ``drop``."""
    base = summary["unperturbed_accuracy"]
    curves = summary["curves"]
    uni, inv = curves.get("uniform", []), curves.get("inverse-fisher", [])
    damaged = [i for i, a in enumerate(uni) if base - a >= drop]
    out = {
        "damaged_sigma_indices": damaged,
        "inverse_fisher_at_least_uniform": bool(damaged) and all(inv[i] >= uni[i] for i in damaged),
    }
    null = curves.get("nullspace")
    if null:
        gap = float(max(abs(a - b) for a, b in zip(null, inv)))
        out["nullspace_max_gap_to_inverse_fisher"] = gap
    return out


def recognition_permutations(cfg: ExperimentConfig, n_tasks: int, n_pixels: int) -> list[Permutation]:
    seeds = np.random.default_rng(cfg.seed).integers(0, 2**31 - 1, size=n_tasks)
    return [make_permutation(n_pixels, int(s)) for s in seeds]


def spawn_events(trace) -> list[int]:
    """Trace positions (0-based) at which a new context appeared."""
    events, prev = [], 0
    for i, row in enumerate(trace):
        if row.n_contexts > prev:
            events.append(i)
        prev = row.n_contexts
    return events


def cmd_recognize(cfg: ExperimentConfig) -> dict:
    """Stream permuted digits through the task recognizer and score its labels."""
    run = Run(cfg)
    schedule = parse_schedule(cfg.schedule)
    data = load_mnist(cfg.data_dir, cfg.stream_split)
    n_tasks = max(t for t, _ in schedule) + 1
    perms = recognition_permutations(cfg, n_tasks, data.n_pixels)
    rec = TaskRecognizer(
        data.n_pixels,
        levels=cfg.levels,
        downscale=cfg.downscale,
        window=cfg.window,
        update_period=cfg.update_period,
        prior_strength=cfg.prior_strength,
        commit_statistic=cfg.commit_statistic,
    )
    trace = rec.run(task_stream(data, perms, schedule, cfg.seed))
    truth = [r.true_context for r in trace]
    inferred = [r.inferred_context for r in trace]
    mask = burn_in_mask(schedule, cfg.burn_in)
    # segment index of every step, and whether its task was seen earlier
    seg_of = np.repeat(np.arange(len(schedule)), [n for _, n in schedule])
    seen, revisit = set(), []
    for task, _ in schedule:
        revisit.append(task in seen)
        seen.add(task)
    spawns = spawn_events(trace)
    summary = {
        "n_contexts": rec.belief.n_contexts,
        "n_tasks": len(seen),
        "relabeled_accuracy": relabeled_accuracy(truth, inferred, mask),
        "spawn_steps": [int(s) + 1 for s in spawns],
        "revisit_spawns": int(sum(revisit[seg_of[s]] for s in spawns)),
        "confusion": sorted(
            ([int(a), int(b), int(c)] for (a, b), c in Counter(zip(truth, inferred)).items())
        ),
    }
    rows = ((r.t, r.true_context, r.inferred_context, r.entropy) for r in trace)
    run.write("trace.csv", csv_bytes(("t", "true_context", "inferred_context", "entropy"), rows))
    run.write("recognition.json", json_bytes(summary))
    run.finish()
    return summary


def search_space(cfg: ExperimentConfig) -> dict:
    space = {"lr": LogUniform(*cfg.lr_range), "width": IntUniform(*cfg.width_range)}
    if cfg.regime == "ewc":
        space["lam"] = LogUniform(*cfg.lam_range)
    elif cfg.regime == "l2":
        space["l2"] = LogUniform(*cfg.lam_range)
    return space


def validation_objective(cfg: ExperimentConfig, tasks, n_hidden: int):
    """Mean final validation accuracy over all tasks for a sampled point."""

    def objective(point: dict) -> float:
        trial_cfg = dataclasses.replace(
            cfg,
            lr=point.get("lr", cfg.lr),
            lam=point.get("lam", cfg.lam),
            l2=point.get("l2", cfg.l2),
            hidden=(point["width"],) * n_hidden if "width" in point else cfg.hidden,
        )
        spec = network_spec(trial_cfg, tasks[0].train.n_pixels)
        report = run_sequence(spec, tasks, train_config(trial_cfg))
        return float(np.mean([evaluate(spec, report.params, t.valid) for t in tasks]))

    return objective


def cmd_search(cfg: ExperimentConfig) -> dict:
    """Random search over learning rate, width and the regime's strength."""
    run = Run(cfg)
    train, test = load_splits(cfg)
    tasks = make_permuted_tasks(train, test, cfg.tasks, cfg.seed, cfg.valid_fraction, cfg.train_size, cfg.test_size)
    result = random_search(
        search_space(cfg),
        cfg.trials,
        validation_objective(cfg, tasks, len(cfg.hidden)),
        seed=cfg.seed,
        workers=cfg.workers,
    )
    rows = []
    for trial in result.trials:
        for key in sorted(trial):
            if key != "trial":
                rows.append((trial["trial"], key, trial[key]))
    run.write("trials.csv", csv_bytes(("trial", "key", "value"), rows))
    run.write("best.json", json_bytes({"best": result.best, "score": result.best_score}))
    run.finish()
    return {"best": result.best, "score": result.best_score, "trials": result.trials}


COMMANDS = {
    "permuted-mnist": cmd_permuted_mnist,
    "overlap": cmd_overlap,
    "perturb": cmd_perturb,
    "recognize": cmd_recognize,
    "search": cmd_search,
}


# argument parsing


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip().replace("-", "_"), value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--tasks", type=int)
    common.add_argument("--regime", choices=REGIMES)
    scale = common.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", action="store_true", help="subsample 10000 training examples (default)")
    scale.add_argument("--full", action="store_true", help="use the whole training set")
    common.add_argument("--set", action="append", type=_key_value, default=[], metavar="KEY=VALUE",
                        help="override any setting (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="ewc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "permuted-mnist": "train a sequence of permuted-MNIST tasks",
        "overlap": "per-layer Fisher overlap for partial permutations",
        "perturb": "accuracy under shaped weight noise",
        "recognize": "online task recognition on a permuted stream",
        "search": "random hyperparameter search",
    }
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides: dict[str, Any] = {}
    for key, raw in args.set:
        overrides[key] = parse_value(key, raw, "--set")
    for key in ("seed", "out", "tasks", "regime"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.full:
        overrides["train_size"] = None
    elif args.desk_scale:
        overrides["train_size"] = ExperimentConfig.train_size
    return build_config(args.command, file_values, overrides)


def _summary_line(command: str, result) -> str:
    if command == "permuted-mnist":
        rep = result["report"]
        return "final accuracy " + " ".join(f"{a:.4f}" for a in rep.final_accuracy())
    if command == "overlap":
        return "; ".join(f"{k}: " + " ".join(f"{v:.3f}" for v in r["overlap"]) for k, r in result.items())
    if command == "perturb":
        return json.dumps(result["curves"])
    if command == "recognize":
        return f"contexts {result['n_contexts']} accuracy {result['relabeled_accuracy']:.4f}"
    return f"best {result['best']} score {result['score']:.4f}"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        cfg = config_from_args(args)
    except (ConfigError, TypeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = COMMANDS[args.command](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        TrainingError,
        NonFiniteLossError,
        NetworkError,
        ConsolidationError,
        RecognitionError,
        IdxError,
        PermutationError,
        CheckpointError,
        OSError,
        FloatingPointError,
    ) as err:
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(_summary_line(args.command, result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
