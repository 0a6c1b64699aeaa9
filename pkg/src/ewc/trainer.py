"""Sequential-task SGD under plain, L2, dropout and EWC regimes."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .consolidation import (
    DEFAULT_FISHER_BATCHES,
    FisherDiagonal,
    PenaltySet,
    QuadraticPenalty,
    build_penalty,
    estimate_fisher_diagonal,
)
from .network import (
    Batch,
    LOSS_REDUCTIONS,
    DropoutConfig,
    NetworkSpec,
    NonFiniteLossError,
    ParamVector,
    init_params,
    loss_and_grad,
    predict,
    sample_dropout_masks,
)
from .tasks import Dataset, PermutedTask

logger = logging.getLogger(__name__)

DEFAULT_SEARCH_TRIALS = 50


class TrainingError(RuntimeError):
    """A training segment had to be aborted."""


@dataclass(frozen=True)
class EarlyStopConfig:
    patience: int = 5
    eval_every_epochs: int = 1

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.eval_every_epochs < 1:
            raise ValueError("eval_every_epochs must be >= 1")


@dataclass(frozen=True)
class SGDRegime:
    name = "sgd"


@dataclass(frozen=True)
class L2Regime:
    coefficient: float
    name = "l2"


@dataclass(frozen=True)
class DropoutRegime:
    dropout: DropoutConfig = DropoutConfig()
    early_stop: EarlyStopConfig = EarlyStopConfig()
    name = "dropout"


@dataclass(frozen=True)
class EWCRegime:
    lam: float
    fisher_batches: int = DEFAULT_FISHER_BATCHES
    fisher_mode: str = "model"
    fisher_batch_size: int = 32
    merge_penalties: bool = False
    name = "ewc"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


Regime = Union[SGDRegime, L2Regime, DropoutRegime, EWCRegime]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs_per_task: int = 20
    regime: Regime = SGDRegime()
    seed: int = 0
    # the data term of the objective is a log-likelihood, i.e. a sum over examples
    loss_reduction: str = "sum"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.loss_reduction not in LOSS_REDUCTIONS:
            raise ValueError(f"loss_reduction must be one of {LOSS_REDUCTIONS}")
        if self.batch_size < 1 or self.epochs_per_task < 1:
            raise ValueError("batch_size and epochs_per_task must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regime"] = {"name": self.regime.name, **asdict(self.regime)}
        return d


class EarlyStopper:
    """Stops once the validation error has risen more than ``patience`` times in a row."""

    def __init__(self, patience: int):
        self.patience = patience
        self.previous = math.inf
        self.best = math.inf
        self.best_index = -1
        self.rises = 0
        self.n_seen = 0

    def update(self, error: float) -> bool:
        if error > self.previous:
            self.rises += 1
        else:
            self.rises = 0
        if error < self.best:
            self.best = error
            self.best_index = self.n_seen
        self.previous = error
        self.n_seen += 1
        return self.rises > self.patience

    @property
    def improved_last(self) -> bool:
        return self.best_index == self.n_seen - 1


@dataclass
class TaskHistory:
    task: str
    epoch_loss: list[float] = field(default_factory=list)
    valid_error: list[float] = field(default_factory=list)
    epochs_run: int = 0
    stopped_early: bool = False
    restored_epoch: Optional[int] = None
    seconds: float = 0.0


def evaluate(spec: NetworkSpec, params: ParamVector, ds: Dataset, context: Optional[int] = None) -> float:
    """Fraction of argmax-correct predictions, no dropout."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x, y = ds.batch(slice(None))
    return float((predict(spec, params, x, context) == y).mean())


def _context(spec: NetworkSpec, index: int) -> Optional[int]:
    return index if spec.task_conditioned else None


def mean_validation_error(spec, params, tasks: Sequence[PermutedTask], contexts: Sequence[int]) -> float:
    errs = [1.0 - evaluate(spec, params, t.valid, _context(spec, c)) for t, c in zip(tasks, contexts)]
    return float(np.mean(errs))


def train_task(
    spec: NetworkSpec,
    params: ParamVector,
    task: PermutedTask,
    cfg: TrainConfig,
    penalties: PenaltySet = PenaltySet(),
    validation_tasks: Sequence[PermutedTask] = (),
    task_index: int = 0,
) -> tuple[ParamVector, TaskHistory]:
    """One training segment of ``cfg.epochs_per_task`` epochs of minibatch SGD.

    The input ``params`` are not modified. Under the dropout regime the
    segment stops early on rising average validation error over
    ``validation_tasks`` and the best snapshot is restored.
    """
    regime = cfg.regime
    if penalties and not isinstance(regime, (EWCRegime, L2Regime)):
        raise ValueError(f"penalties given to a {regime.name} segment")
    dropout = isinstance(regime, DropoutRegime)
    if dropout and not validation_tasks:
        validation_tasks = (task,)
    # validation tasks are the sequence prefix, so position == context id
    val_contexts = list(range(len(validation_tasks)))

    context = _context(spec, task_index)
    shuffle_rng = np.random.default_rng([cfg.seed, task_index, 0])
    mask_rng = np.random.default_rng([cfg.seed, task_index, 1])
    theta = params.values.copy()
    current = ParamVector(spec, theta)
    history = TaskHistory(task.name)
    stopper = EarlyStopper(regime.early_stop.patience) if dropout else None
    best = theta.copy()
    penalty = penalties if penalties else None
    n = len(task.train)
    start = time.perf_counter()

    for epoch in range(cfg.epochs_per_task):
        order = shuffle_rng.permutation(n)
        total, steps = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x, y = task.train.batch(idx)
            masks = None
            if dropout:
                masks = sample_dropout_masks(spec, regime.dropout, mask_rng, batch_size=len(idx))
            try:
                loss, grad = loss_and_grad(
                    spec, current, Batch(x, y), context, masks, penalty, cfg.loss_reduction
                )
            except NonFiniteLossError as err:
                raise TrainingError(
                    f"task {task.name}: non-finite loss at epoch {epoch} step {steps}"
                ) from err
            theta -= cfg.learning_rate * grad.values
            total += loss
            steps += 1
        history.epoch_loss.append(total / max(steps, 1))
        history.epochs_run = epoch + 1
        if stopper is not None and (epoch + 1) % regime.early_stop.eval_every_epochs == 0:
            err = mean_validation_error(spec, current, validation_tasks, val_contexts)
            history.valid_error.append(err)
            stop = stopper.update(err)
            if stopper.improved_last:
                best[:] = theta
                history.restored_epoch = epoch + 1
            if stop:
                history.stopped_early = True
                break
    if stopper is not None and stopper.n_seen:
        theta[:] = best
    history.seconds = time.perf_counter() - start
    logger.info(
        "task %s: %d epochs, final loss %.4f%s",
        task.name,
        history.epochs_run,
        history.epoch_loss[-1],
        " (early stop)" if history.stopped_early else "",
    )
    return current, history


@dataclass
class SequenceReport:
    task_names: list[str]
    regime: str
    # accuracy[segment][task]: test accuracy on every task after each segment
    accuracy: list[list[float]] = field(default_factory=list)
    histories: list[TaskHistory] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    params: Optional[ParamVector] = None
    penalties: PenaltySet = PenaltySet()
    fishers: list[FisherDiagonal] = field(default_factory=list)
    single_task: Optional[list[float]] = None

    def final_accuracy(self) -> list[float]:
        return self.accuracy[-1]

    def mean_final_accuracy(self) -> float:
        return float(np.mean(self.accuracy[-1]))

    def peak(self, task: int) -> float:
        """Accuracy on ``task`` right after its own segment."""
        return self.accuracy[task][task]

    def rows(self) -> list[tuple[int, str, str, float]]:
        """Long-format records (segment, task, metric, value)."""
        out = []
        for seg, accs in enumerate(self.accuracy):
            for name, acc in zip(self.task_names, accs):
                out.append((seg, name, "test_accuracy", acc))
            h = self.histories[seg]
            for e, loss in enumerate(h.epoch_loss):
                out.append((seg, h.task, f"train_loss_epoch_{e + 1}", loss))
            for e, err in enumerate(h.valid_error):
                out.append((seg, h.task, f"valid_error_eval_{e + 1}", err))
            out.append((seg, h.task, "epochs_run", float(h.epochs_run)))
        return out

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        d = {
            "task_names": self.task_names,
            "regime": self.regime,
            "accuracy": self.accuracy,
            "mean_final_accuracy": self.mean_final_accuracy() if self.accuracy else None,
            "segments": [
                {
                    "task": h.task,
                    "epoch_loss": h.epoch_loss,
                    "valid_error": h.valid_error,
                    "epochs_run": h.epochs_run,
                    "stopped_early": h.stopped_early,
                    "restored_epoch": h.restored_epoch,
                }
                for h in self.histories
            ],
        }
        if include_timing:
            d["seconds"] = self.seconds
        return d


def run_sequence(
    spec: NetworkSpec,
    tasks: Sequence[PermutedTask],
    cfg: TrainConfig,
    params: Optional[ParamVector] = None,
    on_segment: Optional[Callable[[int, SequenceReport], None]] = None,
) -> SequenceReport:
    """Train ``tasks`` in order, evaluating every task's test set after each segment."""
    if not tasks:
        raise ValueError("need at least one task")
    regime = cfg.regime
    if params is None:
        params = init_params(spec, cfg.seed)
    report = SequenceReport([t.name for t in tasks], regime.name)
    penalties = PenaltySet()
    for i, task in enumerate(tasks):
        start = time.perf_counter()
        seg_penalties = penalties
        if isinstance(regime, L2Regime):
            seg_penalties = PenaltySet()
            if i > 0:
                coef = np.full(spec.n_params, float(regime.coefficient))
                seg_penalties = PenaltySet((QuadraticPenalty(params.values, coef),))
        params, history = train_task(
            spec, params, task, cfg, seg_penalties, validation_tasks=tasks[: i + 1], task_index=i
        )
        if isinstance(regime, EWCRegime):
            fisher = estimate_fisher_diagonal(
                spec,
                params,
                task.train,
                n_batches=regime.fisher_batches,
                batch_size=regime.fisher_batch_size,
                mode=regime.fisher_mode,
                seed=[cfg.seed, i, 2],
                context=_context(spec, i),
            )
            report.fishers.append(fisher)
            penalties = penalties.add(build_penalty(params, fisher, regime.lam))
            if regime.merge_penalties:
                penalties = penalties.merged()
        elif isinstance(regime, L2Regime):
            penalties = seg_penalties
        report.accuracy.append(
            [evaluate(spec, params, t.test, _context(spec, j)) for j, t in enumerate(tasks)]
        )
        report.histories.append(history)
        report.seconds.append(time.perf_counter() - start)
        report.params = params
        report.penalties = penalties
        logger.info("after %s: %s", task.name, " ".join(f"{a:.4f}" for a in report.accuracy[-1]))
        if on_segment is not None:
            on_segment(i, report)
    return report


# random search


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng):
        if self.low == self.high:
            return self.low
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))


@dataclass(frozen=True)
class IntUniform:
    low: int
    high: int  # inclusive

    def sample(self, rng):
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class Choice:
    options: tuple

    def sample(self, rng):
        return self.options[int(rng.integers(len(self.options)))]


@dataclass
class SearchResult:
    best: dict
    best_score: float
    trials: list[dict]

    def table(self) -> list[dict]:
        return self.trials


def sample_point(space: Mapping[str, Any], rng) -> dict:
    point = {}
    for key in sorted(space):
        dist = space[key]
        point[key] = dist.sample(rng) if hasattr(dist, "sample") else dist
    return point


def random_search(
    space: Mapping[str, Any],
    n_trials: int = DEFAULT_SEARCH_TRIALS,
    objective: Callable[[dict], float] = None,
    seed: int = 0,
    workers: int = 1,
) -> SearchResult:
    """Sample ``n_trials`` points from ``space`` and keep the highest objective.

    Ties go to the earliest trial. Points are drawn before any objective
    runs, so the trial table does not depend on ``workers``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if objective is None:
        raise ValueError("an objective is required")
    points = [sample_point(space, np.random.default_rng([seed, t])) for t in range(n_trials)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(objective, points))
    else:
        scores = [objective(p) for p in points]
    trials = [{"trial": t, **p, "score": float(s)} for t, (p, s) in enumerate(zip(points, scores))]
    best_t = int(np.argmax(scores))
    return SearchResult(points[best_t], float(scores[best_t]), trials)
