"""Online task recognition with an HMM over Dirichlet-multinomial pixel models.

Each context owns a factored categorical model of quantized pixels. A
windowed Forget-Me-Not style procedure decides which model keeps the
evidence of each window; a uniform hold-out model is always present and is
promoted to a new context when it explains a window best.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

DEFAULT_WINDOW = 4
COMMIT_STATISTICS = ("window-evidence", "final-belief")
DEFAULT_LEVELS = 2
AGENT_MODEL_UPDATE_PERIOD = 4
AGENT_DOWNSCALE = 2


class RecognitionError(ValueError):
    pass


def quantize(image, levels: int = DEFAULT_LEVELS, downscale: int = 1) -> np.ndarray:
    """Block-average a square image, then bin [0, 1] into ``levels`` symbols.

    Symbol j covers [j/K, (j+1)/K); the value 1.0 falls in the top bin.
    """
    if levels < 2:
        raise RecognitionError("need at least two quantization levels")
    x = np.asarray(image, dtype=np.float64).ravel()
    if downscale < 1:
        raise RecognitionError("downscale must be >= 1")
    if downscale > 1:
        side = math.isqrt(x.size)
        if side * side != x.size:
            raise RecognitionError(f"image of {x.size} pixels is not square")
        if side % downscale:
            raise RecognitionError(f"downscale {downscale} does not divide side {side}")
        k = side // downscale
        x = x.reshape(k, downscale, k, downscale).mean(axis=(1, 3)).ravel()
    return np.minimum((x * levels).astype(np.int64), levels - 1)


class DirichletPixelModel:
    """Independent Dirichlet-multinomial per pixel; counts include the prior."""

    def __init__(self, n_pixels: int, levels: int = DEFAULT_LEVELS, prior_strength: float = 1.0):
        if prior_strength <= 0:
            raise RecognitionError("prior strength must be positive")
        self.n_pixels = n_pixels
        self.levels = levels
        self.prior_strength = prior_strength
        self.counts = np.full((n_pixels, levels), float(prior_strength))
        self.n_obs = 0
        self._offsets = np.arange(n_pixels) * levels
        self._snapshot: Optional[tuple[np.ndarray, int]] = None

    def _cells(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        if obs.shape != (self.n_pixels,):
            raise RecognitionError(f"observation of shape {obs.shape}, model has {self.n_pixels} pixels")
        if obs.min() < 0 or obs.max() >= self.levels:
            raise RecognitionError(f"symbols must lie in [0, {self.levels})")
        return self._offsets + obs

    def total(self) -> float:
        return self.levels * self.prior_strength + self.n_obs

    def predictive_probs(self) -> np.ndarray:
        return self.counts / self.total()

    def log_predictive(self, obs) -> float:
        cells = self._cells(obs)
        return float(np.log(self.counts.ravel()[cells]).sum() - self.n_pixels * math.log(self.total()))

    def update(self, obs) -> None:
        cells = self._cells(obs)
        self.counts.ravel()[cells] += 1.0
        self.n_obs += 1

    def snapshot(self) -> None:
        self._snapshot = (self.counts.copy(), self.n_obs)

    def revert(self) -> None:
        if self._snapshot is None:
            raise RecognitionError("no snapshot to revert to")
        counts, n = self._snapshot
        self.counts = counts.copy()
        self.n_obs = n

    def is_uniform(self) -> bool:
        return self.n_obs == 0


def predictive_log_prob(model: DirichletPixelModel, obs) -> float:
    return model.log_predictive(obs)


@dataclass
class ContextBelief:
    """Posterior over contexts plus the model pool; the last model is the hold-out.

    ``context_ids[i]`` names model ``i``; the hold-out has no id until it is
    promoted, at which point it receives ``next_id``.
    """

    n_pixels: int
    levels: int = DEFAULT_LEVELS
    prior_strength: float = 1.0
    window: int = DEFAULT_WINDOW
    alpha_override: Optional[float] = None
    commit_statistic: str = "window-evidence"
    models: list = field(default_factory=list)
    context_ids: list[int] = field(default_factory=list)
    log_weights: np.ndarray = field(default_factory=lambda: np.zeros(1))
    t: int = 0
    next_id: int = 0
    window_fill: int = 0

    def __post_init__(self):
        if self.commit_statistic not in COMMIT_STATISTICS:
            raise RecognitionError(f"unknown commit statistic {self.commit_statistic!r}")
        if not self.models:
            self.models = [self._fresh()]
            self.log_weights = np.zeros(1)
        self._start_window()

    def _start_window(self) -> None:
        self._snapshot_all()
        self.window_start_weights = self.log_weights.copy()
        self.window_loglik = np.zeros(len(self.models))
        self.window_fill = 0

    def _fresh(self) -> DirichletPixelModel:
        return DirichletPixelModel(self.n_pixels, self.levels, self.prior_strength)

    def _snapshot_all(self) -> None:
        for m in self.models:
            if hasattr(m, "snapshot"):
                m.snapshot()

    @property
    def holdout_index(self) -> int:
        return len(self.models) - 1

    @property
    def n_contexts(self) -> int:
        """Named contexts, excluding the hold-out."""
        return len(self.models) - 1

    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def entropy(self) -> float:
        w = self.weights()
        nz = w > 0
        return float(-(w[nz] * self.log_weights[nz]).sum())

    def switch_rate(self, t: int) -> float:
        if self.alpha_override is not None:
            return self.alpha_override
        return 1.0 / t

    def id_of(self, index: int) -> int:
        return self.next_id if index == self.holdout_index else self.context_ids[index]

    def step(self, obs) -> "ContextBelief":
        t = self.t + 1
        n = len(self.models)
        lw = self.log_weights
        if n > 1 and t >= 2:
            alpha = self.switch_rate(t)
            # stay with prob 1 - alpha, else move uniformly to one of the n - 1 others
            p = np.exp(lw)
            with np.errstate(divide="ignore"):
                stay = np.log1p(-alpha) + lw if alpha < 1 else np.full(n, -np.inf)
                move = math.log(alpha / (n - 1)) + np.log1p(-np.minimum(p, 1.0)) if alpha > 0 else np.full(n, -np.inf)
            lw = np.logaddexp(stay, move)
        if self.window_fill == 0:
            # predicted prior of the window's first step
            self.window_start_weights = lw.copy()
        loglik = np.array([m.log_predictive(obs) for m in self.models])
        post = lw + loglik
        z = logsumexp(post)
        if not np.isfinite(z):
            raise RecognitionError("posterior vanished")
        self.log_weights = post - z
        self.window_loglik += loglik
        for m in self.models:
            m.update(obs)
        self.t = t
        self.window_fill += 1
        return self

    def window_scores(self) -> np.ndarray:
        """Statistic maximized at commit.

        ``window-evidence``: predicted weight at the window's first step plus
        the summed predictive log-likelihood of the window, i.e. the posterior
        of the context having generated the whole window (switch factors
        inside the window are common to all contexts and cancel). ``final-belief``: the filtered posterior
        after the last observation.
        """
        if self.commit_statistic == "final-belief":
            return self.log_weights
        return self.window_start_weights + self.window_loglik

    def commit(self) -> int:
        """Close the current window; returns the id of the selected context."""
        sel = int(np.argmax(self.window_scores()))  # first maximum: lowest index wins ties
        for i, m in enumerate(self.models):
            if i != sel:
                m.revert()
        chosen = self.id_of(sel)
        if sel == self.holdout_index:
            self.context_ids.append(self.next_id)
            self.next_id += 1
            self.models.append(self._fresh())
            w_new = min(1.0 / (self.t + 1), 0.5)
            self.log_weights = np.append(self.log_weights + math.log1p(-w_new), math.log(w_new))
            self.log_weights -= logsumexp(self.log_weights)
        self._start_window()
        return chosen

    def infer(self) -> int:
        return self.id_of(int(np.argmax(self.log_weights)))


def belief_step(b: ContextBelief, obs) -> ContextBelief:
    return b.step(obs)


def window_commit(b: ContextBelief, window_observations: Sequence) -> tuple[ContextBelief, int]:
    """Run one full window of observations through ``b`` and commit it."""
    if len(window_observations) != b.window:
        raise RecognitionError(f"window needs {b.window} observations, got {len(window_observations)}")
    for obs in window_observations:
        b.step(obs)
    return b, b.commit()


def infer_context(b: ContextBelief) -> int:
    return b.infer()


@dataclass
class TraceRow:
    t: int
    true_context: Optional[int]
    inferred_context: int
    entropy: float
    n_contexts: int = 0


class TaskRecognizer:
    """Streaming wrapper: quantizes images, steps the belief, commits windows.

    Only every ``update_period``-th image reaches the belief; the label of
    the skipped ones is the current inferred context.
    """

    def __init__(
        self,
        n_pixels: int,
        levels: int = DEFAULT_LEVELS,
        downscale: int = 1,
        window: int = DEFAULT_WINDOW,
        update_period: int = 1,
        prior_strength: float = 1.0,
        commit_statistic: str = "window-evidence",
    ):
        side = math.isqrt(n_pixels)
        if side * side != n_pixels or side % downscale:
            raise RecognitionError(f"cannot downscale {n_pixels} pixels by {downscale}")
        self.levels = levels
        self.downscale = downscale
        self.update_period = update_period
        self.belief = ContextBelief(
            (side // downscale) ** 2, levels, prior_strength, window, commit_statistic=commit_statistic
        )
        self.seen = 0
        self.trace: list[TraceRow] = []

    def observe(self, image, true_context: Optional[int] = None) -> int:
        if self.seen % self.update_period == 0:
            self.belief.step(quantize(image, self.levels, self.downscale))
            label = self.belief.infer()
            if self.belief.window_fill == self.belief.window:
                self.belief.commit()
        else:
            label = self.belief.infer()
        self.seen += 1
        self.trace.append(
            TraceRow(self.seen, true_context, label, self.belief.entropy(), self.belief.n_contexts)
        )
        return label

    def run(self, stream: Iterable[tuple[np.ndarray, Optional[int]]]) -> list[TraceRow]:
        for image, truth in stream:
            self.observe(image, truth)
        return self.trace


def task_stream(
    dataset, permutations: Sequence, schedule: Sequence[tuple[int, int]], seed
) -> Iterator[tuple[np.ndarray, int]]:
    """Images drawn at random from ``dataset``, permuted per the active task.

    ``schedule`` is a list of ``(task_index, n_steps)`` segments.
    """
    rng = np.random.default_rng(seed)
    for task, length in schedule:
        mapping = permutations[task].mapping
        for i in rng.choice(len(dataset), size=length, replace=length > len(dataset)):
            yield dataset.base[i][mapping], task


def relabeled_accuracy(truth: Sequence[int], inferred: Sequence[int], mask=None) -> float:
    """Accuracy after the best one-to-one matching of inferred to true labels."""
    truth = np.asarray(truth)
    inferred = np.asarray(inferred)
    if mask is not None:
        truth, inferred = truth[mask], inferred[mask]
    if truth.size == 0:
        raise RecognitionError("nothing to score")
    t_vals, t_idx = np.unique(truth, return_inverse=True)
    i_vals, i_idx = np.unique(inferred, return_inverse=True)
    confusion = np.zeros((t_vals.size, i_vals.size), dtype=np.int64)
    np.add.at(confusion, (t_idx, i_idx), 1)
    rows, cols = linear_sum_assignment(-confusion)
    return float(confusion[rows, cols].sum() / truth.size)


def burn_in_mask(schedule: Sequence[tuple[int, int]], burn_in: int) -> np.ndarray:
    """False for the first ``burn_in`` steps of every segment."""
    parts = []
    for _, length in schedule:
        m = np.ones(length, dtype=bool)
        m[:burn_in] = False
        parts.append(m)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)
