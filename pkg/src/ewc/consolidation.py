"""Elastic weight consolidation: diagonal Fisher, quadratic penalties, analysis tools."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .network import (
    NetworkSpec,
    NonFiniteLossError,
    ParamVector,
    _forward,
    assemble_grad,
    backprop_terms,
    log_softmax,
    predict,
)

logger = logging.getLogger(__name__)

FISHER_MODES = ("model", "empirical")
PERTURBATION_SHAPES = ("uniform", "inverse-fisher", "nullspace")
DEFAULT_FISHER_BATCHES = 100
ATARI_FISHER_MULTIPLIER = 400.0  # reference lambda of the RL agent; MNIST lambda is searched


class ConsolidationError(ValueError):
    pass


class EmptyNullspaceError(ConsolidationError):
    pass


@dataclass(frozen=True, eq=False)
class FisherDiagonal:
    values: np.ndarray
    sample_count: int = 0
    mode: str = "model"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ConsolidationError("Fisher diagonal must be 1-d")
        if not np.isfinite(v).all():
            raise NonFiniteLossError("non-finite Fisher entries")
        if (v < 0).any():
            raise ConsolidationError("Fisher diagonal has negative entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class QuadraticPenalty:
    """sum_i (c_i / 2) (theta_i - a_i)^2 with c_i already including lambda."""

    anchor: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        a = np.array(self.anchor, dtype=np.float64)
        c = np.array(self.coefficients, dtype=np.float64)
        if a.shape != c.shape or a.ndim != 1:
            raise ConsolidationError(f"anchor {a.shape} and coefficients {c.shape} differ")
        if (c < 0).any():
            raise ConsolidationError("penalty coefficients must be nonnegative")
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "anchor", a)
        object.__setattr__(self, "coefficients", c)

    def __len__(self) -> int:
        return self.anchor.size

    def value_and_grad(self, theta) -> tuple[float, np.ndarray]:
        theta = _as_values(theta)
        if theta.shape != self.anchor.shape:
            raise ConsolidationError(f"penalty of length {len(self)} applied to {theta.shape}")
        d = theta - self.anchor
        g = self.coefficients * d
        return 0.5 * float(np.dot(g, d)), g


@dataclass(frozen=True)
class PenaltySet:
    penalties: tuple[QuadraticPenalty, ...] = ()

    def __len__(self) -> int:
        return len(self.penalties)

    def __bool__(self) -> bool:
        return bool(self.penalties)

    def __iter__(self):
        return iter(self.penalties)

    def add(self, penalty: QuadraticPenalty) -> "PenaltySet":
        return PenaltySet(self.penalties + (penalty,))

    def value_and_grad(self, theta) -> tuple[float, np.ndarray]:
        return penalty_value_and_grad(self, theta)

    def merged(self) -> "PenaltySet":
        if len(self.penalties) <= 1:
            return self
        out = self.penalties[0]
        for p in self.penalties[1:]:
            out = merge_penalties(out, p)
        return PenaltySet((out,))


def _as_values(x) -> np.ndarray:
    if isinstance(x, (ParamVector, FisherDiagonal)):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _example_batches(n: int, n_batches: int, batch_size: int, rng) -> Iterable[np.ndarray]:
    """Consecutive batches over reshuffled passes of 0..n-1."""
    order = rng.permutation(n)
    pos = 0
    for _ in range(n_batches):
        idx = []
        need = batch_size
        while need:
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            take = min(need, n - pos)
            idx.append(order[pos : pos + take])
            pos += take
            need -= take
        yield np.concatenate(idx)


def estimate_fisher_diagonal(
    spec: NetworkSpec,
    params: ParamVector,
    dataset,
    n_batches: int = DEFAULT_FISHER_BATCHES,
    batch_size: int = 32,
    mode: str = "model",
    seed=0,
    context: Optional[int] = None,
) -> FisherDiagonal:
    """Average squared per-example score of log p(y|x, theta).

    ``mode="model"`` draws y from the network's own predictive distribution;
    ``mode="empirical"`` uses the dataset label. ``dataset`` needs ``len()``
    and ``batch(index) -> (inputs, labels)``.
    """
    if mode not in FISHER_MODES:
        raise ConsolidationError(f"unknown Fisher mode {mode!r}")
    if len(dataset) == 0:
        raise ConsolidationError("cannot estimate the Fisher on an empty dataset")
    if n_batches < 1 or batch_size < 1:
        raise ConsolidationError("n_batches and batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    total = np.zeros(spec.n_params)
    count = 0
    for idx in _example_batches(len(dataset), n_batches, batch_size, rng):
        x, y = dataset.batch(idx)
        logits, cache = _forward(spec, params, np.asarray(x, dtype=np.float64), context, None)
        probs = np.exp(log_softmax(logits))
        if mode == "model":
            u = rng.random(probs.shape[0])[:, None]
            cdf = np.cumsum(probs, axis=1)
            y = np.minimum((cdf < u).sum(axis=1), spec.n_classes - 1)
        # d(-log p(y))/d logits; the sign vanishes when squared
        d_logits = probs
        d_logits[np.arange(len(idx)), y] -= 1.0
        terms = backprop_terms(spec, params, cache, d_logits, context)
        total += assemble_grad(spec, terms, context, square=True)
        count += len(idx)
    if not np.isfinite(total).all():
        raise NonFiniteLossError("non-finite gradient while estimating the Fisher")
    return FisherDiagonal(total / count, sample_count=count, mode=mode)


def build_penalty(anchor, fisher: FisherDiagonal, lam: float) -> QuadraticPenalty:
    if lam < 0:
        raise ConsolidationError(f"lambda must be nonnegative, got {lam}")
    a = _as_values(anchor)
    f = _as_values(fisher)
    if a.shape != f.shape:
        raise ConsolidationError(f"anchor of length {a.size} vs Fisher of length {f.size}")
    return QuadraticPenalty(a.copy(), lam * f)


def penalty_value_and_grad(
    pset: Union[PenaltySet, QuadraticPenalty, Sequence[QuadraticPenalty]], params
) -> tuple[float, np.ndarray]:
    theta = _as_values(params)
    if isinstance(pset, QuadraticPenalty):
        pset = (pset,)
    value = 0.0
    grad = np.zeros_like(theta)
    for p in pset:
        v, g = p.value_and_grad(theta)
        value += v
        grad += g
    return value, grad


def merge_penalties(p1: QuadraticPenalty, p2: QuadraticPenalty) -> QuadraticPenalty:
    """Single quadratic with the same gradient as ``p1 + p2``.

    Values of the merged penalty differ from the sum by a theta-independent
    constant.
    """
    if len(p1) != len(p2):
        raise ConsolidationError(f"cannot merge penalties of length {len(p1)} and {len(p2)}")
    c = p1.coefficients + p2.coefficients
    weighted = p1.coefficients * p1.anchor + p2.coefficients * p2.anchor
    safe = np.where(c > 0, c, 1.0)
    anchor = np.where(c > 0, weighted / safe, p1.anchor)
    return QuadraticPenalty(anchor, c)


def fisher_overlap(f1, f2, block=None) -> float:
    """1 - d^2, d the Frechet distance between unit-trace diagonal Fishers.

    For diagonal matrices d^2 = 1/2 sum_i (sqrt(p_i) - sqrt(q_i))^2 with p, q
    the trace-normalized diagonals. ``block`` restricts both vectors to a
    slice or index array first.
    """
    a = _as_values(f1)
    b = _as_values(f2)
    if a.shape != b.shape:
        raise ConsolidationError(f"Fisher lengths differ: {a.size} vs {b.size}")
    if block is not None:
        a, b = a[block], b[block]
    ta, tb = a.sum(), b.sum()
    if ta <= 0 or tb <= 0:
        raise ConsolidationError("overlap undefined for an all-zero Fisher block")
    d2 = 0.5 * np.sum((np.sqrt(a / ta) - np.sqrt(b / tb)) ** 2)
    return float(min(1.0, max(0.0, 1.0 - d2)))


def layerwise_overlap(spec: NetworkSpec, f1, f2) -> list[float]:
    """Overlap per weight layer, each layer's block normalized on its own."""
    return [fisher_overlap(f1, f2, spec.layer_slice(layer)) for layer in range(spec.n_layers)]


@dataclass
class SensitivityCurve:
    shape: str
    sigmas: list[float]
    accuracy: list[float]
    episode_accuracy: list[list[float]] = field(default_factory=list)
    nullspace_size: Optional[int] = None
    n_params: int = 0
    # 0.5 * sum_i F_i var_i at sigma = 1: second-order loss increase per unit sigma^2
    taylor_coefficient: float = 0.0

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.sigmas, self.accuracy))


def perturbation_std(
    fisher: FisherDiagonal,
    shape: str,
    ridge: Optional[float] = None,
    nullspace_threshold: Optional[float] = None,
) -> tuple[np.ndarray, Optional[int]]:
    """Per-parameter noise std at sigma = 1, scaled to total variance ``n_params``."""
    f = fisher.values
    n = f.size
    if shape == "uniform":
        return np.ones(n), None
    if shape == "inverse-fisher":
        if ridge is None or ridge <= 0:
            raise ConsolidationError("inverse-fisher perturbations need ridge > 0")
        w = 1.0 / (f + ridge)
        return np.sqrt(w * (n / w.sum())), None
    if shape == "nullspace":
        thr = default_nullspace_threshold(fisher) if nullspace_threshold is None else nullspace_threshold
        members = f <= thr
        k = int(members.sum())
        if k == 0:
            raise EmptyNullspaceError(f"no Fisher entries at or below {thr}")
        return np.where(members, np.sqrt(n / k), 0.0), k
    raise ConsolidationError(f"unknown perturbation shape {shape!r}")


def default_nullspace_threshold(fisher: FisherDiagonal) -> float:
    return 1e-10 * float(fisher.values.max())


def perturbation_sensitivity(
    spec: NetworkSpec,
    params: ParamVector,
    fisher: FisherDiagonal,
    shape: str,
    sigmas: Sequence[float],
    eval_set,
    episodes: int = 10,
    seed=0,
    ridge: Optional[float] = None,
    nullspace_threshold: Optional[float] = None,
    batch_size: int = 100,
    context: Optional[int] = None,
) -> SensitivityCurve:
    """Accuracy under Gaussian weight noise, redrawn for every evaluation batch."""
    if any(s < 0 for s in sigmas):
        raise ConsolidationError("sigmas must be nonnegative")
    if len(fisher) != spec.n_params:
        raise ConsolidationError("Fisher does not match the network")
    std, null_k = perturbation_std(fisher, shape, ridge, nullspace_threshold)
    taylor = 0.5 * float(np.dot(fisher.values, std * std))
    rng = np.random.default_rng(seed)
    x_all, y_all = eval_set.batch(slice(None))
    n = len(y_all)
    curve = SensitivityCurve(shape, [float(s) for s in sigmas], [], [], null_k, spec.n_params, taylor)
    for sigma in sigmas:
        per_episode = []
        for _ in range(episodes):
            correct = 0
            for i in range(0, n, batch_size):
                if sigma == 0:
                    p = params
                else:
                    noise = rng.standard_normal(spec.n_params) * (sigma * std)
                    p = ParamVector(spec, params.values + noise)
                pred = predict(spec, p, x_all[i : i + batch_size], context)
                correct += int((pred == y_all[i : i + batch_size]).sum())
            per_episode.append(correct / n)
        curve.episode_accuracy.append(per_episode)
        curve.accuracy.append(float(np.mean(per_episode)))
        logger.debug("%s sigma=%g accuracy=%.4f", shape, sigma, curve.accuracy[-1])
    return curve
