"""Fully-connected ReLU classifiers with exact losses and gradients.

All parameters of a network live in one flat float64 array (``ParamVector``);
the ``BlockMap`` derived from a ``NetworkSpec`` says which slice of that array
holds which weight matrix, bias vector or per-context gain/bias vector.

Weight matrices are stored with shape ``(fan_in, fan_out)`` so a layer is
``inputs @ W``. In a task-conditioned network every layer computes

    y = (inputs @ W + bias[context]) * gain[context]

and has no shared bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Protocol, Sequence

import numpy as np

ACTIVATIONS = ("relu",)
LOSS_REDUCTIONS = ("mean", "sum")


class NetworkError(ValueError):
    """Base class for shape and configuration problems."""


class DimensionError(NetworkError):
    pass


class UnknownContextError(NetworkError):
    pass


class NonFiniteLossError(ArithmeticError):
    """Loss or gradient overflowed to inf/nan."""


@dataclass(frozen=True)
class LayerBlocks:
    weight: slice
    weight_shape: tuple[int, int]
    bias: Optional[slice]
    context_bias: tuple[slice, ...] = ()
    context_gain: tuple[slice, ...] = ()

    @property
    def start(self) -> int:
        return self.weight.start

    @property
    def stop(self) -> int:
        ends = [self.weight.stop]
        if self.bias is not None:
            ends.append(self.bias.stop)
        ends.extend(s.stop for s in self.context_bias)
        ends.extend(s.stop for s in self.context_gain)
        return max(ends)


@dataclass(frozen=True)
class NetworkSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    task_conditioned: bool = False
    n_contexts: int = 1

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise NetworkError("a network needs at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise NetworkError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"unsupported activation {self.activation!r}")
        if self.n_contexts < 1:
            raise NetworkError("n_contexts must be >= 1")

    @property
    def n_layers(self) -> int:
        """Number of weight layers."""
        return len(self.layer_widths) - 1

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @cached_property
    def block_map(self) -> tuple[LayerBlocks, ...]:
        blocks = []
        pos = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            w = slice(pos, pos + fan_in * fan_out)
            pos = w.stop
            if self.task_conditioned:
                biases, gains = [], []
                for _ in range(self.n_contexts):
                    biases.append(slice(pos, pos + fan_out))
                    pos += fan_out
                for _ in range(self.n_contexts):
                    gains.append(slice(pos, pos + fan_out))
                    pos += fan_out
                blocks.append(LayerBlocks(w, (fan_in, fan_out), None, tuple(biases), tuple(gains)))
            else:
                b = slice(pos, pos + fan_out)
                pos = b.stop
                blocks.append(LayerBlocks(w, (fan_in, fan_out), b))
        return tuple(blocks)

    @property
    def n_params(self) -> int:
        return self.block_map[-1].stop

    def layer_slice(self, layer: int) -> slice:
        """Contiguous index range covering every parameter of one layer."""
        blk = self.block_map[layer]
        return slice(blk.start, blk.stop)

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "task_conditioned": self.task_conditioned,
            "n_contexts": self.n_contexts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            layer_widths=tuple(d["layer_widths"]),
            activation=d.get("activation", "relu"),
            task_conditioned=bool(d.get("task_conditioned", False)),
            n_contexts=int(d.get("n_contexts", 1)),
        )


@dataclass(eq=False)
class ParamVector:
    """Flat parameter array tied to the block layout of a spec."""

    spec: NetworkSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.spec.n_params:
            raise DimensionError(
                f"expected {self.spec.n_params} parameters, got shape {self.values.shape}"
            )

    def __len__(self) -> int:
        return self.values.size

    @property
    def block_map(self) -> tuple[LayerBlocks, ...]:
        return self.spec.block_map

    def copy(self) -> "ParamVector":
        return ParamVector(self.spec, self.values.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())

    def weight(self, layer: int) -> np.ndarray:
        blk = self.block_map[layer]
        return self.values[blk.weight].reshape(blk.weight_shape)

    def bias(self, layer: int, context: Optional[int] = None) -> np.ndarray:
        blk = self.block_map[layer]
        if self.spec.task_conditioned:
            return self.values[blk.context_bias[_check_context(self.spec, context)]]
        return self.values[blk.bias]

    def gain(self, layer: int, context: Optional[int] = None) -> Optional[np.ndarray]:
        if not self.spec.task_conditioned:
            return None
        blk = self.block_map[layer]
        return self.values[blk.context_gain[_check_context(self.spec, context)]]


class Penalty(Protocol):
    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DimensionError(f"inputs {x.shape} and labels {y.shape} disagree")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class DropoutConfig:
    input_keep_deficit: float = 0.2
    hidden_keep_deficit: float = 0.5

    def __post_init__(self):
        for name in ("input_keep_deficit", "hidden_keep_deficit"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise NetworkError(f"{name} must lie in [0, 1), got {p}")


@dataclass(frozen=True)
class DropoutMasks:
    """Keep indicators for the input of every weight layer.

    ``keep[0]`` covers the network input, ``keep[l]`` the output of hidden
    layer ``l``. Arrays are ``(width,)`` when shared across a batch or
    ``(batch, width)`` for per-example masks.
    """

    keep: tuple[np.ndarray, ...]
    keep_prob: tuple[float, ...]

    def scaled(self, layer: int) -> np.ndarray:
        return self.keep[layer] * (1.0 / self.keep_prob[layer])


def _check_context(spec: NetworkSpec, context: Optional[int]) -> int:
    if context is None:
        raise UnknownContextError("task-conditioned network requires a context id")
    c = int(context)
    if not 0 <= c < spec.n_contexts:
        raise UnknownContextError(f"context {context} not in [0, {spec.n_contexts})")
    return c


def init_params(spec: NetworkSpec, seed) -> ParamVector:
    """Uniform(-s, s) weights with s = 1/sqrt(fan_in); zero biases; unit gains."""
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.n_params)
    for blk in spec.block_map:
        fan_in, fan_out = blk.weight_shape
        s = 1.0 / math.sqrt(fan_in)
        values[blk.weight] = rng.uniform(-s, s, size=fan_in * fan_out)
        for g in blk.context_gain:
            values[g] = 1.0
    return ParamVector(spec, values)


def sample_dropout_masks(
    spec: NetworkSpec, cfg: DropoutConfig, seed, batch_size: Optional[int] = None
) -> DropoutMasks:
    rng = np.random.default_rng(seed)
    keep, probs = [], []
    for layer in range(spec.n_layers):
        width = spec.layer_widths[layer]
        deficit = cfg.input_keep_deficit if layer == 0 else cfg.hidden_keep_deficit
        shape = (width,) if batch_size is None else (batch_size, width)
        p = 1.0 - deficit
        keep.append(rng.random(shape) < p)
        probs.append(p)
    return DropoutMasks(tuple(keep), tuple(probs))


@dataclass
class _Cache:
    inputs: list = field(default_factory=list)  # post-dropout input to each layer
    scales: list = field(default_factory=list)  # dropout multiplier per layer input, or None
    pre_gain: list = field(default_factory=list)  # inputs @ W + b, before gain
    outputs: list = field(default_factory=list)  # layer output before activation


def _check_inputs(spec: NetworkSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise DimensionError(f"expected inputs of width {spec.n_inputs}, got shape {x.shape}")
    return x


def _forward(spec, params: ParamVector, x, context, masks: Optional[DropoutMasks]):
    if params.spec != spec:
        raise DimensionError("params were built for a different spec")
    if spec.task_conditioned:
        context = _check_context(spec, context)
    cache = _Cache()
    a = x
    for layer in range(spec.n_layers):
        scale = None
        if masks is not None:
            scale = masks.scaled(layer)
            a = a * scale
        cache.scales.append(scale)
        cache.inputs.append(a)
        s = a @ params.weight(layer) + params.bias(layer, context)
        g = params.gain(layer, context)
        y = s if g is None else s * g
        cache.pre_gain.append(s)
        cache.outputs.append(y)
        if layer < spec.n_layers - 1:
            a = np.maximum(y, 0.0)
    return cache.outputs[-1], cache


def forward(
    spec: NetworkSpec,
    params: ParamVector,
    inputs: np.ndarray,
    context: Optional[int] = None,
    dropout_masks: Optional[DropoutMasks] = None,
) -> np.ndarray:
    """Pre-softmax logits, one row per input row."""
    logits, _ = _forward(spec, params, _check_inputs(spec, inputs), context, dropout_masks)
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def backprop_terms(spec, params, cache: _Cache, d_logits: np.ndarray, context=None):
    """Per-layer ``(layer_input, d_pre_gain, d_output, pre_gain)`` tuples.

    ``d_logits`` holds per-example derivatives, so ``d_pre_gain`` rows are
    per-example as well; reductions over the batch are left to the caller
    (plain sums for gradients, sums of squares for the Fisher).
    """
    terms = [None] * spec.n_layers
    dy = d_logits
    for layer in reversed(range(spec.n_layers)):
        g = params.gain(layer, context)
        ds = dy if g is None else dy * g
        terms[layer] = (cache.inputs[layer], ds, dy, cache.pre_gain[layer])
        if layer > 0:
            dh = ds @ params.weight(layer).T
            if cache.scales[layer] is not None:
                dh = dh * cache.scales[layer]
            dy = dh * (cache.outputs[layer - 1] > 0)
    return terms


def assemble_grad(spec: NetworkSpec, terms, context=None, square: bool = False) -> np.ndarray:
    """Reduce backprop terms to a flat vector.

    With ``square=True`` returns the sum over examples of squared per-example
    gradients instead of the gradient of the summed loss.
    """
    out = np.zeros(spec.n_params)
    for blk, (a, ds, dy, s) in zip(spec.block_map, terms):
        if square:
            gw = (a * a).T @ (ds * ds)
            gb = (ds * ds).sum(axis=0)
        else:
            gw = a.T @ ds
            gb = ds.sum(axis=0)
        out[blk.weight] = gw.ravel()
        if spec.task_conditioned:
            dg = dy * s
            out[blk.context_bias[context]] = gb
            out[blk.context_gain[context]] = (dg * dg).sum(axis=0) if square else dg.sum(axis=0)
        else:
            out[blk.bias] = gb
    return out


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example losses and per-example d loss / d logits."""
    logp = log_softmax(logits)
    n = labels.shape[0]
    losses = -logp[np.arange(n), labels]
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return losses, d


def loss_and_grad(
    spec: NetworkSpec,
    params: ParamVector,
    batch: Batch,
    context: Optional[int] = None,
    dropout_masks: Optional[DropoutMasks] = None,
    penalty: Optional[Penalty] = None,
    reduction: str = "mean",
) -> tuple[float, ParamVector]:
    """Softmax cross-entropy over ``batch`` (plus ``penalty``) and its gradient.

    ``reduction`` is ``"mean"`` (default) or ``"sum"`` over the batch.
    """
    if reduction not in LOSS_REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    if len(batch) == 0:
        raise DimensionError("empty batch")
    x = _check_inputs(spec, batch.inputs)
    if batch.labels.min() < 0 or batch.labels.max() >= spec.n_classes:
        raise DimensionError(f"labels must lie in [0, {spec.n_classes})")
    if spec.task_conditioned:
        context = _check_context(spec, context)
    # overflow surfaces below as NonFiniteLossError
    with np.errstate(over="ignore", invalid="ignore"):
        logits, cache = _forward(spec, params, x, context, dropout_masks)
        losses, d_logits = cross_entropy(logits, batch.labels)
        n = len(batch) if reduction == "mean" else 1
        loss = float(losses.sum() / n)
        terms = backprop_terms(spec, params, cache, d_logits / n, context)
        grad = assemble_grad(spec, terms, context)
    if penalty is not None:
        pv, pg = penalty.value_and_grad(params.values)
        loss += pv
        grad += pg
    if not math.isfinite(loss) or not np.isfinite(grad).all():
        raise NonFiniteLossError(f"non-finite loss {loss}")
    return loss, ParamVector(spec, grad)


def predict(spec, params, inputs, context=None, batch_size: int = 2000) -> np.ndarray:
    x = _check_inputs(spec, inputs)
    out = np.empty(x.shape[0], dtype=np.int64)
    for i in range(0, x.shape[0], batch_size):
        out[i : i + batch_size] = forward(spec, params, x[i : i + batch_size], context).argmax(axis=1)
    return out


def layer_widths_for(n_inputs: int, hidden: Sequence[int], n_classes: int) -> tuple[int, ...]:
    return (int(n_inputs), *(int(h) for h in hidden), int(n_classes))
