"""Deterministic end-to-end training.

Mini-batch SGD with momentum and L2 weight decay (biases exempt), a
plateau learning-rate schedule driven by validation error, and an epoch
loop whose randomness comes from per-epoch streams derived from
(seed, epoch). Reordering or resuming epochs therefore never reuses or
shifts randomness, which is what makes an interrupted run resumable
bit-exactly.

Also hosts the order-invariant mean-pool baseline: mean over raw frames
into a linear head, trained with the same optimizer. It exists to certify
that a dataset actually requires temporal-order modeling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .denseimage import SamplingMode
from .classifier import predict
from .model import (
    ModelParams,
    clone_params,
    forward_sample,
    named_parameters,
    sample_loss_and_grads,
)
from .numerics import (
    Array,
    cross_entropy_from_logits,
    glorot_uniform,
    make_rng,
    sample_dropout_mask,
)

if TYPE_CHECKING:
    from .data_io import Sample


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    initial_lr: float = 5e-4
    lr_decay_factor: float = 0.1
    plateau_patience: int = 5
    max_epochs: int = 50
    dropout_keep: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must be in (0, 1)")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must be in (0, 1]")
        if self.weight_decay < 0.0 or self.initial_lr < 0.0:
            raise ValueError("weight_decay and initial_lr must be >= 0")
        if self.plateau_patience < 1 or self.max_epochs < 0:
            raise ValueError("plateau_patience >= 1 and max_epochs >= 0 required")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "initial_lr": self.initial_lr,
            "lr_decay_factor": self.lr_decay_factor,
            "plateau_patience": self.plateau_patience,
            "max_epochs": self.max_epochs,
            "dropout_keep": self.dropout_keep,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls().to_dict()})


def init_rng(seed: int) -> np.random.Generator:
    """Stream reserved for parameter initialization."""
    return make_rng(seed, 0)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Independent stream for one training epoch (shuffle, sampling, dropout)."""
    return make_rng(seed, 1, epoch)


@dataclass
class OptimizerState:
    """Velocity buffers plus the plateau-schedule bookkeeping."""

    velocity: dict[str, Array]
    current_lr: float
    best_val_error: float = math.inf
    epochs_since_improvement: int = 0
    epochs_completed: int = 0

    @classmethod
    def init(cls, params: ModelParams, config: TrainConfig) -> "OptimizerState":
        velocity = {name: np.zeros_like(arr) for name, arr in named_parameters(params).items()}
        return cls(velocity, config.initial_lr)


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    current_lr: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "current_lr": self.current_lr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpochReport":
        return cls(int(d["epoch"]), float(d["train_loss"]), float(d["val_loss"]),
                   float(d["val_accuracy"]), float(d["current_lr"]))


@dataclass
class TrainState:
    """Everything fit() accumulates; checkpointing this resumes a run exactly."""

    optimizer: OptimizerState
    history: list[EpochReport] = field(default_factory=list)
    best_params: ModelParams | None = None
    best_epoch: int = -1
    best_val_accuracy: float = -1.0

    @classmethod
    def fresh(cls, params: ModelParams, config: TrainConfig) -> "TrainState":
        return cls(OptimizerState.init(params, config), [], clone_params(params))


def _sgd_update(
    named: dict[str, Array],
    grads: dict[str, Array],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    if set(grads) != set(named):
        raise ValueError("gradient names do not match the parameters")
    for name, param in named.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if config.weight_decay and not name.endswith("/bias"):
            grad = grad + config.weight_decay * param
        vel = state.velocity[name]
        vel *= config.momentum
        vel += grad
        param -= state.current_lr * vel


def sgd_momentum_step(
    params: ModelParams,
    grads: dict[str, Array],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    """One in-place update: v <- momentum*v + (grad + wd*param); param -= lr*v.

    Weight decay enters as an additive L2 gradient term and never touches
    bias tensors.
    """
    _sgd_update(named_parameters(params), grads, state, config)


def plateau_update(state: OptimizerState, val_error: float, config: TrainConfig) -> None:
    """Decay the learning rate after `plateau_patience` epochs without a
    strict improvement of the validation error."""
    if not 0.0 <= val_error <= 1.0:
        raise ValueError("val_error must be in [0, 1]")
    if val_error < state.best_val_error - 1e-12:
        state.best_val_error = val_error
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= config.plateau_patience:
            state.current_lr *= config.lr_decay_factor
            state.epochs_since_improvement = 0


def _check_finite(named: dict[str, Array], what: str) -> None:
    for name, arr in named.items():
        if not np.all(np.isfinite(arr)):
            raise ArithmeticError(f"non-finite values in {what} tensor {name}")


def train_epoch(
    params: ModelParams,
    samples: Sequence["Sample"],
    config: TrainConfig,
    state: OptimizerState,
    rng: np.random.Generator,
) -> float:
    """One pass over the split in a fresh shuffled order; one momentum step
    per mini-batch with the batch-mean gradient. Returns the mean loss."""
    if len(samples) == 0:
        raise ValueError("training split is empty")
    order = rng.permutation(len(samples))
    widths = params.shape.widths
    channels = params.shape.num_filters
    total_loss = 0.0
    for start in range(0, len(order), config.batch_size):
        batch = order[start : start + config.batch_size]
        grad_sum: dict[str, Array] | None = None
        for idx in batch:
            sample = samples[idx]
            masks = None
            if config.dropout_keep < 1.0:
                masks = {
                    h: sample_dropout_mask(rng, channels, config.dropout_keep)
                    for h in widths
                }
            loss, grads = sample_loss_and_grads(
                params,
                sample.features,
                sample.label,
                mode=SamplingMode.TRAIN_RANDOM,
                rng=rng,
                masks=masks,
            )
            total_loss += loss
            if grad_sum is None:
                grad_sum = grads
            else:
                for name in grad_sum:
                    grad_sum[name] += grads[name]
        scale = 1.0 / len(batch)
        mean_grads = {name: g * scale for name, g in grad_sum.items()}
        sgd_momentum_step(params, mean_grads, state, config)
    return total_loss / len(samples)


def evaluate(
    params: ModelParams, samples: Sequence["Sample"]
) -> tuple[float, float]:
    """Center-sampled, dropout-free loss and accuracy over a split."""
    if len(samples) == 0:
        raise ValueError("evaluation split is empty")
    total_loss = 0.0
    correct = 0
    for sample in samples:
        scores, _ = forward_sample(params, sample.features)
        loss, _ = cross_entropy_from_logits(scores.fused_logits, sample.label)
        total_loss += loss
        correct += int(predict(scores) == sample.label)
    return total_loss / len(samples), correct / len(samples)


def fit(
    params: ModelParams,
    train_split: Sequence["Sample"],
    val_split: Sequence["Sample"],
    config: TrainConfig,
    state: TrainState | None = None,
) -> TrainState:
    """Train up to config.max_epochs, tracking the best validation epoch.

    Pass a state restored from a checkpoint to resume; epochs already
    completed are skipped and the remaining ones reproduce an
    uninterrupted run bit-exactly. Mutates `params` in place and returns
    the accumulated state (best snapshot, history, optimizer).
    """
    if state is None:
        state = TrainState.fresh(params, config)
    opt = state.optimizer
    for epoch in range(opt.epochs_completed, config.max_epochs):
        lr_used = opt.current_lr
        rng = epoch_rng(config.seed, epoch)
        train_loss = train_epoch(params, train_split, config, opt, rng)
        val_loss, val_accuracy = evaluate(params, val_split)
        _check_finite(named_parameters(params), "parameter")
        _check_finite(opt.velocity, "velocity")
        if val_accuracy > state.best_val_accuracy:
            state.best_params = clone_params(params)
            state.best_epoch = epoch
            state.best_val_accuracy = val_accuracy
        plateau_update(opt, 1.0 - val_accuracy, config)
        opt.epochs_completed = epoch + 1
        state.history.append(
            EpochReport(epoch, train_loss, val_loss, val_accuracy, lr_used)
        )
    return state


@dataclass
class MeanPoolBaseline:
    """Order-invariant control model: mean over raw frames into one linear head."""

    weights: Array  # C x D
    bias: Array  # C


def init_baseline(rng: np.random.Generator, raw_dim: int, num_classes: int) -> MeanPoolBaseline:
    weights = glorot_uniform(rng, raw_dim, num_classes, num_classes, raw_dim)
    return MeanPoolBaseline(weights, np.zeros(num_classes))


def baseline_logits(model: MeanPoolBaseline, features: Array) -> Array:
    return model.weights @ features.mean(axis=0) + model.bias


def evaluate_baseline(
    model: MeanPoolBaseline, samples: Sequence["Sample"]
) -> tuple[float, float]:
    if len(samples) == 0:
        raise ValueError("evaluation split is empty")
    total_loss = 0.0
    correct = 0
    for sample in samples:
        logits = baseline_logits(model, sample.features)
        loss, _ = cross_entropy_from_logits(logits, sample.label)
        total_loss += loss
        correct += int(np.argmax(logits) == sample.label)
    return total_loss / len(samples), correct / len(samples)


def train_baseline(
    train_split: Sequence["Sample"],
    val_split: Sequence["Sample"],
    raw_dim: int,
    num_classes: int,
    config: TrainConfig,
) -> tuple[MeanPoolBaseline, list[EpochReport]]:
    """Train the mean-pool control with the same optimizer and budget."""
    model = init_baseline(init_rng(config.seed), raw_dim, num_classes)
    named = {"baseline/weights": model.weights, "baseline/bias": model.bias}
    opt = OptimizerState(
        {name: np.zeros_like(arr) for name, arr in named.items()}, config.initial_lr
    )
    history: list[EpochReport] = []
    for epoch in range(config.max_epochs):
        lr_used = opt.current_lr
        rng = epoch_rng(config.seed, epoch)
        order = rng.permutation(len(train_split))
        total_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grad_w = np.zeros_like(model.weights)
            grad_b = np.zeros_like(model.bias)
            for idx in batch:
                sample = train_split[idx]
                mean_feat = sample.features.mean(axis=0)
                logits = model.weights @ mean_feat + model.bias
                loss, grad_logits = cross_entropy_from_logits(logits, sample.label)
                total_loss += loss
                grad_w += np.outer(grad_logits, mean_feat)
                grad_b += grad_logits
            scale = 1.0 / len(batch)
            _sgd_update(
                named,
                {"baseline/weights": grad_w * scale, "baseline/bias": grad_b * scale},
                opt,
                config,
            )
        val_loss, val_accuracy = evaluate_baseline(model, val_split)
        plateau_update(opt, 1.0 - val_accuracy, config)
        history.append(
            EpochReport(epoch, total_loss / len(train_split), val_loss, val_accuracy, lr_used)
        )
    return model, history
