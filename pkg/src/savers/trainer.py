"""Loss, momentum SGD and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .checkpoint import save_checkpoint
from .errors import ConfigError, CorruptionError, DataError, DimensionError
from .net import SaversModel, Tape, coarse_segment_batch, forward
from .seeding import stream

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class LossValue:
    value: float
    pixel_count: int


def cross_entropy(scores: np.ndarray, labels: np.ndarray):
    """Mean per-pixel cross entropy of softmax(scores) against integer labels.

    ``scores`` is ``[N_c, H, W]`` or ``[N, N_c, H, W]``; ``labels`` drops the
    class axis. Returns ``(LossValue, grad_scores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    axis = scores.ndim - 3
    if scores.ndim not in (3, 4) or labels.shape != scores.shape[:axis] + scores.shape[axis + 1:]:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} disagree")
    nc = scores.shape[axis]
    bad = (labels < 0) | (labels >= nc)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {labels[where]} at pixel {where} outside 0..{nc - 1}")
    q = nk.softmax(scores, axis=axis)
    q_true = np.take_along_axis(q, np.expand_dims(labels, axis), axis=axis)
    count = labels.size
    loss = float(-np.log(np.maximum(q_true, PROB_FLOOR)).sum() / count)
    grad = q.copy()
    np.put_along_axis(grad, np.expand_dims(labels, axis), q_true - 1.0, axis=axis)
    return LossValue(loss, count), grad / count


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, config: TrainConfig):
    """Classical momentum: ``v' = mu*v - lr*g``, ``theta' = theta + v'``.

    Returns new ``(params, velocity)`` dicts; inputs are left untouched.
    """
    if set(params) != set(grads) or set(params) != set(velocity):
        raise CorruptionError("parameter, gradient and velocity names differ")
    new_p, new_v = {}, {}
    for name, theta in params.items():
        g, v = grads[name], velocity[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise CorruptionError(f"shape mismatch for {name}: {theta.shape}, {g.shape}, {v.shape}")
        v2 = config.momentum * v - config.learning_rate * g
        new_v[name] = v2
        new_p[name] = theta + v2
    return new_p, new_v


def zero_velocity(model: SaversModel) -> dict:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def stack_batch(samples: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """``(images [N,1,H,W], labels [N,H,W])`` from ``(ChipRecord, LabelImage)`` pairs."""
    shapes = {chip.image.shape for chip, _ in samples}
    if len(shapes) != 1:
        raise DimensionError(f"batch mixes image shapes {sorted(shapes)}")
    images = np.stack([chip.image for chip, _ in samples])
    labels = np.stack([lab.labels for _, lab in samples])
    return images, labels


def loss_and_grads(model: SaversModel, images: np.ndarray, labels: np.ndarray,
                   train: bool = True, rng: np.random.Generator | None = None):
    tape = Tape()
    scores, _ = forward(model, images, train=train, rng=rng, tape=tape)
    loss, g = cross_entropy(scores, labels)
    return loss, tape.backward(g)


@dataclass
class TrainState:
    velocity: dict
    shuffle_rng: np.random.Generator
    dropout_rng: np.random.Generator

    @classmethod
    def fresh(cls, model: SaversModel, seed: int) -> "TrainState":
        return cls(zero_velocity(model), stream(seed, "shuffle"), stream(seed, "dropout"))


@dataclass
class EpochReport:
    mean_loss: float
    batch_losses: list[float]


def train_epoch(model: SaversModel, dataset: Sequence, config: TrainConfig,
                state: TrainState) -> EpochReport:
    """One shuffled pass; updates ``model.params`` and ``state`` in place."""
    if not len(dataset):
        raise ConfigError("cannot train on an empty dataset")
    order = state.shuffle_rng.permutation(len(dataset))
    losses, weights = [], []
    for start in range(0, len(order), config.batch_size):
        batch = [dataset[i] for i in order[start:start + config.batch_size]]
        images, labels = stack_batch(batch)
        loss, grads = loss_and_grads(model, images, labels, True, state.dropout_rng)
        model.params, state.velocity = sgd_momentum_step(model.params, grads, state.velocity, config)
        losses.append(loss.value)
        weights.append(len(batch))
    mean = float(np.average(losses, weights=weights))
    return EpochReport(mean, losses)


def coarse_accuracy(model: SaversModel, dataset: Sequence, batch_size: int = 16) -> float:
    if not len(dataset):
        raise ConfigError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start:start + batch_size]
        images, _ = stack_batch(batch)
        for (chip, _), res in zip(batch, coarse_segment_batch(model, images)):
            correct += res.predicted_class == chip.class_id
    return correct / len(dataset)


@dataclass
class HistoryRow:
    epoch: int
    mean_train_loss: float
    eval_accuracy: float


def best_epoch(history: Sequence[HistoryRow]) -> int:
    """Epoch with highest eval accuracy; the earliest wins ties."""
    best = None
    for row in history:
        if best is None or row.eval_accuracy > best.eval_accuracy:
            best = row
    return best.epoch


@dataclass
class FitResult:
    history: list[HistoryRow]
    best_epoch: int
    best_model: SaversModel
    final_model: SaversModel
    checkpoints: dict = field(default_factory=dict)


def fit(model: SaversModel, train_set: Sequence, eval_set: Sequence, config: TrainConfig,
        checkpoint_path=None, keep_epoch_checkpoints: bool = False) -> FitResult:
    """Train for ``config.epochs`` epochs, keeping the best-by-eval-accuracy model."""
    state = TrainState.fresh(model, config.seed)
    history, best, snapshots = [], None, {}
    for epoch in range(1, config.epochs + 1):
        report = train_epoch(model, train_set, config, state)
        acc = coarse_accuracy(model, eval_set)
        history.append(HistoryRow(epoch, report.mean_loss, acc))
        log.info("epoch %d loss %.5f eval acc %.4f", epoch, report.mean_loss, acc)
        if keep_epoch_checkpoints:
            snapshots[epoch] = model.copy()
        if best is None or acc > best[0]:
            best = (acc, epoch, model.copy())
            if checkpoint_path is not None:
                save_checkpoint(best[2], checkpoint_path)
    return FitResult(history, best[1], best[2], model, snapshots)


HISTORY_FIELDS = ["epoch", "mean_train_loss", "eval_accuracy"]


def write_history(history: Sequence[HistoryRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row.epoch, repr(row.mean_train_loss), repr(row.eval_accuracy)])


def read_history(path) -> list[HistoryRow]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [HistoryRow(int(r["epoch"]), float(r["mean_train_loss"]), float(r["eval_accuracy"]))
            for r in rows]
