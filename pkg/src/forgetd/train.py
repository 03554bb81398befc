"""Minibatch training that records every update into one or more ledgers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from forgetd.data import BatchPlan, Dataset
from forgetd.errors import ConfigError
from forgetd.ledger import Ledger, record_update
from forgetd.nn import AdamState, ModelParams, adam_step, loss_and_grads, one_hot, param_axpy, sgd_step

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 128
    learning_rate: float = 0.001
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list = field(default_factory=list)
    history: list = field(default_factory=list)


def train(
    params: ModelParams,
    dataset: Dataset,
    plan: BatchPlan,
    cfg: TrainConfig,
    ledgers: Sequence[Ledger] = (),
    on_epoch: Callable[[int, ModelParams], object] | None = None,
) -> TrainResult:
    """Run ``plan`` over ``dataset`` from ``params``; every step's delta goes to each ledger.

    ``on_epoch(e, params)`` is called after each epoch and its return values
    are collected in ``TrainResult.history``.
    """
    for led in ledgers:
        if led.n_epochs != plan.n_epochs or led.batches_per_epoch != plan.batches_per_epoch:
            raise ConfigError(
                f"ledger expects {led.n_epochs}x{led.batches_per_epoch} batches, "
                f"plan has {plan.n_epochs}x{plan.batches_per_epoch}"
            )
    adam = AdamState.for_params(params) if cfg.optimizer == "adam" else None
    C = params.arch.n_classes
    result = TrainResult(params)
    for e, batches in enumerate(plan.epochs):
        total, seen = 0.0, 0
        for b, ids in enumerate(batches):
            pos = dataset.positions(ids)
            x = dataset.images[pos]
            loss, grads = loss_and_grads(params, (x, one_hot(dataset.labels[pos], C)))
            if adam is None:
                params, delta = sgd_step(params, grads, cfg.learning_rate)
            else:
                params, delta = adam_step(params, grads, adam, cfg.learning_rate)
            for led in ledgers:
                record_update(led, e, b, ids, delta)
            total += loss * len(ids)
            seen += len(ids)
        result.epoch_losses.append(total / seen)
        log.info("epoch %d loss %.6f", e, total / seen)
        if on_epoch is not None:
            result.history.append(on_epoch(e, params))
    result.params = params
    return result


def replay(initial: ModelParams, ledger: Ledger) -> ModelParams:
    """Re-apply every recorded delta in order (full ledgers reproduce training bitwise)."""
    w = initial
    for rec in ledger.records:
        w = param_axpy(w, 1, ModelParams.from_flat(initial.arch, [x.to_dense() for x in rec.layers]))
    return w

