"""Mini-batch SGD loop shared by both training stages."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergedLoss, EmptyDataset
from .layers import SgdState, lr_schedule, sgd_step

log = logging.getLogger(__name__)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_mee, lr, wall_time):
        self.records.append(
            {"epoch": epoch, "train_loss": train_loss, "val_mee": val_mee, "lr": lr, "wall_time": wall_time}
        )

    def __len__(self):
        return len(self.records)

    @property
    def val_mee(self):
        return [r["val_mee"] for r in self.records]

    @property
    def train_loss(self):
        return [r["train_loss"] for r in self.records]

    def to_json(self):
        return {"epochs": self.records}

    @classmethod
    def from_json(cls, data):
        return cls(list(data["epochs"]))


@dataclass
class TrainState:
    """Everything needed to continue training after ``next_epoch - 1``."""

    next_epoch: int
    params: dict
    velocity: dict
    best_params: dict
    best_val: float
    best_epoch: int
    history: TrainHistory


def fit(params, n_train, step, validate, *, epochs, batch_size, lr, lr_decay, momentum, weight_decay,
        seed, state=None, stop_after=None, deterministic=True, on_epoch=None):
    """Run seeded mini-batch SGD and keep the best-validation parameters.

    ``params`` is the live parameter dict (arrays are updated in place).
    ``step(indices, rng)`` runs forward/backward on a batch and returns
    ``(loss, grads)``; ``validate()`` returns the validation MEE.

    Batches come from a permutation seeded by ``(seed, epoch)`` and dropout
    RNGs by ``(seed, epoch, batch)``, so resuming reproduces an uninterrupted
    run exactly. ``stop_after`` ends the call after that many epochs (used
    to simulate interruption). With ``deterministic`` the history carries no
    wall-clock times.
    """
    if n_train == 0:
        raise EmptyDataset("training set is empty")
    if state is None:
        state = TrainState(0, params, {}, copy.deepcopy(params), np.inf, -1, TrainHistory())
    else:
        for k, v in state.params.items():
            params[k][...] = v
        state.params = params
    opt = SgdState(lr, momentum=momentum, weight_decay=weight_decay, velocity=state.velocity)
    ran = 0
    for epoch in range(state.next_epoch, epochs):
        if stop_after is not None and ran >= stop_after:
            break
        t0 = time.perf_counter()
        opt.learning_rate = lr_schedule(epoch, lr, lr_decay)
        order = np.random.default_rng([seed, epoch]).permutation(n_train)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n_train, batch_size)):
            idx = order[start:start + batch_size]
            loss, grads = step(idx, np.random.default_rng([seed, epoch, b]))
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}", checkpoint=state.best_params)
            sgd_step(opt, params, grads)
            total += loss * len(idx)
            count += len(idx)
        val = float(validate())
        if not np.isfinite(val):
            raise DivergedLoss(f"non-finite validation error at epoch {epoch}", checkpoint=state.best_params)
        if val < state.best_val:
            state.best_val = val
            state.best_epoch = epoch
            state.best_params = copy.deepcopy(params)
        wall = None if deterministic else time.perf_counter() - t0
        state.history.append(epoch, total / count, val, opt.learning_rate, wall)
        state.velocity = opt.velocity
        state.next_epoch = epoch + 1
        ran += 1
        log.info("epoch %d loss %.6f val_mee %.4f lr %.6g", epoch, total / count, val, opt.learning_rate)
        if on_epoch is not None:
            on_epoch(state)
    return state
