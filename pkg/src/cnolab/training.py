"""Optimizer, step-decay schedule, training loop and the repeat protocol."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch

from .cno import NumericError, evaluate, loss_and_gradients

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_error", "lr")


class ContractViolation(RuntimeError):
    """Gradients offered for tensors the optimizer does not own."""


class TrainingDivergence(NumericError):
    def __init__(self, epoch: int, batch: int, message: str):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")


class PartialResultError(RuntimeError):
    def __init__(self, completed: Sequence[int], errors: Sequence[float], failed_seed: int, cause: Exception):
        self.completed = list(completed)
        self.errors = list(errors)
        self.failed_seed = failed_seed
        super().__init__(f"repeat with seed {failed_seed} failed ({cause}); completed seeds: {self.completed}")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    gamma: float = 0.98
    decay_every: int = 10
    epochs: int = 500
    batch_size: int = 16
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    repeats: int = 5
    select_best: bool = True
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1 or self.repeats < 1:
            raise ValueError("batch_size, decay_every and repeats must be >= 1, epochs >= 0")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), "seed": int(seed)})


def lr_at(epoch: int, config: TrainConfig) -> float:
    """``lr0 * gamma ** floor(epoch / decay_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.gamma ** (epoch // config.decay_every)


class AdamW:
    """Decoupled weight decay Adam over a model's trainable tensors.

    The tensors are updated in place. Weight decay is applied to the names
    flagged by ``model.decay_flags()`` only.
    """

    def __init__(self, model, config: TrainConfig):
        self.params = model.trainable()
        flags = model.decay_flags()
        decay = [t for k, t in self.params.items() if flags.get(k, False)]
        plain = [t for k, t in self.params.items() if not flags.get(k, False)]
        groups = [g for g in ({"params": decay, "weight_decay": config.weight_decay}, {"params": plain, "weight_decay": 0.0}) if g["params"]]
        self.optimizer = torch.optim.AdamW(groups, lr=config.lr0, betas=config.betas, eps=config.eps, foreach=False) if groups else None

    def step(self, grads: Mapping[str, torch.Tensor], lr: float):
        extra = set(grads) - set(self.params)
        if extra:
            raise ContractViolation(f"gradients supplied for frozen or unknown entries: {sorted(extra)[:5]}")
        missing = set(self.params) - set(grads)
        if missing:
            raise ContractViolation(f"missing gradients for trainable entries: {sorted(missing)[:5]}")
        if self.optimizer is None:
            return
        for name, tensor in self.params.items():
            tensor.grad = grads[name].detach().to(tensor.dtype)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        for tensor in self.params.values():
            tensor.grad = None


def adamw_step(model, grads: Mapping[str, torch.Tensor], optimizer: AdamW | None, lr: float, config: TrainConfig) -> AdamW:
    """One update; creates the optimizer state on first use and returns it."""
    optimizer = optimizer or AdamW(model, config)
    optimizer.step(grads, lr)
    return optimizer


@dataclass
class TrainHistory:
    """Per-epoch records for epochs ``1..E``; the untrained model's errors sit apart."""

    train_loss: list[float] = field(default_factory=list)
    val_error: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    initial_train_loss: float = math.nan
    initial_val_error: float = math.nan
    best_epoch: int = 0
    seconds: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def rows(self) -> list[tuple[int, float, float, float]]:
        first = [(0, self.initial_train_loss, self.initial_val_error, 0.0)]
        return first + [(e + 1, t, v, lr) for e, (t, v, lr) in enumerate(zip(self.train_loss, self.val_error, self.lr))]

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_FIELDS)
            for epoch, loss, val, lr in self.rows():
                writer.writerow([epoch, repr(float(loss)), repr(float(val)), repr(float(lr))])


def read_history_csv(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        inputs, outputs = data
    else:
        inputs, outputs = data.inputs, data.outputs
    return np.asarray(inputs), np.asarray(outputs)


def frozen_fingerprint(model) -> str:
    store = model.source if hasattr(model, "source") else model.store
    return store.fingerprint(model.frozen_names())


def train(model, train_set, val_set, config: TrainConfig, csv_path: str | Path | None = None, eval_batch: int = 64):
    """Mini-batch AdamW on the mean relative L1 loss.

    Shuffling draws from ``config.seed``. The model is updated in place and
    returned with its :class:`TrainHistory`; with ``select_best`` the
    parameters of the best validation epoch (among epochs ``1..E``) are kept.
    """
    x_np, y_np = _arrays(train_set)
    vx, vy = _arrays(val_set)
    if len(x_np) == 0 or len(vx) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if x_np.shape[1:] != vx.shape[1:]:
        raise ValueError(f"train resolution {x_np.shape[1:]} differs from validation {vx.shape[1:]}")
    native = model.config.native_resolution or x_np.shape[-1]
    if native % (2 ** (model.config.levels + 1)):
        raise ValueError(f"resolution {native} is not divisible by 2^{model.config.levels + 1}")

    start = time.perf_counter()
    frozen_before = frozen_fingerprint(model)
    x = torch.as_tensor(x_np, dtype=model.dtype)
    y = torch.as_tensor(y_np, dtype=model.dtype)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    history.initial_train_loss = evaluate(model, x_np, y_np, eval_batch)
    history.initial_val_error = evaluate(model, vx, vy, eval_batch)
    optimizer = AdamW(model, config)
    best_val, best_params = math.inf, None

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = rng.permutation(len(x))
        losses, weights = [], []
        for b, i in enumerate(range(0, len(order), config.batch_size)):
            idx = torch.as_tensor(order[i : i + config.batch_size])
            try:
                loss, grads = loss_and_gradients(model, x[idx], y[idx])
            except NumericError as err:
                raise TrainingDivergence(epoch + 1, b, str(err)) from None
            if not all(torch.isfinite(g).all() for g in grads.values()):
                raise TrainingDivergence(epoch + 1, b, "non-finite gradient")
            if config.grad_clip:
                total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
                if total > config.grad_clip:
                    grads = {k: g * (config.grad_clip / float(total)) for k, g in grads.items()}
            optimizer.step(grads, lr)
            losses.append(loss)
            weights.append(len(idx))
        val = evaluate(model, vx, vy, eval_batch)
        history.train_loss.append(float(np.average(losses, weights=weights)))
        history.val_error.append(val)
        history.lr.append(lr)
        if val < best_val:
            best_val, history.best_epoch = val, epoch + 1
            best_params = {k: t.detach().clone() for k, t in model.trainable().items()}
        log.debug("epoch %d loss %.4f val %.4f lr %.3g", epoch + 1, history.train_loss[-1], val, lr)

    if config.select_best and best_params is not None:
        model.assign(best_params)
    elif config.epochs:
        history.best_epoch = config.epochs
    if frozen_fingerprint(model) != frozen_before:
        raise ContractViolation("frozen parameters changed during training")
    history.seconds = time.perf_counter() - start
    if csv_path is not None:
        history.write_csv(csv_path)
    return model, history


@dataclass
class ExperimentResult:
    strategy: str
    seeds: list[int]
    errors: list[float]
    mmd: float | None = None
    started: str = ""
    finished: str = ""
    checkpoints: list[str] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors, ddof=1)) if len(self.errors) > 1 else 0.0

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out.update(mean=self.mean, std=self.std)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentResult":
        data = {k: v for k, v in data.items() if k not in ("mean", "std")}
        return cls(**data)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_repeats(task: Callable[[int], float], config: TrainConfig, strategy: str = "", seeds: Sequence[int] | None = None) -> ExperimentResult:
    """Run ``task(seed)`` for seeds ``config.seed + 0 .. config.seed + repeats - 1``.

    ``task`` returns a test error in percent.
    """
    if config.repeats < 1:
        raise ValueError("repeats must be >= 1")
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(config.repeats)]
    started = _now()
    errors: list[float] = []
    for i, seed in enumerate(seeds):
        try:
            errors.append(float(task(seed)))
        except Exception as err:
            raise PartialResultError(seeds[:i], errors, seed, err) from err
    return ExperimentResult(strategy, seeds, errors, started=started, finished=_now())
