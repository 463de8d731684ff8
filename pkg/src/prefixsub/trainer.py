"""Subspace training loop, early stopping and learning-rate grid search."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import InputError
from .evaluation import EncodedSplit, EvalConfig, dev_metric
from .data import Schema
from .model import Encoder, ModelConfig, require_frozen
from .optim import AdamW
from .subspace import Baked, SamplePlan, SubspaceModel, init_simplex

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
SHUFFLE_STREAM = 7
SCOPES = ("prefix_and_head", "prefix_only", "head_only")
DEFAULT_LEARNING_RATES = (1e-4, 2e-4, 5e-4)


@dataclass
class TrainConfig:
    epochs: int = 50
    patience: int = 10
    batch_size: int = 16
    learning_rate: float = 5e-4
    n_vertices: int = 6
    prefix_len: int = 8
    dev_mode: str = "stochastic"
    n_concat: int = 10
    subspace_scope: str = "prefix_and_head"
    seed: int = 0
    weight_decay: float = 0.01
    lr_schedule: str = "constant"
    dev_aggregate: str = "pooled"
    learning_rates: list[float] = field(default_factory=lambda: list(DEFAULT_LEARNING_RATES))

    def __post_init__(self) -> None:
        if not 1 <= self.patience <= self.epochs:
            raise InputError(f"need 1 <= patience <= epochs (got {self.patience}, {self.epochs})")
        if self.batch_size < 1 or self.n_vertices < 1 or self.n_concat < 1:
            raise InputError("batch_size, n_vertices and n_concat must be >= 1")
        if self.dev_mode not in ("stochastic", "deterministic"):
            raise InputError(f"unknown dev_mode {self.dev_mode!r}")
        if self.subspace_scope not in SCOPES:
            raise InputError(f"unknown subspace_scope {self.subspace_scope!r}")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")

    @property
    def prefix_vertices(self) -> int:
        return 1 if self.subspace_scope == "head_only" else self.n_vertices

    @property
    def head_vertices(self) -> int:
        return 1 if self.subspace_scope == "prefix_only" else self.n_vertices

    def eval_config(self, epoch: int) -> EvalConfig:
        return EvalConfig(mode=self.dev_mode, n_concat=self.n_concat, seed=self.seed * 1000 + epoch,
                          aggregate=self.dev_aggregate)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_metric: float
    stopped: bool = False


@dataclass
class TrainState:
    epoch: int = 0
    best_metric: float = -np.inf
    best_epoch: int = 0
    best_model: Baked | None = None
    best_simplex: dict[str, np.ndarray] | None = None
    epochs_since_improvement: int = 0
    history: list[EpochRecord] = field(default_factory=list)
    learning_rate: float | None = None


def model_config_for(encoder: Encoder, config: TrainConfig, schema: Schema) -> ModelConfig:
    task_head = "regression" if schema.regression else "classification"
    return replace(encoder.config, prefix_len=config.prefix_len, task_head=task_head,
                   num_classes=schema.num_classes or 2)


def build_model(encoder: Encoder, config: TrainConfig, schema: Schema) -> SubspaceModel:
    """Fresh simplexes sized by the config's subspace scope on top of a frozen encoder."""
    prefix, heads = init_simplex(model_config_for(encoder, config, schema), config.prefix_vertices,
                                 config.seed, head_vertices=config.head_vertices)
    return SubspaceModel(encoder, prefix, heads)


def task_loss(outputs: T.Tensor, labels: np.ndarray, regression: bool) -> T.Tensor:
    if regression:
        return T.mse_loss(outputs, np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    return T.cross_entropy(outputs, labels)


def train_step(model: SubspaceModel, batch, optimizer: AdamW, *, seed: int, epoch: int,
               regression: bool = False, plan: SamplePlan | None = None) -> float:
    """One descent step with a freshly drawn per-observation plan (or a forced ``plan``)."""
    require_frozen(model.encoder)
    if len(batch) == 0:
        raise InputError("empty batch")
    if plan is None:
        plan = model.draw_plan([(TRAIN_STREAM, epoch, int(r)) for r in batch.rows], seed)
    loss = task_loss(model.forward(batch, plan), batch.labels, regression)
    T.backward(loss)
    optimizer.step(model.active_parameters(plan))
    return loss.item()


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, SHUFFLE_STREAM, epoch]).permutation(n)


def fit(model: SubspaceModel, train: EncodedSplit, val: EncodedSplit, config: TrainConfig, kind: str,
        on_epoch: Callable[[EpochRecord], None] | None = None,
        dev_fn: Callable[[SubspaceModel, int], float] | None = None,
        on_step: Callable[[int, int, float], None] | None = None) -> TrainState:
    """Train with early stopping on the dev metric; keeps the best epoch's baked centroid.

    ``dev_fn(model, epoch)`` overrides the dev-metric computation (test hook);
    ``on_step(epoch, step, loss)`` sees every batch loss.
    """
    if len(train) == 0 or len(val) == 0:
        raise InputError("train and validation splits must be nonempty")
    require_frozen(model.encoder)
    params = model.trainable_parameters()
    steps_per_epoch = -(-len(train) // config.batch_size)
    optimizer = AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay,
                      schedule=config.lr_schedule, total_steps=steps_per_epoch * config.epochs)
    regression = train.schema.regression
    state = TrainState(learning_rate=config.learning_rate)
    for epoch in range(1, config.epochs + 1):
        order = epoch_order(len(train), config.seed, epoch)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = train.batch(order[start:start + config.batch_size])
            losses.append(train_step(model, batch, optimizer, seed=config.seed, epoch=epoch, regression=regression))
            if on_step:
                on_step(epoch, len(losses) - 1, losses[-1])
        score = dev_fn(model, epoch) if dev_fn else dev_metric(model, val, kind, config.eval_config(epoch))
        state.epoch = epoch
        if score > state.best_metric:
            state.best_metric, state.best_epoch = score, epoch
            state.best_model = model.centroid()
            state.best_simplex = model.state_dict()
            state.epochs_since_improvement = 0
        else:
            state.epochs_since_improvement += 1
        stop = state.epochs_since_improvement >= config.patience
        record = EpochRecord(epoch, float(np.mean(losses)), float(score), stop)
        state.history.append(record)
        log.debug("epoch %d loss %.4f dev %.4f", epoch, record.train_loss, record.dev_metric)
        if on_epoch:
            on_epoch(record)
        if stop:
            break
    return state


FitFn = Callable[[TrainConfig], TrainState]


def grid_search(fit_fn: FitFn, candidate_lrs: Sequence[float], template: TrainConfig) -> tuple[TrainConfig, TrainState]:
    """Run ``fit_fn`` once per learning rate; best dev metric wins, ties go to the lower rate."""
    if not candidate_lrs:
        raise InputError("grid_search needs at least one learning rate")
    best: tuple[TrainConfig, TrainState] | None = None
    for lr in candidate_lrs:
        cfg = replace(template, learning_rate=float(lr))
        state = fit_fn(cfg)
        if best is None or state.best_metric > best[1].best_metric or (
                state.best_metric == best[1].best_metric and cfg.learning_rate < best[0].learning_rate):
            best = (cfg, state)
    return best
