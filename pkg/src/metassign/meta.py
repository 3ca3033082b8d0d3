"""Meta-training engine: inner-loop task adaptation, outer-loop meta-updates.

The engine is generic over a model object exposing two methods::

    init_params(rng) -> dict[str, Tensor]
    loss(params, samples, rng=None, train=False) -> scalar Tensor

Model parameters travel as name->Tensor mappings and are never mutated in
place: every update builds fresh tensors, so the caller's parameters are
untouched by adaptation. Both loops are plain gradient descent with global
gradient-norm clipping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, backward, parameter
from .datasets import Dataset, Sample
from .errors import AdaptationError, ConfigError, GradientError, NonFiniteError

META_GRAD_MODES = ("first_order", "exact_fd")


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.02            # inner (task-level) learning rate
    beta: float = 0.055            # outer (meta) learning rate
    k_support: int = 4
    m_query: int = 25
    inner_steps: int = 5
    task_batch: int = 7
    meta_iterations: int = 1500
    meta_grad_mode: str = "first_order"
    seed: int = 0
    clip_norm: float = 10.0
    fd_step: float = 1e-5          # exact_fd central-difference step

    def __post_init__(self):
        if self.alpha <= 0 or self.beta < 0:
            raise ConfigError("need alpha > 0 and beta >= 0")
        if self.k_support < 1 or self.m_query < 1:
            raise ConfigError("need k_support >= 1 and m_query >= 1")
        if self.inner_steps < 1:
            raise ConfigError("need inner_steps >= 1")
        if self.task_batch < 1 or self.meta_iterations < 1:
            raise ConfigError("need task_batch >= 1 and meta_iterations >= 1")
        if self.meta_grad_mode not in META_GRAD_MODES:
            raise ConfigError(
                f"meta_grad_mode must be one of {META_GRAD_MODES}, "
                f"got {self.meta_grad_mode!r}")


class HistoryEntry(NamedTuple):
    iteration: int
    mean_query_loss: float
    wall_time_s: float


@dataclass
class TaskData:
    """Support/query draw for one task inside a meta-batch."""

    task_id: int
    support: list
    query: list


@dataclass
class MetaTrainState:
    theta: dict[str, Tensor]
    iteration: int = 0
    meta_loss_history: list[HistoryEntry] = field(default_factory=list)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: parameter(t.values.copy()) for name, t in params.items()}


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def _clip(grads: dict[str, np.ndarray], clip_norm: float) -> dict[str, np.ndarray]:
    if clip_norm <= 0:
        return grads
    norm = _global_norm(grads)
    if norm <= clip_norm:
        return grads
    factor = clip_norm / norm
    return {name: g * factor for name, g in grads.items()}


def sample_task_batch(dataset: Dataset, config: MetaConfig,
                      rng: np.random.Generator) -> list[TaskData]:
    """Draw ``task_batch`` training tasks and disjoint support/query samples.

    Tasks are uniform without replacement over the training tasks; within a
    task, K + M distinct training ODs are drawn and split so support and
    query never overlap. Test tasks and test ODs are never touched.
    """
    train_tasks = dataset.split.train_task_ids
    train_ods = dataset.train_od_ids
    k, m = config.k_support, config.m_query
    if len(train_tasks) < config.task_batch:
        raise ConfigError(
            f"task_batch {config.task_batch} exceeds {len(train_tasks)} training tasks")
    if len(train_ods) < k + m:
        raise ConfigError(
            f"k_support + m_query = {k + m} exceeds {len(train_ods)} training ODs per task")
    task_ids = rng.choice(len(train_tasks), size=config.task_batch, replace=False)
    batch = []
    for idx in task_ids:
        task_id = train_tasks[int(idx)]
        picks = rng.choice(len(train_ods), size=k + m, replace=False)
        ods = [train_ods[int(i)] for i in picks]
        samples = dataset.samples_for_task(task_id, ods)
        batch.append(TaskData(task_id=task_id, support=samples[:k], query=samples[k:]))
    return batch


def inner_adapt(model, theta: dict[str, Tensor], support: list, alpha: float,
                inner_steps: int, rng: np.random.Generator | None = None,
                train: bool = True, clip_norm: float = 10.0) -> dict[str, Tensor]:
    """Task-specific parameters after ``inner_steps`` full-batch gradient
    steps on the support loss. The incoming ``theta`` is not modified."""
    if not support:
        raise ConfigError("inner_adapt needs a non-empty support set")
    current = dict(theta)
    for step in range(inner_steps):
        try:
            loss = model.loss(current, support, rng=rng, train=train)
        except NonFiniteError as exc:
            raise AdaptationError(
                f"non-finite support loss at inner step {step}: {exc}",
                step=step) from exc
        if not np.isfinite(loss.values):
            raise AdaptationError(
                f"non-finite support loss at inner step {step}", step=step)
        grads = _clip(backward(loss, current), clip_norm)
        current = {name: parameter(t.values - alpha * grads[name])
                   for name, t in current.items()}
    return current


def meta_gradient(model, theta: dict[str, Tensor], batch: list[TaskData],
                  config: MetaConfig,
                  rng: np.random.Generator | None = None,
                  ) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of the task-summed query loss w.r.t. theta, plus the mean
    query loss.

    first_order: the query-loss gradient at the adapted parameters stands in
    for the gradient at theta. exact_fd: central finite differences of the
    full objective (adaptation included) per coordinate; only tractable for
    small parameter counts.
    """
    if config.meta_grad_mode == "first_order":
        total: dict[str, np.ndarray] | None = None
        loss_sum = 0.0
        for task in batch:
            adapted = inner_adapt(model, theta, task.support, config.alpha,
                                  config.inner_steps, rng=rng,
                                  clip_norm=config.clip_norm)
            query_loss = model.loss(adapted, task.query, rng=rng, train=True)
            loss_sum += query_loss.item()
            grads = backward(query_loss, adapted)
            if total is None:
                total = grads
            else:
                total = {name: total[name] + grads[name] for name in total}
        return total, loss_sum / len(batch)

    def objective(params: dict[str, Tensor]) -> float:
        value = 0.0
        for task in batch:
            adapted = inner_adapt(model, params, task.support, config.alpha,
                                  config.inner_steps, rng=None, train=False,
                                  clip_norm=config.clip_norm)
            value += model.loss(adapted, task.query, train=False).item()
        return value

    h = config.fd_step
    grads = {}
    for name, t in theta.items():
        work = {n: (parameter(p.values.copy()) if n == name else p)
                for n, p in theta.items()}
        flat = work[name].values.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = objective(work)
            flat[i] = orig - h
            lo = objective(work)
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * h)
        grads[name] = g.reshape(t.shape)
    return grads, objective(theta) / len(batch)


def meta_step(model, state: MetaTrainState, batch: list[TaskData],
              config: MetaConfig,
              rng: np.random.Generator | None = None) -> MetaTrainState:
    """One outer-loop update of the meta-parameters; appends to history."""
    started = time.perf_counter()
    grads, mean_query_loss = meta_gradient(model, state.theta, batch, config, rng)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise GradientError(
                f"non-finite meta-gradient for '{name}' at iteration {state.iteration}")
    grads = _clip(grads, config.clip_norm)
    state.theta = {name: parameter(t.values - config.beta * grads[name])
                   for name, t in state.theta.items()}
    state.iteration += 1
    state.meta_loss_history.append(HistoryEntry(
        iteration=state.iteration, mean_query_loss=mean_query_loss,
        wall_time_s=time.perf_counter() - started))
    return state


@dataclass
class MetaTrainResult:
    theta: dict[str, Tensor]            # best-by-query-loss parameters
    best_iteration: int
    best_loss: float
    history: list[HistoryEntry]
    final_theta: dict[str, Tensor]


def meta_train(model, dataset: Dataset, config: MetaConfig,
               progress=None) -> MetaTrainResult:
    """Run the full meta-training loop on a generated dataset.

    Support/query sets are re-drawn fresh at every meta-iteration. The
    returned parameters are the checkpoint with the lowest mean query loss
    seen during training. ``progress`` is an optional callable(iteration,
    total, loss).
    """
    sample_rng = _stream(config.seed, 0)
    init_rng = _stream(config.seed, 1)
    state = MetaTrainState(theta=model.init_params(init_rng))
    best_loss = np.inf
    best_theta = _copy_params(state.theta)
    best_iteration = 0
    for iteration in range(config.meta_iterations):
        batch = sample_task_batch(dataset, config, sample_rng)
        train_rng = _stream(config.seed, 2, iteration)
        theta_before = state.theta  # the parameters the recorded loss measures
        state = meta_step(model, state, batch, config, rng=train_rng)
        loss = state.meta_loss_history[-1].mean_query_loss
        if loss < best_loss:
            best_loss = loss
            best_theta = _copy_params(theta_before)
            best_iteration = state.iteration
        if progress:
            progress(state.iteration, config.meta_iterations, loss)
    return MetaTrainResult(theta=best_theta, best_iteration=best_iteration,
                           best_loss=float(best_loss),
                           history=state.meta_loss_history,
                           final_theta=state.theta)
