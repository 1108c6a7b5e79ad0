"""First-order MAML pre-training over source subjects.

Each meta step adapts a copy of the parameters to every sampled subject with a
few SGD steps on the joint loss, evaluates the adapted copy on the same task,
sums the resulting gradients and hands them to Adam. The adapted gradients are
taken at the adapted point (no differentiation through the inner update).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .backbones import ModelParams, ModelSpec, build, predict
from .data import DataError, SubjectDataset, stratified_holdout
from .objectives import ClassCenters, LossEval, cross_entropy, evaluate, update_centers
from .optim import AdamState, Params, adam_step, sgd_step

log = logging.getLogger(__name__)


class Objective(Protocol):
    def __call__(self, params: Params, x: np.ndarray, y: np.ndarray) -> LossEval: ...


@dataclass
class JointObjective:
    """Joint loss of a backbone; ``centers`` is replaced as training updates it."""

    spec: ModelSpec
    centers: ClassCenters
    reduction: str = "mean"

    def __call__(self, params: Params, x: np.ndarray, y: np.ndarray) -> LossEval:
        return evaluate(ModelParams(self.spec, params), x, y, self.centers, self.reduction)


@dataclass
class MetaConfig:
    alpha: float = 0.001
    beta: float = 0.0001
    M: int | None = None  # subjects per meta batch; None = all sources
    inner_steps: int = 1
    inner_batch: int = 32
    max_epochs: int = 100
    patience: int = 10
    val_fraction: float = 0.1
    val_mode: str = "samples"  # or "subjects"
    reduction: str = "mean"

    def validate(self, n_sources: int) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise DataError("alpha and beta must be non-negative")
        if self.M is not None and not 1 <= self.M <= n_sources:
            raise DataError(f"M={self.M} must lie in [1, {n_sources}]")
        if self.val_mode not in ("samples", "subjects"):
            raise DataError(f"val_mode must be 'samples' or 'subjects', got {self.val_mode!r}")


def inner_adapt(params: Params, x: np.ndarray, y: np.ndarray, alpha: float, steps: int,
                objective: Callable[[Params, np.ndarray, np.ndarray], LossEval]) -> Params:
    """Return ``theta*`` after ``steps`` SGD steps; ``params`` is left untouched."""
    if len(y) == 0:
        raise DataError("cannot adapt on an empty task")
    if steps == 0:
        return {k: v.copy() for k, v in params.items()}
    adapted = params
    for _ in range(steps):
        adapted = sgd_step(adapted, objective(adapted, x, y).grads, alpha)
    return adapted


@dataclass
class MetaStepResult:
    params: Params
    meta_grad: Params
    loss: float
    correct: int
    seen: int


def meta_step(params: Params, tasks: list[tuple[np.ndarray, np.ndarray]], config: MetaConfig,
              opt: AdamState, objective) -> MetaStepResult:
    """One outer update: sum of post-adaptation gradients over ``tasks``, applied by Adam."""
    if not tasks:
        raise DataError("meta_step needs at least one task")
    meta_grad: Params | None = None
    feats, labels = [], []
    loss, correct, seen = 0.0, 0, 0
    for x, y in tasks:
        adapted = inner_adapt(params, x, y, config.alpha, config.inner_steps, objective)
        ev = objective(adapted, x, y)
        if meta_grad is None:
            meta_grad = {k: g.copy() for k, g in ev.grads.items()}
        else:
            for k, g in ev.grads.items():
                meta_grad[k] += g
        loss += ev.loss * len(y)
        seen += len(y)
        if ev.probs is not None:
            correct += int((ev.probs.argmax(axis=1) == y).sum())
        if ev.features is not None:
            feats.append(ev.features)
            labels.append(y)
    new = adam_step(opt, params, meta_grad)
    if feats and isinstance(getattr(objective, "centers", None), ClassCenters):
        objective.centers = update_centers(objective.centers, np.concatenate(feats), np.concatenate(labels))
    return MetaStepResult(new, meta_grad, loss / seen, correct, seen)


@dataclass
class PretrainResult:
    params: ModelParams
    centers: ClassCenters
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def accuracy_of(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    probs, _ = predict(params, x)
    return float((probs.argmax(axis=1) == y).mean())


def _validation_split(sources: list[SubjectDataset], config: MetaConfig, rng: np.random.Generator):
    train, val_x, val_y = [], [], []
    if config.val_mode == "subjects":
        n_val = max(1, int(round(config.val_fraction * len(sources))))
        held = set(rng.choice(len(sources), size=n_val, replace=False).tolist())
        for i, ds in enumerate(sources):
            if i in held:
                val_x.append(ds.samples)
                val_y.append(ds.labels)
            else:
                train.append((ds.samples, ds.labels))
    else:
        for ds in sources:
            mask = stratified_holdout(ds.labels, config.val_fraction, rng)
            train.append((ds.samples[~mask], ds.labels[~mask]))
            val_x.append(ds.samples[mask])
            val_y.append(ds.labels[mask])
    return train, np.concatenate(val_x), np.concatenate(val_y)


def pretrain(spec: ModelSpec, sources: list[SubjectDataset], config: MetaConfig | None = None, seed: int = 0,
             centers: ClassCenters | None = None) -> PretrainResult:
    """MAML pre-training with early stopping on held-out source accuracy.

    Returns the parameters (and centers) of the epoch with the best validation
    accuracy. Training stops once ``patience`` consecutive epochs fail to improve.
    """
    config = config or MetaConfig()
    if len(sources) < 2:
        raise DataError(f"pre-training needs at least 2 source subjects, got {len(sources)}")
    config.validate(len(sources))
    rng = np.random.default_rng(seed)
    train, val_x, val_y = _validation_split(sources, config, rng)
    params = build(spec, seed)
    objective = JointObjective(spec, centers.copy() if centers else ClassCenters.zeros(spec.n_classes, spec.feature_width),
                               config.reduction)
    opt = AdamState.init(params.tensors, lr=config.beta)
    tensors = params.tensors
    M = config.M or len(train)
    steps = max(1, int(np.ceil(max(len(y) for _, y in train) / config.inner_batch)))
    best = PretrainResult(params.copy(), objective.centers.copy(), best_epoch=0)
    best_acc, best_loss, stale = -1.0, np.inf, 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        perms = [rng.permutation(len(y)) for _, y in train]
        loss_sum, correct, seen = 0.0, 0, 0
        for step in range(steps):
            chosen = np.arange(len(train)) if M == len(train) else np.sort(rng.choice(len(train), M, replace=False))
            tasks = []
            for i in chosen:
                x, y = train[i]
                idx = np.take(perms[i], np.arange(step * config.inner_batch, (step + 1) * config.inner_batch),
                              mode="wrap")
                tasks.append((x[idx], y[idx]))
            res = meta_step(tensors, tasks, config, opt, objective)
            tensors = res.params
            loss_sum += res.loss * res.seen
            correct += res.correct
            seen += res.seen
        train_loss = loss_sum / seen
        if not np.isfinite(train_loss):
            raise FloatingPointError(f"pre-training diverged at epoch {epoch} (loss {train_loss})")
        current = params.with_tensors(tensors)
        val_probs, _ = predict(current, val_x)
        val_acc = float((val_probs.argmax(axis=1) == val_y).mean())
        val_loss = cross_entropy(val_probs, val_y)
        history.append({"epoch": epoch, "train_acc": correct / seen, "val_acc": val_acc, "train_loss": train_loss,
                        "val_loss": val_loss})
        log.debug("epoch %d loss %.4f train %.3f val %.3f", epoch, train_loss, correct / seen, val_acc)
        # accuracy first; equal accuracy counts as progress only if validation loss drops
        if val_acc > best_acc or (val_acc == best_acc and val_loss < best_loss):
            best_acc, best_loss, stale = val_acc, val_loss, 0
            best = PretrainResult(ModelParams(spec, {k: v.copy() for k, v in tensors.items()}, seed),
                                  objective.centers.copy(), best_epoch=epoch)
        else:
            stale += 1
            if stale > config.patience:
                break
    best.history = history
    return best
