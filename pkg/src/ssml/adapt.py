"""Semi-supervised adaptation of a pre-trained backbone to a target subject.

Unlabeled target samples are pseudo-labelled by the model. Those that are
both confident (``p > epsilon``) and close to their class center
(``d < sigma``) form the support set. Each outer epoch draws a class-balanced
subsample of it and splits that into mini-batches. Every batch gets one inner
SGD step. The outer gradient adds the batch loss and the few-shot labeled loss,
both evaluated at the adapted parameters; it is averaged over the batches and
applied by Adam with weight decay.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .backbones import ModelParams, predict
from .data import DataError
from .meta import JointObjective, inner_adapt
from .objectives import ClassCenters, feature_distances, update_centers
from .optim import AdamState, adam_step


class AdaptationError(RuntimeError):
    pass


@dataclass
class AdaptConfig:
    epsilon: float = 0.9
    sigma: float = 1.0
    gamma: float = 0.001
    alpha: float = 0.001
    weight_decay: float = 0.001
    outer_epochs: int = 10
    n_shot: int = 5
    batches_per_epoch: int = 4
    max_batch: int = 64
    inner_steps: int = 1
    refresh_support: bool = False
    reduction: str = "mean"

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise DataError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.sigma <= 0:
            raise DataError(f"sigma must be positive, got {self.sigma}")
        if self.n_shot < 0:
            raise DataError(f"n_shot must be >= 0, got {self.n_shot}")


class PseudoSample(NamedTuple):
    index: int
    label: int
    confidence: float
    distance: float


@dataclass
class PseudoLabels:
    """Pseudo-labels for a block of unlabeled samples (column arrays)."""

    index: np.ndarray
    label: np.ndarray
    confidence: np.ndarray
    distance: np.ndarray
    n_classes: int = 2

    def __len__(self) -> int:
        return len(self.index)

    def __iter__(self) -> Iterator[PseudoSample]:
        for i, y, p, d in zip(self.index, self.label, self.confidence, self.distance):
            yield PseudoSample(int(i), int(y), float(p), float(d))

    def take(self, mask: np.ndarray) -> "PseudoLabels":
        return PseudoLabels(self.index[mask], self.label[mask], self.confidence[mask], self.distance[mask],
                            self.n_classes)

    @classmethod
    def from_samples(cls, samples: list[PseudoSample], n_classes: int = 2) -> "PseudoLabels":
        cols = list(zip(*samples)) if samples else [(), (), (), ()]
        return cls(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                   np.array(cols[2], dtype=np.float64), np.array(cols[3], dtype=np.float64), n_classes)


class SupportSet(PseudoLabels):
    """Pseudo-labelled samples that passed the confidence and distance filter."""

    def counts(self) -> np.ndarray:
        return np.bincount(self.label, minlength=self.n_classes)


def pseudo_label(params: ModelParams, centers: ClassCenters, unlabeled: np.ndarray) -> PseudoLabels:
    """Argmax label, its probability and the normalised distance to that label's center."""
    K = params.spec.n_classes
    if len(unlabeled) == 0:
        return PseudoLabels(*(np.zeros(0, dt) for dt in (np.int64, np.int64, np.float64, np.float64)), K)
    if centers.n != params.spec.feature_width:
        raise DataError(f"center width {centers.n} does not match feature width {params.spec.feature_width}")
    probs, feats = predict(params, unlabeled)
    label = probs.argmax(axis=1)  # first maximum on ties
    conf = probs[np.arange(len(label)), label].astype(np.float64)
    dist = feature_distances(feats, centers.centers, label)
    return PseudoLabels(np.arange(len(label)), label, conf, dist, K)


def build_support_set(pseudo: PseudoLabels, epsilon: float, sigma: float) -> SupportSet:
    keep = (pseudo.confidence > epsilon) & (pseudo.distance < sigma)
    q = pseudo.take(keep)
    return SupportSet(q.index, q.label, q.confidence, q.distance, q.n_classes)


def balance_subsample(support: SupportSet, rng: np.random.Generator | int, n_batches: int = 4,
                      max_batch: int = 64) -> list[np.ndarray]:
    """Class-balanced draw from the support set, split into mini-batches.

    Every class present in ``support`` contributes ``min`` (over present classes)
    samples, drawn without replacement. The draw is shuffled and split into
    ``max(n_batches, ceil(total / max_batch))`` near-equal batches. Returned
    arrays hold positions into ``support``.
    """
    rng = np.random.default_rng(rng)
    if len(support) == 0:
        return []
    counts = support.counts()
    present = np.flatnonzero(counts)
    if len(present) < support.n_classes:
        warnings.warn(f"support set covers only classes {present.tolist()} of {support.n_classes}", stacklevel=2)
    k = counts[present].min()
    picked = np.concatenate([rng.choice(np.flatnonzero(support.label == c), size=k, replace=False)
                             for c in present])
    picked = picked[rng.permutation(len(picked))]
    parts = max(n_batches, int(np.ceil(len(picked) / max_batch)))
    return [b for b in np.array_split(picked, parts) if len(b)]


@dataclass
class AdaptReport:
    q_size: int = 0
    q_counts: list[int] = field(default_factory=list)
    fallback: bool = False
    rows: list[dict] = field(default_factory=list)


@dataclass
class AdaptResult:
    params: ModelParams
    centers: ClassCenters
    report: AdaptReport


def _eval_acc(params: ModelParams, eval_set) -> float:
    if eval_set is None or len(eval_set[1]) == 0:
        return float("nan")
    probs, _ = predict(params, eval_set[0])
    return float((probs.argmax(axis=1) == eval_set[1]).mean())


def _row(epoch, report: AdaptReport, acc) -> dict:
    row = {"epoch": epoch, "q_size": report.q_size}
    for c, n in enumerate(report.q_counts):
        row[f"q_class{c}"] = n
    row["fallback"] = int(report.fallback)
    row["eval_acc"] = acc
    return row


def supervised_finetune(params: ModelParams, centers: ClassCenters, labeled: tuple[np.ndarray, np.ndarray],
                        config: AdaptConfig, eval_set=None, report: AdaptReport | None = None) -> AdaptResult:
    """Plain fine-tuning on the labeled target samples (the MAML calibration baseline)."""
    x_q, y_q = labeled
    report = report or AdaptReport(q_counts=[0] * params.spec.n_classes)
    objective = JointObjective(params.spec, centers.copy(), config.reduction)
    report.rows.append(_row(0, report, _eval_acc(params, eval_set)))
    if len(y_q) == 0:
        if config.outer_epochs > 0:
            raise AdaptationError("nothing to adapt on: no labeled samples")
        return AdaptResult(params, objective.centers, report)
    tensors = params.tensors
    opt = AdamState.init(tensors, lr=config.gamma, weight_decay=config.weight_decay)
    for epoch in range(1, config.outer_epochs + 1):
        tensors = adam_step(opt, tensors, objective(tensors, x_q, y_q).grads)
        current = params.with_tensors(tensors)
        _, feats = predict(current, x_q)
        objective.centers = update_centers(objective.centers, feats, y_q)
        report.rows.append(_row(epoch, report, _eval_acc(current, eval_set)))
    return AdaptResult(params.with_tensors(tensors), objective.centers, report)


def ssml_finetune(params: ModelParams, centers: ClassCenters, labeled: tuple[np.ndarray, np.ndarray],
                  unlabeled: np.ndarray, config: AdaptConfig | None = None, seed: int = 0,
                  eval_set=None) -> AdaptResult:
    """Semi-supervised fine-tuning on pseudo-labelled plus few-shot labeled target data.

    Falls back to :func:`supervised_finetune` (flagged in the report) when no
    unlabeled sample passes the filter; raises if there is nothing at all to adapt on.
    """
    config = config or AdaptConfig()
    x_q, y_q = labeled
    support = build_support_set(pseudo_label(params, centers, unlabeled), config.epsilon, config.sigma)
    report = AdaptReport(len(support), support.counts().tolist())
    if len(support) == 0:
        if len(y_q) == 0:
            raise AdaptationError("nothing to adapt on: empty support set and no labeled samples")
        report.fallback = True
        return supervised_finetune(params, centers, labeled, config, eval_set, report)

    rng = np.random.default_rng(seed)
    objective = JointObjective(params.spec, centers.copy(), config.reduction)
    tensors = params.tensors
    opt = AdamState.init(tensors, lr=config.gamma, weight_decay=config.weight_decay)
    report.rows.append(_row(0, report, _eval_acc(params, eval_set)))
    for epoch in range(1, config.outer_epochs + 1):
        if config.refresh_support and epoch > 1:
            current = params.with_tensors(tensors)
            support = build_support_set(pseudo_label(current, objective.centers, unlabeled),
                                        config.epsilon, config.sigma)
            report.q_size, report.q_counts = len(support), support.counts().tolist()
        batches = balance_subsample(support, rng, config.batches_per_epoch, config.max_batch)
        if not batches:
            report.rows.append(_row(epoch, report, _eval_acc(params.with_tensors(tensors), eval_set)))
            continue
        total = None
        for pos in batches:
            x_j = unlabeled[support.index[pos]]
            y_j = support.label[pos]
            adapted = inner_adapt(tensors, x_j, y_j, config.alpha, config.inner_steps, objective)
            grads = objective(adapted, x_j, y_j).grads
            if len(y_q):
                for k, g in objective(adapted, x_q, y_q).grads.items():
                    grads[k] = grads[k] + g
            if total is None:
                total = grads
            else:
                for k, g in grads.items():
                    total[k] += g
        total = {k: g / len(batches) for k, g in total.items()}
        tensors = adam_step(opt, tensors, total)
        current = params.with_tensors(tensors)
        used = np.concatenate(batches)
        x_c = unlabeled[support.index[used]]
        y_c = support.label[used]
        if len(y_q):
            x_c, y_c = np.concatenate([x_q, x_c]), np.concatenate([y_q, y_c])
        _, feats = predict(current, x_c)
        objective.centers = update_centers(objective.centers, feats, y_c)
        report.rows.append(_row(epoch, report, _eval_acc(current, eval_set)))
    return AdaptResult(params.with_tensors(tensors), objective.centers, report)
