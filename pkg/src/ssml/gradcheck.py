"""Finite-difference verification of backbone gradients.

The check runs in float64 on a copy of the parameters. Every parameter block
is probed along random unit directions and at a few random coordinates with
central differences of step ``h``.

Relu and max-pool make the loss piecewise smooth, and with thousands of units
a step of 1e-3 almost always crosses some kink. Each probe therefore replays
the activation pattern (relu masks, pool winners) of the unperturbed pass, so
the differences are taken on the smooth piece whose derivative the analytic
gradient claims to be. Inputs with an exact tie (a pre-activation of exactly
zero or two equal live pool arguments) have no well-defined piece and are redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backbones import ModelParams, forward
from .ndgrad import backward
from .objectives import ClassCenters, joint_loss_node

GradHook = Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]]


@dataclass
class BlockCheck:
    name: str
    max_deviation: float
    probes: int
    passed: bool


@dataclass
class GradCheckReport:
    blocks: list[BlockCheck] = field(default_factory=list)
    tol: float = 1e-4
    resampled_inputs: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.blocks) and all(b.passed for b in self.blocks)

    @property
    def max_deviation(self) -> float:
        return max((b.max_deviation for b in self.blocks), default=0.0)

    def failed_blocks(self) -> list[str]:
        return [b.name for b in self.blocks if not b.passed]


def _has_tie(tape) -> bool:
    for rec in tape.records:
        if rec.op == "relu" and np.any(rec.inputs[0].value == 0):
            return True
        if rec.op == "maxpool":
            x = rec.inputs[0].value
            half = x.shape[-1] // 2
            a, b = x[..., 0:2 * half:2], x[..., 1:2 * half:2]
            # two dead relu outputs tie at 0 but pass no gradient either way
            if np.any((a == b) & (a != 0)):
                return True
    return False


def grad_check(params: ModelParams, x: np.ndarray, labels: np.ndarray, centers: ClassCenters | None = None,
               h: float = 1e-3, tol: float | None = None, seed: int = 0, directions: int = 2, coords: int = 4,
               grad_hook: GradHook | None = None, max_resample: int = 5) -> GradCheckReport:
    """Compare analytic gradients of the joint loss with central differences.

    ``tol`` defaults to 1e-4, or 1e-3 for the CNN (the only backbone with
    max-pooling). A probe's deviation is
    ``|g_analytic - g_numeric| / max(1, |g_numeric|)``. ``grad_hook`` may
    rewrite the analytic gradients before the comparison; tests use it to
    inject faults.
    """
    rng = np.random.default_rng(seed)
    spec = params.spec
    tol = tol if tol is not None else (1e-3 if spec.kind == "CNN" else 1e-4)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if centers is None:
        centers = ClassCenters(rng.normal(0, 0.1, (spec.n_classes, spec.feature_width)), lam=0.01)
    tensors = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    report = GradCheckReport(tol=tol)

    def run(t, replay=None):
        res = forward(ModelParams(spec, t), x, record=True, replay=replay)
        loss = joint_loss_node(res.tape, res.probs_node, res.features_node, labels, centers)
        return float(loss.value), res.tape, loss

    _, tape, loss = run(tensors)
    while _has_tie(tape):
        if report.resampled_inputs >= max_resample:
            raise RuntimeError(f"every input drawn had a tied activation ({max_resample} redraws)")
        report.resampled_inputs += 1
        x = rng.normal(0.0, float(np.std(x)) or 1.0, x.shape)
        _, tape, loss = run(tensors)
    pattern = tape.signature()
    grads = backward(tape, loss)
    if grad_hook is not None:
        grads = grad_hook({k: v.copy() for k, v in grads.items()})

    for name, value in tensors.items():
        g = grads[name]
        devs = []
        for i in range(directions + coords):
            delta = np.zeros_like(value)
            if i < directions:
                d = rng.normal(size=value.shape)
                d /= np.linalg.norm(d)
                delta += h * d
                analytic = float(np.sum(g * d))
            else:
                k = int(rng.integers(value.size))
                delta.flat[k] = h
                analytic = float(g.flat[k])
            plus = run({**tensors, name: value + delta}, pattern)[0]
            minus = run({**tensors, name: value - delta}, pattern)[0]
            numeric = (plus - minus) / (2 * h)
            devs.append(abs(analytic - numeric) / max(1.0, abs(numeric)))
        worst = max(devs)
        report.blocks.append(BlockCheck(name, worst, len(devs), worst <= tol))
    return report
