"""Training regularizers for TIPS and the staged total loss.

The failure-mode term is implemented exactly as the closed form
(1 - s^2) * ||tau_row||_2 averaged over channels and layers; note that
this expression is algebraically minimized by one-hot rows (norm 1), not
by uniform ones, so its empirical effect is measured by the ablation
harness rather than assumed. The undo term is a plain MSE between the psi
trunk output and a standard-shifted copy of the layer input, treated as a
constant target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, constant, mul, reduce_mean, reduce_sum, sqrt, square, sub
from .shifts import standard_shift


@dataclass(frozen=True)
class LossSchedule:
    """Stage switch for the undo regularizer: off before ceil(epsilon*N)."""

    alpha: float = 0.35
    epsilon: float = 0.4
    total_epochs: int = 40

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0,1], got {self.alpha}")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError(f"epsilon must lie in [0,1], got {self.epsilon}")
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be nonnegative")

    @property
    def switch_epoch(self):
        return math.ceil(self.epsilon * self.total_epochs)

    def undo_active(self, epoch):
        return epoch >= self.switch_epoch


@dataclass
class LossReport:
    """Scalar parts plus the combined node to run backward on."""

    l_task: float
    l_fm: float | None
    l_undo: float | None
    total: float
    total_node: Node


def loss_fm(taus, strides):
    """(1 - s^2) * per-channel L2 norm of tau, averaged over channels and layers."""
    if len(taus) != len(strides):
        raise ValueError("one stride per tau matrix required")
    if not taus:
        raise ValueError("loss_fm needs at least one tau")
    terms = []
    for tau, s in zip(taus, strides):
        row_norm = sqrt(reduce_sum(square(tau), axis=-1))
        terms.append(mul(reduce_mean(row_norm), float(1 - s * s)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return mul(total, 1.0 / len(terms))


def sample_undo_shifts(rng, n, h, w):
    """Per-sample standard-shift amounts: U(0, h/10) x U(0, w/10), rounded."""
    dh = np.rint(rng.uniform(0.0, h / 10.0, size=n)).astype(np.int64)
    dw = np.rint(rng.uniform(0.0, w / 10.0, size=n)).astype(np.int64)
    return np.stack([dh, dw], axis=1)


def undo_targets(x_value, shifts):
    """Standard-shifted copies of each sample; the constant side of the MSE."""
    x_value = np.asarray(x_value)
    out = np.empty_like(x_value)
    for i, (dh, dw) in enumerate(shifts):
        out[i] = standard_shift(x_value[i], int(dh), int(dw))
    return out


def loss_undo(psi_out, target):
    """Mean squared error against a constant shifted target."""
    target = np.asarray(target)
    if psi_out.value.shape != target.shape:
        raise ValueError(
            f"undo loss shapes differ: psi output {psi_out.value.shape} vs target {target.shape}"
        )
    return reduce_mean(square(sub(psi_out, constant(target, dtype=target.dtype))))


def total_loss(l_task, l_fm, l_undo, sched: LossSchedule, epoch):
    """Combine parts per the staged schedule.

    Before the switch epoch: task + fm (task keeps full weight). From the
    switch epoch on: (1-alpha)*task + alpha*undo + fm.
    """
    active = sched.undo_active(epoch)
    if active and l_undo is None:
        raise ValueError(f"epoch {epoch}: undo term is active but was not supplied")
    if not active and l_undo is not None:
        raise ValueError(f"epoch {epoch}: undo term supplied before its activation epoch")
    if active:
        total = mul(l_task, 1.0 - sched.alpha) + mul(l_undo, sched.alpha)
    else:
        total = l_task
    if l_fm is not None:
        total = total + l_fm
    return LossReport(
        l_task=float(l_task.value),
        l_fm=None if l_fm is None else float(l_fm.value),
        l_undo=None if l_undo is None else float(l_undo.value),
        total=float(total.value),
        total_node=total,
    )
