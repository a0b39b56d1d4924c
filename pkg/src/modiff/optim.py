"""Adam optimizer over named parameters, with serializable state."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


class MissingGradError(RuntimeError):
    """A trainable parameter reached the optimizer without a gradient."""


@dataclass
class AdamState:
    """First/second-moment buffers keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Parameter]) -> None:
    """One update; frozen params are skipped, grads cleared afterwards.

    Raises MissingGradError if a non-frozen parameter has no gradient:
    silently skipping one would hide a detached subgraph.
    """
    live = [p for p in params if not p.frozen]
    for p in live:
        if p.tensor.grad is None:
            raise MissingGradError(f"parameter {p.name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for p in live:
        g = p.tensor.grad
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.tensor.data)
            v = np.zeros_like(p.tensor.data)
            state.m[p.name] = m
            state.v[p.name] = v
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bias1
        vhat = v / bias2
        p.tensor.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(np.float32)
        p.tensor.grad = None


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None
