"""Base denoiser training: standard noise-prediction regression.

Each step samples per-example timesteps, noises the clean images, and
regresses the network output onto the drawn noise with a mean-squared error.
The state object carries optimizer moments and the rng stream so an
interrupted run can continue bit-exactly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .optim import AdamState, adam_step
from .schedule import VarianceSchedule, forward_noise
from .tensor import NonFiniteError, Tensor, mul, sub, tmean
from .unet import UNet, base_predict


@dataclass
class BaseTrainConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 2e-4
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0, lr > 0 required")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "lr": self.lr, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "BaseTrainConfig":
        return BaseTrainConfig(**d)


@dataclass
class BaseTrainState:
    adam: AdamState
    rng_state: dict
    epochs_done: int = 0
    log: list = field(default_factory=list)


def noise_mse(net: UNet, x0: Tensor, t, eps: Tensor, s: VarianceSchedule) -> Tensor:
    """mean((net(x_t, t) - eps)^2) with x_t from the forward process."""
    x_t = forward_noise(x0, t, eps, s)
    diff = sub(base_predict(net, x_t, t), eps)
    return tmean(mul(diff, diff))


def train_base(net: UNet, images: np.ndarray, cfg: BaseTrainConfig,
               s: VarianceSchedule, resume: BaseTrainState | None = None,
               progress=None) -> BaseTrainState:
    """Fit the noise predictor on (n, C, H, W) images in [-1, 1].

    Returns the final state; pass it back as `resume` to continue. The net is
    updated in place.
    """
    if net.frozen:
        raise ValueError("cannot train a frozen network")
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty image set")
    if resume is None:
        state = BaseTrainState(adam=AdamState(lr=cfg.lr),
                               rng_state=np.random.default_rng(cfg.seed).bit_generator.state)
    else:
        state = resume
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state

    params = net.params()
    for epoch in range(state.epochs_done, cfg.epochs):
        t_start = time.monotonic()
        tot = 0.0
        steps = 0
        order = rng.permutation(n)
        for k in range(0, n, cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            b = len(idx)
            x0 = Tensor(np.ascontiguousarray(images[idx], dtype=np.float32))
            t = rng.integers(1, s.T + 1, size=b)
            eps = Tensor(rng.standard_normal(x0.shape).astype(np.float32))
            try:
                loss = noise_mse(net, x0, t, eps, s)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch + 1} step {steps + 1}: {e}") from e
            loss_val = float(loss.data)
            loss.backward()
            adam_step(state.adam, params)
            tot += loss_val
            steps += 1
            if progress is not None and steps % 25 == 0:
                progress({"epoch": epoch + 1, "step": steps, "loss": loss_val})
        rec = {"epoch": epoch + 1, "loss": tot / steps,
               "seconds": time.monotonic() - t_start}
        state.log.append(rec)
        if progress is not None:
            progress(rec)
        state.epochs_done = epoch + 1
        state.rng_state = rng.bit_generator.state
    return state
