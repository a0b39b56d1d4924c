"""Noise-prediction modulation: conditioning channels, the gain/bias rule,
its training objective, and the training loop against a frozen denoiser.

The trainable network never touches the base model's weights. It sees the
current noisy image, the base model's noise prediction, and the conditioning
channels, and emits a (gamma, nu) pair applied as eps * (1 + gamma) + nu.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .optim import AdamState, adam_step
from .schedule import VarianceSchedule, forward_noise, predict_x0, static_threshold
from .tensor import (NonFiniteError, ShapeError, Tensor, add, concat, mul,
                     no_grad, sub, tabs, tmean, tsum)
from .unet import UNet, base_predict, mcm_predict

MODALITY_ORDER = ("seg", "sketch")
ABSENT_FILL = -1.0
# Anything below this after encoding must be an absent-modality fill value;
# real channels live in [0, 1].
PRESENCE_THRESHOLD = -0.5


def seg_channel_from_ids(ids: np.ndarray, num_classes: int) -> np.ndarray:
    """Map integer class ids (H, W) to a (1, H, W) float channel in [0, 1]."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"class-id map must be (H, W), got {ids.shape}")
    if ids.min() < 0 or ids.max() >= num_classes:
        raise ValueError(f"class ids outside [0, {num_classes - 1}]")
    chan = ids.astype(np.float32) / np.float32(num_classes - 1)
    return chan[None, :, :]


@dataclass
class ModalityBundle:
    """Per-example conditioning: optional seg channel and sketch channel.

    seg is (1, H, W) with values k/(K-1) for class ids k; sketch is (1, H, W)
    in [0, 1]. A None field means the modality is absent and will be encoded
    as a constant -1 channel.
    """

    seg: np.ndarray | None = None
    sketch: np.ndarray | None = None

    def __post_init__(self):
        for name in MODALITY_ORDER:
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float32)
            if arr.ndim != 3 or arr.shape[0] != 1:
                raise ShapeError(f"{name} channel must be (1, H, W), got {arr.shape}")
            setattr(self, name, arr)

    @property
    def has_seg(self) -> bool:
        return self.seg is not None

    @property
    def has_sketch(self) -> bool:
        return self.sketch is not None

    @property
    def present(self) -> tuple[bool, ...]:
        return tuple(getattr(self, n) is not None for n in MODALITY_ORDER)

    @property
    def empty(self) -> bool:
        return not any(self.present)


def _encode_channels(bundle: ModalityBundle, H: int, W: int, K: int) -> np.ndarray:
    out = np.full((len(MODALITY_ORDER), H, W), ABSENT_FILL, dtype=np.float32)
    for i, name in enumerate(MODALITY_ORDER):
        arr = getattr(bundle, name)
        if arr is None:
            continue
        if arr.shape != (1, H, W):
            raise ShapeError(f"{name} channel is {arr.shape}, expected (1, {H}, {W})")
        if name == "seg":
            scaled = arr * (K - 1)
            if not np.allclose(scaled, np.round(scaled), atol=1e-4) or \
                    arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"seg values must lie on k/{K - 1} for k in 0..{K - 1}")
        else:
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("sketch values must lie in [0, 1]")
        out[i] = arr[0]
    return out


def encode_bundle(bundle: ModalityBundle, H: int, W: int, K: int) -> Tensor:
    """Stack modality channels for one example; absent ones filled with -1."""
    return Tensor(_encode_channels(bundle, H, W, K))


def encode_bundles(bundles, H: int, W: int, K: int) -> Tensor:
    """Batch version: (b, num_modalities, H, W)."""
    return Tensor(np.stack([_encode_channels(b, H, W, K) for b in bundles]))


def decode_presence(encoded: np.ndarray) -> tuple[bool, ...]:
    """Recover presence flags from encoded channels (absent = all -1)."""
    enc = np.asarray(encoded)
    if enc.ndim != 3 or enc.shape[0] != len(MODALITY_ORDER):
        raise ShapeError(f"expected ({len(MODALITY_ORDER)}, H, W), got {enc.shape}")
    return tuple(bool(enc[i].max() > PRESENCE_THRESHOLD) for i in range(enc.shape[0]))


def apply_dropout(bundle: ModalityBundle, probs, rng: np.random.Generator) -> ModalityBundle:
    """Independently mark each present modality absent with probability p_i.

    One uniform draw is consumed per modality regardless of presence, so the
    rng stream does not depend on which modalities happen to be present.
    """
    probs = tuple(float(p) for p in probs)
    if len(probs) != len(MODALITY_ORDER):
        raise ValueError(f"need {len(MODALITY_ORDER)} dropout probs, got {len(probs)}")
    if any(p < 0.0 or p > 1.0 for p in probs):
        raise ValueError(f"dropout probs outside [0, 1]: {probs}")
    kept = {}
    for name, p in zip(MODALITY_ORDER, probs):
        drop = rng.random() < p
        arr = getattr(bundle, name)
        kept[name] = None if (drop or arr is None) else arr
    return ModalityBundle(**kept)


@dataclass
class ModulationParams:
    """Spatial gain/bias pair, same shape as the noise prediction."""

    gamma: Tensor
    nu: Tensor

    def __post_init__(self):
        if self.gamma.shape != self.nu.shape:
            raise ShapeError(f"gamma {self.gamma.shape} vs nu {self.nu.shape}")


def modulate(eps_t: Tensor, m: ModulationParams) -> Tensor:
    """eps * (1 + gamma) + nu, elementwise."""
    if m.gamma.shape != eps_t.shape:
        raise ShapeError(f"modulation {m.gamma.shape} vs eps {eps_t.shape}")
    return add(mul(eps_t, add(m.gamma, 1.0)), m.nu)


@dataclass
class McmTrainConfig:
    lambda_x: float = 1.0
    dropout_probs: tuple = (0.33, 0.33)
    batch_size: int = 32
    epochs: int = 12
    lr: float = 2e-4
    seed: int = 0
    apply_threshold: bool = True
    l1_scale: float = 1.0  # 0 disables the L1 term (ablation)

    def __post_init__(self):
        if self.lambda_x <= 0:
            raise ValueError(f"lambda_x must be positive, got {self.lambda_x}")
        if any(p < 0.0 or p > 1.0 for p in self.dropout_probs):
            raise ValueError(f"dropout probs outside [0, 1]: {self.dropout_probs}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0, lr > 0 required")
        if self.l1_scale < 0:
            raise ValueError(f"l1_scale must be >= 0, got {self.l1_scale}")

    @staticmethod
    def lambda_1(eps_shape) -> float:
        """Per-batch L1 weight: 1 / (b * h * w * c)."""
        return 1.0 / float(np.prod(eps_shape))

    def to_dict(self) -> dict:
        return {"lambda_x": self.lambda_x, "dropout_probs": list(self.dropout_probs),
                "batch_size": self.batch_size, "epochs": self.epochs, "lr": self.lr,
                "seed": self.seed, "apply_threshold": self.apply_threshold,
                "l1_scale": self.l1_scale}

    @staticmethod
    def from_dict(d: dict) -> "McmTrainConfig":
        d = dict(d)
        d["dropout_probs"] = tuple(d.get("dropout_probs", (0.33, 0.33)))
        return McmTrainConfig(**d)


def mcm_loss(x0: Tensor, x_t: Tensor, eps_t: Tensor, m: ModulationParams,
             t, s: VarianceSchedule, cfg: McmTrainConfig) -> Tensor:
    """Denoised-image reconstruction MSE plus L1 shrinkage on (gamma, nu).

    eps_t and x_t must be detached: gradients reach the modulation network
    only through gamma and nu.
    """
    if x_t.requires_grad or eps_t.requires_grad:
        raise ValueError("x_t and eps_t must be detached before the loss")
    eps_mod = modulate(eps_t, m)
    x0_hat = predict_x0(x_t, eps_mod, t, s)
    if cfg.apply_threshold:
        x0_hat = static_threshold(x0_hat)
    diff = sub(x0_hat, x0)
    mse = tmean(mul(diff, diff))
    lam1 = cfg.lambda_1(m.gamma.shape) * cfg.l1_scale
    l1 = add(tsum(tabs(m.gamma)), tsum(tabs(m.nu)))
    return add(mul(mse, float(cfg.lambda_x)), mul(l1, lam1))


@dataclass
class McmTrainState:
    """Everything needed to continue training bit-exactly: optimizer moments,
    rng stream position, and the epoch counter."""

    adam: AdamState
    rng_state: dict
    epochs_done: int = 0
    log: list = field(default_factory=list)


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for k in range(0, n, batch_size):
        yield order[k:k + batch_size]


def train_mcm(base: UNet, mcm: UNet, dataset, cfg: McmTrainConfig,
              s: VarianceSchedule, num_classes: int,
              resume: McmTrainState | None = None,
              progress=None) -> McmTrainState:
    """Fit the modulation network against a frozen base denoiser.

    dataset is a sequence of (x0, bundle) pairs with x0 a (C, H, W) float32
    array in [-1, 1]. Returns the final training state; pass it back as
    `resume` to continue a run exactly where it stopped (the rng stream and
    Adam moments are part of the state). mcm is updated in place; base is
    never touched.
    """
    if not base.frozen:
        raise ValueError("base model must be frozen before training starts")
    if mcm.cfg.out_heads != 2:
        raise ValueError("modulation network needs out_heads=2")
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    x0_sample = dataset[0][0]
    C, H, W = x0_sample.shape

    if resume is None:
        state = McmTrainState(adam=AdamState(lr=cfg.lr),
                              rng_state=np.random.default_rng(cfg.seed).bit_generator.state)
    else:
        state = resume
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state

    params = mcm.params()
    for epoch in range(state.epochs_done, cfg.epochs):
        t_start = time.monotonic()
        tot_loss = tot_gamma = tot_nu = 0.0
        steps = 0
        for idx in _batch_indices(n, cfg.batch_size, rng):
            b = len(idx)
            x0 = Tensor(np.stack([np.asarray(dataset[i][0], dtype=np.float32) for i in idx]))
            t = rng.integers(1, s.T + 1, size=b)
            eps = Tensor(rng.standard_normal((b, C, H, W)).astype(np.float32))
            x_t = forward_noise(x0, t, eps, s)
            with no_grad():
                eps_t = base_predict(base, x_t, t)
            bundles = [apply_dropout(dataset[i][1], cfg.dropout_probs, rng) for i in idx]
            cond = encode_bundles(bundles, H, W, num_classes)
            stacked = concat([x_t, eps_t, cond], axis=1)
            gamma, nu = mcm_predict(mcm, stacked, t)
            m = ModulationParams(gamma, nu)
            try:
                loss = mcm_loss(x0, x_t, eps_t, m, t, s, cfg)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch + 1} step {steps + 1}: {e}") from e
            tot_gamma += float(np.mean(np.abs(gamma.data)))
            tot_nu += float(np.mean(np.abs(nu.data)))
            loss_val = float(loss.data)
            loss.backward()
            adam_step(state.adam, params)
            tot_loss += loss_val
            steps += 1
        rec = {"epoch": epoch + 1, "loss": tot_loss / steps,
               "mean_abs_gamma": tot_gamma / steps, "mean_abs_nu": tot_nu / steps,
               "seconds": time.monotonic() - t_start}
        state.log.append(rec)
        if progress is not None:
            progress(rec)
        state.epochs_done = epoch + 1
        state.rng_state = rng.bit_generator.state
    return state
