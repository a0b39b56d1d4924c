"""Reverse-process sampling: deterministic-capable DDIM, ancestral DDPM, and
the modulated variants that rewrite the noise prediction at every step.

Each sample in a batch owns an rng stream seeded as (seed + sample index), so
results are independent of how samples are grouped into batches.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .modulation import ModalityBundle, ModulationParams, encode_bundles, modulate
from .schedule import VarianceSchedule, predict_x0, static_threshold
from .tensor import (NonFiniteError, ShapeError, Tensor, add, concat, mul,
                     no_grad)
from .unet import UNet, base_predict, mcm_predict


@dataclass
class SampleConfig:
    num_steps: int = 200
    eta: float = 0.0
    kind: str = "ddim"
    seed: int = 0
    count: int = 1
    apply_threshold: bool = True
    bypass_empty: bool = True

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"sampler kind must be 'ddim' or 'ddpm', got {self.kind!r}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.num_steps < 1 or self.count < 1:
            raise ValueError("num_steps and count must be >= 1")

    def to_dict(self) -> dict:
        return {"num_steps": self.num_steps, "eta": self.eta, "kind": self.kind,
                "seed": self.seed, "count": self.count,
                "apply_threshold": self.apply_threshold,
                "bypass_empty": self.bypass_empty}


class SampleStreams:
    """Per-sample noise streams; drawing a batch stacks one row per stream.

    Duck-types the one Generator method the step functions use, so a batch of
    independent streams can stand in for a single rng.
    """

    def __init__(self, seed: int, indices) -> None:
        self.gens = [np.random.default_rng(seed + int(i)) for i in indices]

    def standard_normal(self, shape):
        if shape[0] != len(self.gens):
            raise ShapeError(f"batch {shape[0]} != {len(self.gens)} streams")
        return np.stack([g.standard_normal(shape[1:]) for g in self.gens])


def step_indices(T: int, num_steps: int) -> np.ndarray:
    """num_steps uniformly spaced timesteps from T down to 1, inclusive."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    ts = np.round(np.linspace(T, 1, num_steps)).astype(np.int64)
    if num_steps > 1 and not np.all(np.diff(ts) < 0):
        raise ValueError("step subset not strictly decreasing")
    return ts


def sigma_t(s: VarianceSchedule, t: int, t_prev: int, eta: float) -> np.float32:
    """Per-step noise scale: eta * sqrt((1-abar_prev)/(1-abar_t)) * sqrt(1 - abar_t/abar_prev)."""
    if not t_prev < t:
        raise ValueError(f"need t_prev < t, got {t_prev} >= {t}")
    if eta == 0.0:
        return np.float32(0.0)
    a_t = float(s.abar(t))
    a_prev = float(s.abar(t_prev))
    val = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev)
    return np.float32(val)


def ddim_step(x_t: Tensor, eps_t: Tensor, t: int, t_prev: int, s: VarianceSchedule,
              eta: float, rng, apply_threshold: bool = True) -> Tensor:
    """One reverse step x_t -> x_{t_prev}; deterministic when eta = 0.

    Recombines sqrt(abar_prev) * x0' + sqrt(1 - abar_prev - sigma^2) * eps_t
    plus sigma * fresh noise. No randomness is consumed when sigma = 0.
    """
    if x_t.shape != eps_t.shape:
        raise ShapeError(f"x_t {x_t.shape} vs eps {eps_t.shape}")
    x0_hat = predict_x0(x_t, eps_t, t, s)
    if apply_threshold:
        x0_hat = static_threshold(x0_hat)
    sig = float(sigma_t(s, t, t_prev, eta))
    a_prev = float(s.abar(t_prev))
    radicand = 1.0 - a_prev - sig * sig
    if radicand < 0.0:
        warnings.warn(f"clamping negative direction radicand {radicand:.3e} at t={t}")
        radicand = 0.0
    out = add(mul(x0_hat, np.float32(np.sqrt(a_prev))),
              mul(eps_t, np.float32(np.sqrt(radicand))))
    if sig > 0.0:
        noise = rng.standard_normal(x_t.shape).astype(np.float32)
        out = add(out, Tensor(noise * np.float32(sig)))
    return out


def ddpm_step(x_t: Tensor, eps_t: Tensor, t: int, s: VarianceSchedule, rng) -> Tensor:
    """One ancestral step using the posterior mean and variance; no noise at t = 1."""
    if x_t.shape != eps_t.shape:
        raise ShapeError(f"x_t {x_t.shape} vs eps {eps_t.shape}")
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    beta = float(s.beta[t - 1])
    alpha = float(s.alpha[t - 1])
    a_t = float(s.abar(t))
    a_prev = float(s.abar(t - 1))
    coef = np.float32(beta / np.sqrt(1.0 - a_t))
    mean = mul(add(x_t, mul(eps_t, -coef)), np.float32(1.0 / np.sqrt(alpha)))
    if t == 1:
        return mean
    var = beta * (1.0 - a_prev) / (1.0 - a_t)
    noise = rng.standard_normal(x_t.shape).astype(np.float32)
    return add(mean, Tensor(noise * np.float32(np.sqrt(var))))


def _mcm_active(mcm, bundles, bypass_empty: bool) -> bool:
    if mcm is None:
        return False
    if bundles is None or all(b is None or b.empty for b in bundles):
        if bypass_empty:
            return False
        if bundles is None:
            raise ValueError("mcm provided without a bundle and bypass disabled")
    return True


def sample_batch(base: UNet, mcm, bundles, cfg: SampleConfig, s: VarianceSchedule,
                 num_classes: int = 6, sample_indices=None) -> Tensor:
    """Draw len(bundles) samples, one conditioning bundle per sample.

    bundles may be None (pure base sampling) or a list whose entries are
    ModalityBundle or None. sample_indices picks each sample's noise stream
    (default 0..b-1); stream i is seeded with cfg.seed + i, so a batch split
    across calls reproduces the single-call result.
    """
    ccfg = base.cfg
    C, H, W = ccfg.out_channels, ccfg.image_size, ccfg.image_size
    b = cfg.count if bundles is None else len(bundles)
    if sample_indices is None:
        sample_indices = range(b)
    streams = SampleStreams(cfg.seed, sample_indices)
    if cfg.kind == "ddpm" and cfg.num_steps != s.T:
        raise ValueError(f"ddpm requires num_steps == T ({s.T}), got {cfg.num_steps}")

    active = _mcm_active(mcm, bundles, cfg.bypass_empty)
    cond = None
    if active:
        filled = [bd if bd is not None else ModalityBundle() for bd in bundles]
        cond = encode_bundles(filled, H, W, num_classes)

    ts = step_indices(s.T, cfg.num_steps)
    with no_grad():
        x = Tensor(streams.standard_normal((b, C, H, W)).astype(np.float32))
        for k, t in enumerate(ts):
            t = int(t)
            t_prev = int(ts[k + 1]) if k + 1 < len(ts) else 0
            try:
                eps = base_predict(base, x, t)
                if active:
                    gamma, nu = mcm_predict(mcm, concat([x, eps, cond], axis=1), t)
                    eps = modulate(eps, ModulationParams(gamma, nu))
                if cfg.kind == "ddim":
                    x = ddim_step(x, eps, t, t_prev, s, cfg.eta, streams,
                                  apply_threshold=cfg.apply_threshold)
                else:
                    x = ddpm_step(x, eps, t, s, streams)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"non-finite value at step {k + 1}/{len(ts)} (t={t}): {e}") from e
    return x


def sample(base: UNet, mcm, bundle, cfg: SampleConfig, s: VarianceSchedule,
           num_classes: int = 6) -> Tensor:
    """cfg.count samples sharing one conditioning bundle (or none)."""
    bundles = None if bundle is None else [bundle] * cfg.count
    return sample_batch(base, mcm, bundles, cfg, s, num_classes=num_classes)


def modulation_profile(base: UNet, mcm: UNet, bundle, cfg: SampleConfig,
                       s: VarianceSchedule, num_classes: int = 6):
    """Modulated trajectory with a per-step diagnostic trace.

    Returns (final images, records); each record holds the step's t, the mean
    absolute gamma and nu, and first-sample snapshots of the denoised-image
    prediction before and after modulation.
    """
    if mcm is None or bundle is None:
        raise ValueError("profile needs both an mcm and a bundle")
    ccfg = base.cfg
    C, H, W = ccfg.out_channels, ccfg.image_size, ccfg.image_size
    b = cfg.count
    streams = SampleStreams(cfg.seed, range(b))
    if cfg.kind == "ddpm" and cfg.num_steps != s.T:
        raise ValueError(f"ddpm requires num_steps == T ({s.T}), got {cfg.num_steps}")
    cond = encode_bundles([bundle] * b, H, W, num_classes)
    ts = step_indices(s.T, cfg.num_steps)
    records = []
    with no_grad():
        x = Tensor(streams.standard_normal((b, C, H, W)).astype(np.float32))
        for k, t in enumerate(ts):
            t = int(t)
            t_prev = int(ts[k + 1]) if k + 1 < len(ts) else 0
            try:
                eps = base_predict(base, x, t)
                gamma, nu = mcm_predict(mcm, concat([x, eps, cond], axis=1), t)
                eps_mod = modulate(eps, ModulationParams(gamma, nu))
                x0_base = static_threshold(predict_x0(x, eps, t, s))
                x0_mod = static_threshold(predict_x0(x, eps_mod, t, s))
                records.append({
                    "step": k, "t": t,
                    "mean_abs_gamma": float(np.mean(np.abs(gamma.data))),
                    "mean_abs_nu": float(np.mean(np.abs(nu.data))),
                    "x0_base": x0_base.data[0].copy(),
                    "x0_mod": x0_mod.data[0].copy(),
                })
                if cfg.kind == "ddim":
                    x = ddim_step(x, eps_mod, t, t_prev, s, cfg.eta, streams,
                                  apply_threshold=cfg.apply_threshold)
                else:
                    x = ddpm_step(x, eps_mod, t, s, streams)
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"non-finite value at step {k + 1}/{len(ts)} (t={t}): {e}") from e
    return x, records
