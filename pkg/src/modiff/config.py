"""Flat key=value run configuration.

One schema holds every tunable with its default; files and command-line
overrides may only touch known keys, and every run writes a fully resolved
snapshot next to its outputs so results can be reproduced from the snapshot
alone.
"""
from __future__ import annotations

from .modulation import McmTrainConfig
from .sampler import SampleConfig
from .schedule import VarianceSchedule, linear_schedule
from .training import BaseTrainConfig
from .unet import UNetConfig

SCHEMA = {
    "schedule.timesteps": 1000,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.02,
    "data.classes": 6,
    "data.size": 32,
    "data.shapes_min": 1,
    "data.shapes_max": 4,
    "base.channels": 48,
    "base.multipliers": (1, 1, 2, 8),
    "base.res_blocks": 2,
    "base.attn": (16,),
    "base.seed": 0,
    "mcm.channels": 32,
    "mcm.multipliers": (1, 1, 2),
    "mcm.res_blocks": 2,
    "mcm.attn": (16,),
    "mcm.seed": 1,
    "train_base.epochs": 4,
    "train_base.batch_size": 64,
    "train_base.lr": 2e-4,
    "train_base.seed": 0,
    "train_mcm.lambda_x": 1.0,
    "train_mcm.dropout_seg": 0.33,
    "train_mcm.dropout_sketch": 0.33,
    "train_mcm.batch_size": 32,
    "train_mcm.epochs": 12,
    "train_mcm.lr": 2e-4,
    "train_mcm.seed": 0,
    "train_mcm.threshold": True,
    "train_mcm.l1_scale": 1.0,
    "sample.steps": 200,
    "sample.eta": 0.0,
    "sample.kind": "ddim",
    "sample.threshold": True,
    "eval.conditions": 200,
    "eval.samples_per_condition": 2,
    "eval.seed": 0,
    "eval.batch": 50,
}


class ConfigError(ValueError):
    """Unknown key or unparseable value."""


def _parse(key: str, raw: str):
    default = SCHEMA[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


class RunConfig:
    """Resolved configuration: schema defaults, then file, then overrides."""

    def __init__(self, path=None, overrides=()):
        self.values = dict(SCHEMA)
        if path is not None:
            with open(path) as f:
                for ln, line in enumerate(f, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
                    key, raw = line.split("=", 1)
                    self._set(key.strip(), raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            key, raw = item.split("=", 1)
            self._set(key.strip(), raw)

    def _set(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, raw)

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def snapshot_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def write_snapshot(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.snapshot_text())

    # -- builders ----------------------------------------------------------

    def schedule(self) -> VarianceSchedule:
        return linear_schedule(self["schedule.timesteps"],
                               self["schedule.beta_start"],
                               self["schedule.beta_end"])

    def base_unet_config(self) -> UNetConfig:
        return UNetConfig(in_channels=3, out_channels=3,
                          base_channels=self["base.channels"],
                          channel_multipliers=self["base.multipliers"],
                          res_blocks_per_level=self["base.res_blocks"],
                          attention_resolutions=self["base.attn"],
                          out_heads=1, image_size=self["data.size"])

    def mcm_unet_config(self) -> UNetConfig:
        # inputs: x_t (3) + eps_t (3) + seg + sketch channels
        return UNetConfig(in_channels=8, out_channels=3,
                          base_channels=self["mcm.channels"],
                          channel_multipliers=self["mcm.multipliers"],
                          res_blocks_per_level=self["mcm.res_blocks"],
                          attention_resolutions=self["mcm.attn"],
                          out_heads=2, image_size=self["data.size"])

    def base_train_config(self) -> BaseTrainConfig:
        return BaseTrainConfig(epochs=self["train_base.epochs"],
                               batch_size=self["train_base.batch_size"],
                               lr=self["train_base.lr"],
                               seed=self["train_base.seed"])

    def mcm_train_config(self) -> McmTrainConfig:
        return McmTrainConfig(lambda_x=self["train_mcm.lambda_x"],
                              dropout_probs=(self["train_mcm.dropout_seg"],
                                             self["train_mcm.dropout_sketch"]),
                              batch_size=self["train_mcm.batch_size"],
                              epochs=self["train_mcm.epochs"],
                              lr=self["train_mcm.lr"],
                              seed=self["train_mcm.seed"],
                              apply_threshold=self["train_mcm.threshold"],
                              l1_scale=self["train_mcm.l1_scale"])

    def sample_config(self, **kw) -> SampleConfig:
        base = {"num_steps": self["sample.steps"], "eta": self["sample.eta"],
                "kind": self["sample.kind"],
                "apply_threshold": self["sample.threshold"]}
        base.update(kw)
        return SampleConfig(**base)
