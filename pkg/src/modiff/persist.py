"""Model persistence: network weights, optimizer moments, and run metadata
packed into the named-tensor checkpoint container."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamState
from .schedule import VarianceSchedule, linear_schedule
from .unet import UNet, UNetConfig, build_unet


def schedule_meta(s: VarianceSchedule) -> dict:
    return {"timesteps": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end}


def schedule_from_meta(meta: dict) -> VarianceSchedule:
    sm = meta["schedule"]
    return linear_schedule(sm["timesteps"], sm["beta_start"], sm["beta_end"])


def save_model(path, net: UNet, meta: dict, opt: AdamState | None = None) -> None:
    """Weights (in construction order) plus optional Adam moments.

    meta must carry at least {kind, unet, schedule}; adds init_seed and, when
    opt is given, the step counter needed to restore it.
    """
    meta = dict(meta)
    meta.setdefault("unet", net.cfg.to_dict())
    meta["init_seed"] = net.seed
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, p in net.named_params().items():
        tensors[name] = p.tensor.data
    if opt is not None:
        meta["adam"] = {"step": opt.step, "lr": opt.lr,
                        "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
        for name in sorted(opt.m):
            tensors[f"opt.m.{name}"] = opt.m[name]
        for name in sorted(opt.v):
            tensors[f"opt.v.{name}"] = opt.v[name]
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[UNet, dict, AdamState | None]:
    """Rebuild the network (and optimizer state when present) from a file."""
    tensors, meta = load_checkpoint(path)
    try:
        cfg = UNetConfig.from_dict(meta["unet"])
    except KeyError as e:
        raise CheckpointError(f"metadata missing field: {e}") from e
    net = build_unet(cfg, seed=int(meta.get("init_seed", 0)))
    weights = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    net.load_state(weights)
    opt = None
    if "adam" in meta:
        am = meta["adam"]
        opt = AdamState(lr=am["lr"], beta1=am["beta1"], beta2=am["beta2"],
                        eps=am["eps"], step=am["step"])
        for k, v in tensors.items():
            if k.startswith("opt.m."):
                opt.m[k[len("opt.m."):]] = v.copy()
            elif k.startswith("opt.v."):
                opt.v[k[len("opt.v."):]] = v.copy()
    return net, meta, opt
