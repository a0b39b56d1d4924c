"""Command-line interface: data generation, training, sampling, evaluation,
and modulation profiling.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure. Every
command writes a resolved-config snapshot next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
from PIL import Image

from . import evaluate as evalmod
from . import viz
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .modulation import (McmTrainState, ModalityBundle, seg_channel_from_ids,
                         train_mcm)
from .persist import load_model, save_model, schedule_from_meta, schedule_meta
from .sampler import SampleConfig, modulation_profile, sample
from .schedule import ScheduleError
from .synthdata import DataError, generate_examples, read_dataset, write_dataset
from .tensor import NonFiniteError, ShapeError
from .training import BaseTrainState, train_base
from .unet import build_unet


def _runconfig(args) -> RunConfig:
    return RunConfig(getattr(args, "config", None), getattr(args, "set", None) or ())


def _snapshot(cfg: RunConfig, target: str) -> None:
    """Write the resolved config next to the command's output."""
    if os.path.isdir(target) or target.endswith(os.sep):
        os.makedirs(target, exist_ok=True)
        path = os.path.join(target, "config.resolved.txt")
    else:
        path = target + ".config.txt"
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)
    cfg.write_snapshot(path)


def _progress_printer(prefix: str):
    def cb(rec: dict):
        parts = " ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in rec.items())
        print(f"{prefix} {parts}", flush=True)
    return cb


# -- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _runconfig(args)
    classes = args.classes if args.classes is not None else cfg["data.classes"]
    size = args.size if args.size is not None else cfg["data.size"]
    shapes = (cfg["data.shapes_min"], cfg["data.shapes_max"])
    examples = generate_examples(args.count, classes, size, args.seed, shapes)
    os.makedirs(args.out, exist_ok=True)
    write_dataset(examples, args.out, classes)
    _snapshot(cfg, args.out)
    print(f"wrote {len(examples)} examples ({3 * len(examples)} PNGs) to {args.out}")
    return 0


def cmd_train_base(args) -> int:
    cfg = _runconfig(args)
    s = cfg.schedule()
    ds = read_dataset(args.data)
    images = ds.images
    tcfg = cfg.base_train_config()
    state = None
    if args.resume and os.path.exists(args.out):
        net, meta, opt = load_model(args.out)
        state = BaseTrainState(adam=opt, rng_state=meta["rng_state"],
                               epochs_done=meta["epochs_done"], log=meta["log"])
        s = schedule_from_meta(meta)
        print(f"resuming from {args.out} at epoch {state.epochs_done}")
    else:
        net = build_unet(cfg.base_unet_config(), seed=cfg["base.seed"])
    print(f"base network: {net.num_params()} parameters, "
          f"{len(images)} training images, {tcfg.epochs} epochs")
    state = train_base(net, images, tcfg, s, resume=state,
                       progress=_progress_printer("train-base"))
    meta = {"kind": "base", "schedule": schedule_meta(s), "train": tcfg.to_dict(),
            "epochs_done": state.epochs_done, "log": state.log,
            "rng_state": state.rng_state, "num_classes": ds.num_classes}
    save_model(args.out, net, meta, opt=state.adam)
    _snapshot(cfg, args.out)
    print(f"saved base checkpoint to {args.out}")
    return 0


def cmd_train_mcm(args) -> int:
    cfg = _runconfig(args)
    base, base_meta, _ = load_model(args.base)
    base.freeze()
    s = schedule_from_meta(base_meta)
    ds = read_dataset(args.data)
    tcfg = cfg.mcm_train_config()
    state = None
    if args.resume and os.path.exists(args.out):
        mcm, meta, opt = load_model(args.out)
        state = McmTrainState(adam=opt, rng_state=meta["rng_state"],
                              epochs_done=meta["epochs_done"], log=meta["log"])
        print(f"resuming from {args.out} at epoch {state.epochs_done}")
    else:
        mcm = build_unet(cfg.mcm_unet_config(), seed=cfg["mcm.seed"])
    ratio = mcm.num_params() / base.num_params()
    print(f"mcm/base parameter ratio: {mcm.num_params()}/{base.num_params()}"
          f" = {ratio:.4f} ({100 * ratio:.2f}%)")
    state = train_mcm(base, mcm, ds, tcfg, s, ds.num_classes, resume=state,
                      progress=_progress_printer("train-mcm"))
    meta = {"kind": "mcm", "schedule": schedule_meta(s), "train": tcfg.to_dict(),
            "epochs_done": state.epochs_done, "log": state.log,
            "rng_state": state.rng_state, "num_classes": ds.num_classes,
            "modalities": ["seg", "sketch"], "base_params": base.num_params(),
            "param_ratio": ratio}
    save_model(args.out, mcm, meta, opt=state.adam)
    _snapshot(cfg, args.out)
    print(f"saved mcm checkpoint to {args.out}")
    return 0


def _load_seg_png(path, num_classes: int) -> np.ndarray:
    ids = np.asarray(Image.open(path))
    if ids.ndim != 2:
        raise DataError(f"seg PNG must be single-channel, got shape {ids.shape}")
    return seg_channel_from_ids(ids, num_classes)


def _load_sketch_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DataError(f"sketch PNG must be single-channel, got shape {arr.shape}")
    return arr.astype(np.float32)[None] / 255.0


def _bundle_from_args(args, num_classes: int) -> ModalityBundle | None:
    seg = _load_seg_png(args.seg, num_classes) if args.seg else None
    sketch = _load_sketch_png(args.sketch) if args.sketch else None
    if seg is None and sketch is None:
        return None
    return ModalityBundle(seg=seg, sketch=sketch)


def cmd_sample(args) -> int:
    cfg = _runconfig(args)
    base, base_meta, _ = load_model(args.base)
    base.freeze()
    s = schedule_from_meta(base_meta)
    mcm = None
    num_classes = int(base_meta.get("num_classes", cfg["data.classes"]))
    if args.mcm:
        mcm, mcm_meta, _ = load_model(args.mcm)
        mcm.freeze()
        num_classes = int(mcm_meta.get("num_classes", num_classes))
    bundle = _bundle_from_args(args, num_classes)
    steps = args.steps if args.steps is not None else cfg["sample.steps"]
    eta = args.eta if args.eta is not None else cfg["sample.eta"]
    kind = args.kind if args.kind is not None else cfg["sample.kind"]
    scfg = SampleConfig(num_steps=steps, eta=eta, kind=kind, seed=args.seed,
                        count=args.n, apply_threshold=cfg["sample.threshold"])
    imgs = sample(base, mcm, bundle, scfg, s, num_classes)
    os.makedirs(args.out, exist_ok=True)
    for i in range(imgs.shape[0]):
        viz.save_png(viz.to_uint8(imgs.data[i]), os.path.join(args.out, f"sample_{i:03d}.png"))
    viz.save_png(viz.image_grid(imgs), os.path.join(args.out, "grid.png"))
    _snapshot(cfg, args.out)
    print(f"wrote {imgs.shape[0]} samples + grid.png to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _runconfig(args)
    subsets = evalmod.CONDITION_SUBSETS if args.subsets is None \
        else tuple(part.strip() for part in args.subsets.split(","))
    for name in subsets:
        if name not in evalmod.CONDITION_SUBSETS:
            raise ConfigError(f"unknown condition subset {name!r}; choose from "
                              f"{', '.join(evalmod.CONDITION_SUBSETS)}")
    base, base_meta, _ = load_model(args.base)
    base.freeze()
    s = schedule_from_meta(base_meta)
    mcm, _, _ = load_model(args.mcm)
    mcm.freeze()
    ds = read_dataset(args.data)
    conditions = args.conditions if args.conditions is not None else cfg["eval.conditions"]
    spc = args.per_condition_samples if args.per_condition_samples is not None \
        else cfg["eval.samples_per_condition"]
    seed = args.seed if args.seed is not None else cfg["eval.seed"]
    report = evalmod.evaluate(
        base, mcm, ds, s, conditions=conditions, samples_per_condition=spc,
        seed=seed, num_steps=cfg["sample.steps"], eta=cfg["sample.eta"],
        kind=cfg["sample.kind"], apply_threshold=cfg["sample.threshold"],
        batch=cfg["eval.batch"], subsets=subsets,
        progress=_progress_printer("eval"))
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    _snapshot(cfg, args.out)
    for name, row in report["rows"].items():
        print(f"{name:>10}: miou={row['miou']:.4f} acc={row['accuracy']:.4f} "
              f"sketch={row['sketch_distance']:.3f} div={row['diversity']:.4f} "
              f"mmd={row['mmd']:.4f} n={row['n']}")
    print(f"wrote report to {args.out}")
    return 0


def cmd_profile(args) -> int:
    cfg = _runconfig(args)
    base, base_meta, _ = load_model(args.base)
    base.freeze()
    s = schedule_from_meta(base_meta)
    mcm, mcm_meta, _ = load_model(args.mcm)
    mcm.freeze()
    num_classes = int(mcm_meta.get("num_classes", cfg["data.classes"]))
    bundle = ModalityBundle(seg=_load_seg_png(args.seg, num_classes),
                            sketch=_load_sketch_png(args.sketch))
    steps = args.steps if args.steps is not None else cfg["sample.steps"]
    scfg = SampleConfig(num_steps=steps, eta=args.eta, kind="ddim", seed=args.seed,
                        count=1, apply_threshold=cfg["sample.threshold"])
    final, records = modulation_profile(base, mcm, bundle, scfg, s, num_classes)
    os.makedirs(args.out, exist_ok=True)

    with open(os.path.join(args.out, "modulation.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "t", "mean_abs_gamma", "mean_abs_nu"])
        for r in records:
            w.writerow([r["step"], r["t"], f"{r['mean_abs_gamma']:.8g}",
                        f"{r['mean_abs_nu']:.8g}"])

    curve = viz.line_plot({"mean|gamma|": [r["mean_abs_gamma"] for r in records],
                           "mean|nu|": [r["mean_abs_nu"] for r in records]})
    viz.save_png(curve, os.path.join(args.out, "modulation_curve.png"))

    keep = np.linspace(0, len(records) - 1, min(16, len(records))).astype(int)
    strip = viz.paired_strip([records[i]["x0_base"] for i in keep],
                             [records[i]["x0_mod"] for i in keep])
    viz.save_png(strip, os.path.join(args.out, "x0_vs_x0mod.png"))
    viz.save_png(viz.to_uint8(final.data[0]), os.path.join(args.out, "final.png"))
    _snapshot(cfg, args.out)
    print(f"wrote modulation profile ({len(records)} steps) to {args.out}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modiff",
                                description="Frozen-denoiser image generation with "
                                            "trainable noise modulation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--classes", type=int, default=None)
    sp.add_argument("--size", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-base", help="train the base noise predictor")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", action="store_true",
                    help="continue from an existing checkpoint at --out")
    common(sp)
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("train-mcm", help="train the modulation network "
                                          "against a frozen base")
    sp.add_argument("--base", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", action="store_true",
                    help="continue from an existing checkpoint at --out")
    common(sp)
    sp.set_defaults(func=cmd_train_mcm)

    sp = sub.add_parser("sample", help="draw samples (optionally conditioned)")
    sp.add_argument("--base", required=True)
    sp.add_argument("--mcm")
    sp.add_argument("--seg", help="segmentation PNG (class ids)")
    sp.add_argument("--sketch", help="sketch PNG (grayscale)")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--eta", type=float, default=None)
    sp.add_argument("--kind", choices=["ddim", "ddpm"], default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="condition-subset evaluation report")
    sp.add_argument("--base", required=True)
    sp.add_argument("--mcm", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-condition-samples", type=int, default=None,
                    dest="per_condition_samples")
    sp.add_argument("--conditions", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--subsets", default=None,
                    help="comma-separated condition subsets to evaluate "
                         "(default: none,seg,sketch,seg+sketch)")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("profile", help="per-step modulation diagnostics")
    sp.add_argument("--base", required=True)
    sp.add_argument("--mcm", required=True)
    sp.add_argument("--seg", required=True)
    sp.add_argument("--sketch", required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--eta", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_profile)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage errors and 0 for --help
        return 0 if e.code in (0, None) else 1
    if getattr(args, "seg", None) or getattr(args, "sketch", None):
        if args.command == "sample" and not args.mcm:
            print("error: --seg/--sketch require --mcm", file=sys.stderr)
            return 1
    try:
        return args.func(args) or 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, ScheduleError, ShapeError, NonFiniteError,
            ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
