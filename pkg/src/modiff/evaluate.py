"""Condition-subset evaluation: sample under {none, seg, sketch, seg+sketch}
conditioning for a set of held-out conditions and measure alignment,
diversity, and distribution quality per row.

Every row reuses the same per-sample noise streams (stream index =
condition * samples_per_condition + sample), so rows differ only in the
conditioning actually applied.
"""
from __future__ import annotations

import numpy as np

from .metrics import alignment_report, diversity_proxy, mmd_quality
from .modulation import ModalityBundle
from .sampler import SampleConfig, sample_batch
from .schedule import VarianceSchedule
from .synthdata import Dataset
from .unet import UNet

CONDITION_SUBSETS = ("none", "seg", "sketch", "seg+sketch")


def restrict_bundle(bundle: ModalityBundle, subset: str) -> ModalityBundle | None:
    """Keep only the modalities named by the subset; 'none' drops the bundle."""
    if subset == "none":
        return None
    if subset not in CONDITION_SUBSETS:
        raise ValueError(f"unknown subset {subset!r}")
    want_seg = "seg" in subset.split("+")
    want_sketch = "sketch" in subset.split("+")
    return ModalityBundle(seg=bundle.seg if want_seg else None,
                          sketch=bundle.sketch if want_sketch else None)


def evaluate(base: UNet, mcm, dataset: Dataset, s: VarianceSchedule, *,
             conditions: int = 200, samples_per_condition: int = 2, seed: int = 0,
             num_steps: int = 200, eta: float = 0.0, kind: str = "ddim",
             apply_threshold: bool = True, batch: int = 50,
             subsets=CONDITION_SUBSETS, progress=None) -> dict:
    """Full evaluation report over the condition subsets.

    Returns {"rows": {subset: metrics}, "protocol": {...}}; each row carries
    {miou, accuracy, sketch_distance, diversity, mmd, n} plus per-class IoU.
    """
    if conditions > len(dataset):
        raise ValueError(f"need {conditions} conditions, dataset has {len(dataset)}")
    if conditions < 1 or samples_per_condition < 1:
        raise ValueError("conditions and samples_per_condition must be >= 1")
    K = dataset.num_classes
    examples = dataset.examples[:conditions]
    spc = samples_per_condition
    total = conditions * spc
    real_images = np.stack([ex.image for ex in examples])

    rows = {}
    for subset in subsets:
        full = [ex.bundle(K) for ex in examples]
        per_cond = [restrict_bundle(b, subset) for b in full]
        gen = np.empty((total, 3, examples[0].image.shape[1],
                        examples[0].image.shape[2]), dtype=np.float32)
        for start in range(0, total, batch):
            stop = min(start + batch, total)
            idxs = range(start, stop)
            bundles = [per_cond[i // spc] for i in idxs]
            cfg = SampleConfig(num_steps=num_steps, eta=eta, kind=kind, seed=seed,
                               count=len(bundles), apply_threshold=apply_threshold)
            out = sample_batch(base, mcm, bundles, cfg, s, num_classes=K,
                               sample_indices=idxs)
            gen[start:stop] = out.data
            if progress is not None:
                progress({"subset": subset, "done": stop, "total": total})
        gt_segs = [examples[i // spc].seg for i in range(total)]
        gt_sketches = [examples[i // spc].sketch for i in range(total)]
        rep = alignment_report(gen, gt_segs, gt_sketches, K)
        per_cond_div = [diversity_proxy(gen[c * spc:(c + 1) * spc])
                        for c in range(conditions)] if spc >= 2 else []
        row = rep.to_dict()
        row["diversity"] = float(np.mean(per_cond_div)) if per_cond_div else float("nan")
        row["mmd"] = mmd_quality(gen, real_images)
        rows[subset] = row
    return {
        "rows": rows,
        "protocol": {"conditions": conditions,
                     "samples_per_condition": spc, "seed": seed,
                     "num_steps": num_steps, "eta": eta, "kind": kind,
                     "apply_threshold": apply_threshold,
                     "num_classes": K, "subsets": list(subsets)},
    }
