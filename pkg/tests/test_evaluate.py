"""Condition-subset evaluation harness."""
import numpy as np
import pytest

from modiff.evaluate import CONDITION_SUBSETS, evaluate, restrict_bundle
from modiff.modulation import ModalityBundle
from modiff.schedule import linear_schedule
from modiff.synthdata import Dataset, generate_examples
from modiff.unet import UNetConfig, build_unet

K = 6


def tiny_models():
    base = build_unet(UNetConfig(in_channels=3, out_channels=3, base_channels=8,
                                 channel_multipliers=(1, 2), res_blocks_per_level=1,
                                 attention_resolutions=(8,), out_heads=1,
                                 image_size=16), seed=0)
    base.freeze()
    mcm = build_unet(UNetConfig(in_channels=8, out_channels=3, base_channels=8,
                                channel_multipliers=(1, 2), res_blocks_per_level=1,
                                attention_resolutions=(8,), out_heads=2,
                                image_size=16), seed=1)
    # Perturb so the modulated rows actually diverge from the plain one.
    prng = np.random.default_rng(5)
    for p in mcm.params():
        p.tensor.data += (0.05 * prng.standard_normal(
            p.tensor.data.shape)).astype(np.float32)
    mcm.freeze()
    return base, mcm


def tiny_dataset(n=4):
    return Dataset(examples=generate_examples(n, num_classes=K, size=16, seed=0),
                   num_classes=K)


def test_restrict_bundle_subsets(rng):
    ex = tiny_dataset(1).examples[0]
    b = ex.bundle(K)
    assert restrict_bundle(b, "none") is None
    seg_only = restrict_bundle(b, "seg")
    assert seg_only.has_seg and not seg_only.has_sketch
    sk_only = restrict_bundle(b, "sketch")
    assert not sk_only.has_seg and sk_only.has_sketch
    both = restrict_bundle(b, "seg+sketch")
    assert both.has_seg and both.has_sketch
    np.testing.assert_array_equal(both.seg, b.seg)
    with pytest.raises(ValueError):
        restrict_bundle(b, "audio")


def test_evaluate_report_structure_and_determinism():
    base, mcm = tiny_models()
    ds = tiny_dataset()
    s = linear_schedule(10, 1e-4, 0.02)
    kw = dict(conditions=2, samples_per_condition=2, seed=3, num_steps=4,
              batch=3)  # batch smaller than total exercises stream indexing
    rep = evaluate(base, mcm, ds, s, **kw)
    assert set(rep["rows"]) == set(CONDITION_SUBSETS)
    for row in rep["rows"].values():
        assert row["n"] == 4
        assert np.isfinite(row["miou"])
        assert np.isfinite(row["diversity"])
        assert len(row["per_class_iou"]) == K
    assert rep["protocol"]["conditions"] == 2
    assert rep["protocol"]["subsets"] == list(CONDITION_SUBSETS)
    # Same protocol, same numbers (per-sample streams, eta=0).
    rep2 = evaluate(base, mcm, ds, s, **kw)
    assert rep2["rows"]["seg"]["miou"] == rep["rows"]["seg"]["miou"]
    assert rep2["rows"]["none"]["mmd"] == rep["rows"]["none"]["mmd"]


def test_evaluate_batch_size_does_not_change_results():
    base, mcm = tiny_models()
    ds = tiny_dataset()
    s = linear_schedule(10, 1e-4, 0.02)
    kw = dict(conditions=2, samples_per_condition=2, seed=0, num_steps=4,
              subsets=("none", "seg"))
    a = evaluate(base, mcm, ds, s, batch=1, **kw)
    b = evaluate(base, mcm, ds, s, batch=50, **kw)
    for subset in ("none", "seg"):
        assert a["rows"][subset]["miou"] == b["rows"][subset]["miou"]
        assert a["rows"][subset]["sketch_distance"] == \
            b["rows"][subset]["sketch_distance"]


def test_evaluate_rows_share_noise_streams():
    # The none row with an mcm present must equal pure base sampling
    # (empty bundles bypass modulation), pinning the paired-stream design.
    base, mcm = tiny_models()
    ds = tiny_dataset()
    s = linear_schedule(10, 1e-4, 0.02)
    kw = dict(conditions=2, samples_per_condition=2, seed=1, num_steps=4)
    with_mcm = evaluate(base, mcm, ds, s, subsets=("none",), **kw)
    without = evaluate(base, None, ds, s, subsets=("none",), **kw)
    assert with_mcm["rows"]["none"] == without["rows"]["none"]


def test_evaluate_subset_restriction(capsys):
    base, mcm = tiny_models()
    ds = tiny_dataset()
    s = linear_schedule(10, 1e-4, 0.02)
    seen = []
    rep = evaluate(base, mcm, ds, s, conditions=2, samples_per_condition=2,
                   seed=0, num_steps=4, subsets=("seg",), progress=seen.append)
    assert list(rep["rows"]) == ["seg"]
    assert seen and seen[-1]["done"] == 4
    assert all(r["subset"] == "seg" for r in seen)


def test_evaluate_validates_counts():
    base, mcm = tiny_models()
    ds = tiny_dataset(2)
    s = linear_schedule(10, 1e-4, 0.02)
    with pytest.raises(ValueError, match="conditions"):
        evaluate(base, mcm, ds, s, conditions=5, samples_per_condition=2,
                 num_steps=4)
    with pytest.raises(ValueError):
        evaluate(base, mcm, ds, s, conditions=0, samples_per_condition=2,
                 num_steps=4)
