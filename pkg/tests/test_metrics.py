"""Alignment metrics: nearest-color segmentation, IoU, edge distance,
diversity, and distribution quality."""
import numpy as np
import pytest

from modiff.metrics import (alignment_report, class_iou, derive_seg_from_image,
                            diversity_proxy, edge_map_distance, miou,
                            mmd_quality, pixel_accuracy, sketch_distance)
from modiff.synthdata import SceneSpec, Shape, generate_examples, palette, render
from modiff.tensor import ShapeError

K = 6


# ------------------------------------------------------- seg from image

def test_derive_seg_exact_on_clean_render(rng):
    ex = generate_examples(1, num_classes=K, size=32,
                           seed=int(rng.integers(0, 2**31)))[0]
    pred = derive_seg_from_image(ex.image, palette(K))
    np.testing.assert_array_equal(pred, ex.seg)


def test_derive_seg_constant_for_pure_palette_color():
    pal = palette(K)
    for k in (0, 3, K - 1):
        img = np.broadcast_to(pal[k][:, None, None], (3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(derive_seg_from_image(img, pal),
                                      np.full((8, 8), k))


def test_derive_seg_stable_under_subthreshold_noise(rng):
    # Noise below the nearest-neighbor margin cannot flip any pixel:
    # the worst case is jittered color + noise moving sqrt(3)*(0.05 + a)
    # toward another class, still under half the sqrt(2) minimum gap.
    ex = generate_examples(1, num_classes=K, size=32,
                           seed=int(rng.integers(0, 2**31)))[0]
    noise = rng.uniform(-0.25, 0.25, ex.image.shape).astype(np.float32)
    pred = derive_seg_from_image(ex.image + noise, palette(K))
    np.testing.assert_array_equal(pred, ex.seg)


def test_derive_seg_shape_validation():
    with pytest.raises(ShapeError):
        derive_seg_from_image(np.zeros((1, 8, 8), np.float32), palette(K))


# ----------------------------------------------------------------- IoU

def make_hand_pair():
    pred = np.array([[0, 0], [1, 1]], np.uint8)
    gt = np.array([[0, 1], [1, 1]], np.uint8)
    return pred, gt


def test_class_iou_hand_case():
    pred, gt = make_hand_pair()
    ious = class_iou(pred, gt, 3)
    np.testing.assert_allclose(ious[0], 0.5)        # inter 1, union 2
    np.testing.assert_allclose(ious[1], 2.0 / 3.0)  # inter 2, union 3
    assert np.isnan(ious[2])                        # absent everywhere


def test_miou_hand_case_is_seven_twelfths():
    pred, gt = make_hand_pair()
    np.testing.assert_allclose(miou(pred, gt, 3), 7.0 / 12.0)
    # The absent class does not dilute the mean.
    np.testing.assert_allclose(miou(pred, gt, 6), 7.0 / 12.0)


def test_miou_perfect_and_disjoint():
    a = np.array([[1, 1], [2, 2]], np.uint8)
    assert miou(a, a, 3) == 1.0
    b = np.array([[0, 0], [0, 0]], np.uint8)
    assert miou(a, b, 3) == 0.0


def test_iou_validation():
    pred, gt = make_hand_pair()
    with pytest.raises(ShapeError):
        class_iou(pred, gt[:1], 3)
    with pytest.raises(ValueError):
        class_iou(pred, gt, 1)


def test_pixel_accuracy_hand_case():
    pred, gt = make_hand_pair()
    assert pixel_accuracy(pred, gt) == 0.75
    with pytest.raises(ShapeError):
        pixel_accuracy(pred, gt[:1])


# --------------------------------------------------------- edge distance

def test_edge_distance_hand_case_three_four_five():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[0, 0] = True
    b[3, 4] = True  # 3-4-5 triangle: each side sees distance 5
    assert edge_map_distance(a, b) == pytest.approx(5.0)


def test_edge_distance_asymmetric_sets():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[0, 0] = True
    b[0, 0] = True
    b[0, 3] = True
    # a's pixel sits on b (0); b's pixels see distances 0 and 3 (mean 1.5).
    assert edge_map_distance(a, b) == pytest.approx(0.75)


def test_edge_distance_identical_and_empty_conventions():
    a = np.zeros((6, 8), bool)
    a[2, 3] = True
    assert edge_map_distance(a, a) == 0.0
    empty = np.zeros((6, 8), bool)
    assert edge_map_distance(empty, empty) == 0.0
    assert edge_map_distance(a, empty) == pytest.approx(np.hypot(6, 8))
    assert edge_map_distance(empty, a) == pytest.approx(np.hypot(6, 8))


def test_edge_distance_shape_mismatch():
    with pytest.raises(ShapeError):
        edge_map_distance(np.zeros((4, 4), bool), np.zeros((4, 5), bool))


def test_sketch_distance_zero_against_own_sketch(rng):
    ex = generate_examples(1, num_classes=K, size=32,
                           seed=int(rng.integers(0, 2**31)))[0]
    assert sketch_distance(ex.image, ex.sketch) == 0.0
    # (1, H, W) targets are accepted too.
    assert sketch_distance(ex.image, ex.sketch[None]) == 0.0


def test_sketch_distance_grows_with_displacement():
    near = SceneSpec(size=32, num_classes=K, background_class=0,
                     shapes=[Shape("rectangle", 3, (16.0, 12.0), (5.0, 5.0),
                                   0, 0.0)])
    far = SceneSpec(size=32, num_classes=K, background_class=0,
                    shapes=[Shape("rectangle", 3, (16.0, 20.0), (5.0, 5.0),
                                  0, 0.0)])
    ref = render(SceneSpec(size=32, num_classes=K, background_class=0,
                           shapes=[Shape("rectangle", 3, (16.0, 10.0),
                                         (5.0, 5.0), 0, 0.0)]))
    d_near = sketch_distance(render(near).image, ref.sketch)
    d_far = sketch_distance(render(far).image, ref.sketch)
    assert 0 < d_near < d_far


# -------------------------------------------------------------- diversity

def test_diversity_two_constant_samples():
    a = np.zeros((1, 4, 4), np.float32)
    b = np.full((1, 4, 4), 2.0, np.float32)
    assert diversity_proxy([a, b]) == pytest.approx(4.0)


def test_diversity_three_samples_averages_pairs():
    samples = [np.full((1, 2, 2), v, np.float32) for v in (0.0, 2.0, 4.0)]
    # Pairs: (0,2) -> 4, (0,4) -> 16, (2,4) -> 4; mean 8.
    assert diversity_proxy(samples) == pytest.approx(8.0)


def test_diversity_identical_samples_is_zero(rng):
    x = rng.standard_normal((3, 4, 4)).astype(np.float32)
    assert diversity_proxy(np.stack([x, x, x])) == 0.0


def test_diversity_needs_two_samples():
    with pytest.raises(ValueError):
        diversity_proxy(np.zeros((1, 3, 4, 4)))


# ------------------------------------------------------------------- MMD

def test_mmd_same_distribution_is_small(rng):
    x = rng.standard_normal((16, 3, 16, 16))
    y = rng.standard_normal((16, 3, 16, 16))
    assert abs(mmd_quality(x, y)) < 0.05


def test_mmd_separated_distributions_is_large(rng):
    x = rng.normal(0.0, 0.05, (8, 3, 16, 16))
    y = rng.normal(1.0, 0.05, (8, 3, 16, 16))
    assert mmd_quality(x, y) > 0.5


def test_mmd_identical_sets_bounded_negative(rng):
    # The unbiased estimator's cross term keeps self-pairs, so identical
    # sets land in [-2/n, 0] exactly: (2/n) * (mean offdiag kernel - 1).
    n = 8
    x = rng.standard_normal((n, 3, 16, 16))
    val = mmd_quality(x, x.copy())
    assert -2.0 / n - 1e-9 <= val <= 1e-9


def test_mmd_validation(rng):
    x = rng.standard_normal((4, 3, 16, 16))
    with pytest.raises(ShapeError):
        mmd_quality(x[0], x)
    with pytest.raises(ValueError):
        mmd_quality(x[:1], x)


# ------------------------------------------------------ aggregated report

def test_alignment_report_on_clean_renders(rng):
    seed = int(rng.integers(0, 2**31))
    exs = generate_examples(3, num_classes=K, size=32, seed=seed)
    imgs = np.stack([e.image for e in exs])
    rep = alignment_report(imgs, [e.seg for e in exs],
                           [e.sketch for e in exs], K)
    assert rep.n == 3
    assert rep.miou == pytest.approx(1.0)
    assert rep.accuracy == pytest.approx(1.0)
    assert rep.sketch_distance == pytest.approx(0.0)
    present = set(np.unique(np.stack([e.seg for e in exs])))
    for k in range(K):
        if k in present:
            assert rep.per_class_iou[k] == pytest.approx(1.0)
        else:
            assert np.isnan(rep.per_class_iou[k])
    d = rep.to_dict()
    assert d["n"] == 3 and d["miou"] == pytest.approx(1.0)


def test_alignment_report_count_mismatch(rng):
    exs = generate_examples(2, num_classes=K, size=16, seed=0)
    imgs = np.stack([e.image for e in exs])
    with pytest.raises(ShapeError):
        alignment_report(imgs, [exs[0].seg], [e.sketch for e in exs], K)
