"""Alignment and quality measurements for generated images.

Segmentation maps of generated images come from nearest-palette-color
assignment (the synthetic palette is flat, so this is exact for clean
renders). Sketch distance is a symmetric distance-transform measure between
binarized edge maps. Diversity and distribution quality are pixel-level
stand-ins for their learned-feature counterparts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .synthdata import palette, sketch_from_image
from .tensor import ShapeError, Tensor

EDGE_BINARIZE = 0.5


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def derive_seg_from_image(img, pal: np.ndarray) -> np.ndarray:
    """Per-pixel argmin of Euclidean RGB distance to the palette colors."""
    arr = _as_array(img).astype(np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {arr.shape}")
    # (K, 3, 1, 1) vs (3, H, W) -> (K, H, W) squared distances
    d2 = np.sum((pal[:, :, None, None] - arr[None]) ** 2, axis=1)
    return np.argmin(d2, axis=0).astype(np.uint8)


def _check_pair(pred, gt, K: int):
    p = _as_array(pred)
    g = _as_array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"seg shapes differ: {p.shape} vs {g.shape}")
    if p.max(initial=0) >= K or g.max(initial=0) >= K:
        raise ValueError(f"class id >= K={K}")
    return p, g


def class_iou(pred, gt, K: int) -> np.ndarray:
    """Per-class IoU over classes present in either map; absent classes NaN."""
    p, g = _check_pair(pred, gt, K)
    out = np.full(K, np.nan)
    for k in range(K):
        pk = p == k
        gk = g == k
        union = np.count_nonzero(pk | gk)
        if union:
            out[k] = np.count_nonzero(pk & gk) / union
    return out


def miou(pred, gt, K: int) -> float:
    """Mean IoU over classes appearing in gt or pred."""
    ious = class_iou(pred, gt, K)
    return float(np.nanmean(ious))


def pixel_accuracy(pred, gt) -> float:
    p = _as_array(pred)
    g = _as_array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"seg shapes differ: {p.shape} vs {g.shape}")
    return float(np.mean(p == g))


def edge_map_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean distance between two binary edge maps, in pixels.

    Each map's edge pixels are scored by the distance transform to the other
    map's nearest edge pixel; the two means are averaged. Equal maps (both
    empty included) give 0; if exactly one map is empty the result is the
    image diagonal.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"edge maps differ: {a.shape} vs {b.shape}")
    na, nb = np.count_nonzero(a), np.count_nonzero(b)
    diag = float(np.hypot(*a.shape))
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return diag
    dist_to_b = distance_transform_edt(~b)
    dist_to_a = distance_transform_edt(~a)
    return 0.5 * (float(dist_to_b[a].mean()) + float(dist_to_a[b].mean()))


def sketch_distance(gen_img, gt_sketch) -> float:
    """Edge distance between a generated image's derived sketch and a target."""
    derived = sketch_from_image(_as_array(gen_img))
    target = _as_array(gt_sketch)
    if target.ndim == 3 and target.shape[0] == 1:
        target = target[0]
    return edge_map_distance(derived >= EDGE_BINARIZE, target >= EDGE_BINARIZE)


def diversity_proxy(samples) -> float:
    """Mean over sample pairs of the mean squared pixel difference."""
    arr = _as_array(samples) if not isinstance(samples, (list, tuple)) \
        else np.stack([_as_array(s) for s in samples])
    n = arr.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    flat = arr.reshape(n, -1).astype(np.float64)
    total = 0.0
    pairs = 0
    for i in range(n):
        d = flat[i + 1:] - flat[i]
        total += float(np.mean(d * d, axis=1).sum())
        pairs += n - 1 - i
    return total / pairs


def _pool8(arr: np.ndarray) -> np.ndarray:
    """Average-pool spatial dims down to at most 8x8, then flatten."""
    n, c, h, w = arr.shape
    bh, bw = max(1, h // 8), max(1, w // 8)
    hh, ww = (h // bh) * bh, (w // bw) * bw
    a = arr[:, :, :hh, :ww].reshape(n, c, hh // bh, bh, ww // bw, bw)
    return a.mean(axis=(3, 5)).reshape(n, -1)


def mmd_quality(generated, real, bandwidth: float | None = None) -> float:
    """Unbiased squared maximum mean discrepancy with an RBF kernel.

    Images are 8x8-average-pooled and flattened; the kernel bandwidth
    defaults to the median pairwise distance over the combined set
    (k(x, y) = exp(-|x-y|^2 / (2 sigma^2))).
    """
    g = _as_array(generated).astype(np.float64)
    r = np.asarray(_as_array(real), dtype=np.float64)
    if g.ndim != 4 or r.ndim != 4:
        raise ShapeError("expected (n, c, h, w) sample sets")
    if g.shape[0] < 2 or r.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    x = _pool8(g)
    y = _pool8(r)
    z = np.concatenate([x, y], axis=0)
    sq = np.sum(z * z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (z @ z.T), 0.0)
    if bandwidth is None:
        off = d2[np.triu_indices_from(d2, k=1)]
        med = float(np.median(np.sqrt(off)))
        bandwidth = med if med > 0 else 1.0
    k = np.exp(-d2 / (2.0 * bandwidth * bandwidth))
    nx, ny = x.shape[0], y.shape[0]
    kxx = k[:nx, :nx]
    kyy = k[nx:, nx:]
    kxy = k[:nx, nx:]
    term_x = (kxx.sum() - np.trace(kxx)) / (nx * (nx - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (ny * (ny - 1))
    return float(term_x + term_y - 2.0 * kxy.mean())


@dataclass
class AlignmentReport:
    """Aggregated alignment numbers for one evaluation row."""

    miou: float
    accuracy: float
    sketch_distance: float
    per_class_iou: list
    n: int

    def to_dict(self) -> dict:
        return {"miou": self.miou, "accuracy": self.accuracy,
                "sketch_distance": self.sketch_distance,
                "per_class_iou": self.per_class_iou, "n": self.n}


def alignment_report(gen_images, gt_segs, gt_sketches, K: int) -> AlignmentReport:
    """Per-sample alignment vs paired ground truth, averaged.

    The scalar miou averages per-sample mIoU values; per_class_iou aggregates
    intersections and unions globally over the whole set.
    """
    imgs = _as_array(gen_images)
    n = imgs.shape[0]
    if not (len(gt_segs) == len(gt_sketches) == n):
        raise ShapeError("sample/ground-truth count mismatch")
    pal = palette(K)
    inter = np.zeros(K, dtype=np.int64)
    union = np.zeros(K, dtype=np.int64)
    mious, accs, sdists = [], [], []
    for i in range(n):
        pred = derive_seg_from_image(imgs[i], pal)
        gt = _as_array(gt_segs[i])
        mious.append(miou(pred, gt, K))
        accs.append(pixel_accuracy(pred, gt))
        sdists.append(sketch_distance(imgs[i], gt_sketches[i]))
        for k in range(K):
            pk = pred == k
            gk = gt == k
            inter[k] += np.count_nonzero(pk & gk)
            union[k] += np.count_nonzero(pk | gk)
    per_class = [float(inter[k] / union[k]) if union[k] else float("nan")
                 for k in range(K)]
    return AlignmentReport(miou=float(np.mean(mious)), accuracy=float(np.mean(accs)),
                           sketch_distance=float(np.mean(sdists)),
                           per_class_iou=per_class, n=n)
