"""Procedural scenes with exact ground truth: flat-colored shapes on a flat
background, the per-pixel class map from the same rasterization, and a
deterministic edge sketch. Serialization to PNG + JSON-lines and back.

Flat class colors (small per-shape brightness jitter aside) let segmentation
of generated images be recovered by nearest-palette-color matching, so no
learned evaluator is needed.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .modulation import ModalityBundle, seg_channel_from_ids
from .tensor import ShapeError

SHAPE_KINDS = ("circle", "rectangle", "triangle")
SKETCH_THRESHOLD = 0.2
COLOR_JITTER = 0.05


def palette(num_classes: int) -> np.ndarray:
    """(K, 3) class colors in [-1, 1], greedily max-separated in RGB.

    Deterministic farthest-point selection over a 3x3x3 lattice. The minimum
    pairwise distance is sqrt(5) for K <= 5, sqrt(2) for K <= 9, and 1.0 up to
    the lattice's 27 points -- always far above the +-0.05 brightness jitter,
    so nearest-color class decoding stays exact on clean renders.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if num_classes > 27:
        raise ValueError(f"palette supports at most 27 classes, got {num_classes}")
    grid = np.array([(r, g, b) for r in (-1.0, 0.0, 1.0)
                     for g in (-1.0, 0.0, 1.0) for b in (-1.0, 0.0, 1.0)],
                    dtype=np.float32)
    chosen = [0]  # (-1, -1, -1)
    d2 = np.sum((grid - grid[0]) ** 2, axis=1)
    while len(chosen) < num_classes:
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((grid - grid[nxt]) ** 2, axis=1))
    return grid[chosen]


@dataclass
class Shape:
    kind: str
    class_id: int
    center: tuple  # (row, col), pixels
    size: tuple    # (half-height, half-width); circles/triangles use the first
    z: int
    jitter: float  # brightness offset added to the class color

    def mask(self, H: int, W: int) -> np.ndarray:
        rr, cc = np.mgrid[0:H, 0:W]
        cy, cx = self.center
        sy, sx = self.size
        if self.kind == "circle":
            return (rr - cy) ** 2 + (cc - cx) ** 2 <= sy ** 2
        if self.kind == "rectangle":
            return (np.abs(rr - cy) <= sy) & (np.abs(cc - cx) <= sx)
        if self.kind == "triangle":
            # isoceles, apex up: rows cy-sy..cy+sy, width growing linearly
            frac = (rr - (cy - sy)) / (2.0 * sy)
            inside_rows = (frac >= 0.0) & (frac <= 1.0)
            return inside_rows & (np.abs(cc - cx) <= frac * sy)
        raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass
class SceneSpec:
    size: int
    num_classes: int
    background_class: int
    shapes: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.background_class < self.num_classes:
            raise ValueError("background class out of range")
        for sh in self.shapes:
            if not 0 <= sh.class_id < self.num_classes:
                raise ValueError(f"shape class {sh.class_id} out of range")


@dataclass
class PairedExample:
    """One dataset item: image in [-1, 1], exact class map, edge sketch."""

    image: np.ndarray   # (3, H, W) f32
    seg: np.ndarray     # (H, W) uint8 class ids
    sketch: np.ndarray  # (H, W) f32 in [0, 1]
    seed: int = 0

    def bundle(self, num_classes: int) -> ModalityBundle:
        return ModalityBundle(seg=seg_channel_from_ids(self.seg, num_classes),
                              sketch=self.sketch[None, :, :])


def generate_scene(rng: np.random.Generator, num_classes: int = 6,
                   shape_count_range: tuple = (1, 4), size: int = 32) -> SceneSpec:
    """Random scene with shapes fully inside the canvas."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    lo, hi = shape_count_range
    if not 0 <= lo <= hi:
        raise ValueError(f"bad shape count range {shape_count_range}")
    bg = int(rng.integers(0, num_classes))
    n = int(rng.integers(lo, hi + 1))
    shapes = []
    for z in range(n):
        kind = SHAPE_KINDS[rng.integers(0, len(SHAPE_KINDS))]
        cid = int(rng.integers(0, num_classes))
        sy = float(rng.uniform(0.10, 0.28) * size)
        sx = float(rng.uniform(0.10, 0.28) * size) if kind == "rectangle" else sy
        cy = float(rng.uniform(sy, size - 1 - sy))
        cx = float(rng.uniform(sx, size - 1 - sx))
        jit = float(rng.uniform(-COLOR_JITTER, COLOR_JITTER))
        shapes.append(Shape(kind, cid, (cy, cx), (sy, sx), z, jit))
    return SceneSpec(size=size, num_classes=num_classes, background_class=bg,
                     shapes=shapes)


def _sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    p = np.pad(gray, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[1:-1, :-2] - p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
          - p[:-2, :-2] - 2 * p[:-2, 1:-1] - p[:-2, 2:])
    return np.sqrt(gx * gx + gy * gy)


def _box3(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, 1, mode="constant")
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + x.shape[0], dx:dx + x.shape[1]]
    return out / 9.0


def sketch_from_image(image: np.ndarray) -> np.ndarray:
    """Edge channel: Sobel magnitude of the grayscale image, binarized at
    0.2, then softened with a 3x3 box blur. Values in [0, 1]."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {img.shape}")
    gray = (img.mean(axis=0) + 1.0) * 0.5
    edges = (_sobel_magnitude(gray) > SKETCH_THRESHOLD).astype(np.float32)
    return _box3(edges).astype(np.float32)


def render(spec: SceneSpec) -> PairedExample:
    """Painter's-order rasterization; seg comes from the same masks."""
    H = W = spec.size
    pal = palette(spec.num_classes)
    image = np.empty((3, H, W), dtype=np.float32)
    image[:] = pal[spec.background_class][:, None, None]
    seg = np.full((H, W), spec.background_class, dtype=np.uint8)
    for sh in sorted(spec.shapes, key=lambda s: s.z):
        m = sh.mask(H, W)
        color = np.clip(pal[sh.class_id] + sh.jitter, -1.0, 1.0).astype(np.float32)
        image[:, m] = color[:, None]
        seg[m] = sh.class_id
    return PairedExample(image=image, seg=seg,
                         sketch=sketch_from_image(image), seed=spec.seed)


def generate_examples(count: int, num_classes: int = 6, size: int = 32,
                      seed: int = 0, shape_count_range: tuple = (1, 4)) -> list:
    """count rendered examples; example i is fully determined by seed + i."""
    out = []
    for i in range(count):
        s = seed + i
        spec = generate_scene(np.random.default_rng(s), num_classes,
                              shape_count_range, size)
        spec.seed = s
        out.append(render(spec))
    return out


class DataError(ValueError):
    """Missing or inconsistent dataset files."""


@dataclass
class Dataset:
    """Loaded examples plus the (image, bundle) view used by training."""

    examples: list
    num_classes: int

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int):
        ex = self.examples[i]
        return ex.image, ex.bundle(self.num_classes)

    @property
    def images(self) -> np.ndarray:
        return np.stack([ex.image for ex in self.examples])


def write_dataset(examples, out_dir, num_classes: int) -> None:
    """PNGs plus a manifest.jsonl with one record per example.

    Images map [-1, 1] -> [0, 255] via round((v + 1) * 127.5); seg stores raw
    class ids; sketches map [0, 1] -> [0, 255].
    """
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, ex in enumerate(examples):
        names = {"image": f"img_{i:05d}.png", "seg": f"seg_{i:05d}.png",
                 "sketch": f"sketch_{i:05d}.png"}
        rgb = np.round((ex.image + 1.0) * 127.5).astype(np.uint8)
        Image.fromarray(rgb.transpose(1, 2, 0), mode="RGB").save(
            os.path.join(out_dir, names["image"]))
        Image.fromarray(ex.seg, mode="L").save(os.path.join(out_dir, names["seg"]))
        sk = np.round(np.clip(ex.sketch, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(sk, mode="L").save(os.path.join(out_dir, names["sketch"]))
        lines.append(json.dumps({**names, "seed": ex.seed,
                                 "num_classes": num_classes}, sort_keys=True))
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as f:
        f.write("\n".join(lines) + "\n")


def read_dataset(in_dir) -> Dataset:
    """Inverse of write_dataset up to 8-bit quantization of image and sketch."""
    manifest = os.path.join(in_dir, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise DataError(f"no manifest.jsonl in {in_dir}")
    examples = []
    num_classes = None
    with open(manifest) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                names = {k: rec[k] for k in ("image", "seg", "sketch")}
                k = int(rec["num_classes"])
                seed_val = int(rec["seed"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"bad manifest record at line {ln}: {e}") from e
            if num_classes is None:
                num_classes = k
            elif num_classes != k:
                raise DataError(f"mixed num_classes in manifest (line {ln})")
            try:
                rgb = np.asarray(Image.open(os.path.join(in_dir, names["image"])))
                seg = np.asarray(Image.open(os.path.join(in_dir, names["seg"])))
                sk = np.asarray(Image.open(os.path.join(in_dir, names["sketch"])))
            except FileNotFoundError as e:
                raise DataError(f"missing file for manifest line {ln}: {e}") from e
            image = (rgb.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)
            examples.append(PairedExample(
                image=image, seg=seg.astype(np.uint8),
                sketch=sk.astype(np.float32) / 255.0, seed=seed_val))
    if not examples:
        raise DataError(f"empty manifest in {in_dir}")
    return Dataset(examples=examples, num_classes=num_classes)
