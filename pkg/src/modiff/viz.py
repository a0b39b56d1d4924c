"""PNG emission helpers: sample grids, paired image strips, and small line
plots rendered directly with Pillow (no plotting stack)."""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .tensor import ShapeError, Tensor

SEPARATOR = 2
PLOT_COLORS = ((31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189))


def to_uint8(img) -> np.ndarray:
    """(3, H, W) image in [-1, 1] -> (H, W, 3) uint8."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W), got {arr.shape}")
    out = np.round((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    return out.transpose(1, 2, 0)


def save_png(arr: np.ndarray, path) -> None:
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path)


def image_grid(images, cols: int | None = None, sep: int = SEPARATOR,
               pad_value: int = 255) -> np.ndarray:
    """Row-major uint8 grid with separator gutters between cells."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    n = arr.shape[0]
    if n == 0:
        raise ValueError("no images to grid")
    if cols is None:
        cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    tiles = [to_uint8(arr[i]) for i in range(n)]
    H, W = tiles[0].shape[:2]
    out = np.full((rows * H + (rows - 1) * sep,
                   cols * W + (cols - 1) * sep, 3), pad_value, dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        y, x = r * (H + sep), c * (W + sep)
        out[y:y + H, x:x + W] = tile
    return out


def paired_strip(top, bottom, sep: int = SEPARATOR) -> np.ndarray:
    """Two aligned rows of images (e.g. before/after pairs), column-per-step."""
    if len(top) != len(bottom) or len(top) == 0:
        raise ValueError("need equal nonzero counts for a paired strip")
    both = np.stack(list(top) + list(bottom))
    return image_grid(both, cols=len(top), sep=sep)


def line_plot(series: dict, size=(560, 320), x_label: str = "step") -> np.ndarray:
    """Minimal line chart: each entry is name -> 1-D values over a shared x."""
    if not series:
        raise ValueError("no series to plot")
    W, H = size
    img = Image.new("RGB", (W, H), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    ml, mr, mt, mb = 46, 10, 10, 28
    x0, y0, x1, y1 = ml, mt, W - mr, H - mb
    draw.rectangle([x0, y0, x1, y1], outline=(0, 0, 0))

    all_vals = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    lo = float(np.min(all_vals))
    hi = float(np.max(all_vals))
    if hi <= lo:
        hi = lo + 1.0
    n = max(len(np.asarray(v)) for v in series.values())

    def px(i, total):
        return x0 + (x1 - x0) * (i / max(total - 1, 1))

    def py(v):
        return y1 - (y1 - y0) * ((v - lo) / (hi - lo))

    for ci, (name, vals) in enumerate(series.items()):
        vals = np.asarray(vals, dtype=np.float64)
        color = PLOT_COLORS[ci % len(PLOT_COLORS)]
        pts = [(px(i, len(vals)), py(v)) for i, v in enumerate(vals)]
        if len(pts) == 1:
            draw.ellipse([pts[0][0] - 2, pts[0][1] - 2, pts[0][0] + 2, pts[0][1] + 2],
                         fill=color)
        else:
            draw.line(pts, fill=color, width=1)
        draw.text((x0 + 6, y0 + 4 + 12 * ci), name, fill=color)

    draw.text((2, y0 - 4), f"{hi:.3g}", fill=(0, 0, 0))
    draw.text((2, y1 - 8), f"{lo:.3g}", fill=(0, 0, 0))
    draw.text((x0, y1 + 6), "0", fill=(0, 0, 0))
    draw.text((x1 - 24, y1 + 6), str(n - 1), fill=(0, 0, 0))
    draw.text(((x0 + x1) // 2 - 12, y1 + 6), x_label, fill=(0, 0, 0))
    return np.asarray(img)
