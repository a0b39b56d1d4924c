"""PNG helpers: value mapping, grid layout, and plot emission."""
import numpy as np
import pytest
from PIL import Image

from modiff.tensor import ShapeError, Tensor
from modiff.viz import image_grid, line_plot, paired_strip, save_png, to_uint8


def test_to_uint8_endpoints_and_clipping():
    img = np.zeros((3, 2, 2), np.float32)
    img[:, 0, 0] = -1.0
    img[:, 0, 1] = 1.0
    img[:, 1, 0] = 0.0
    img[:, 1, 1] = 5.0  # clipped to 1
    out = to_uint8(img)
    assert out.shape == (2, 2, 3)
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out[0, 0], [0, 0, 0])
    np.testing.assert_array_equal(out[0, 1], [255, 255, 255])
    np.testing.assert_array_equal(out[1, 0], [128, 128, 128])
    np.testing.assert_array_equal(out[1, 1], [255, 255, 255])


def test_to_uint8_accepts_tensor_and_validates(rng):
    t = Tensor(rng.uniform(-1, 1, (3, 4, 4)).astype(np.float32))
    assert to_uint8(t).shape == (4, 4, 3)
    with pytest.raises(ShapeError):
        to_uint8(np.zeros((1, 4, 4), np.float32))


def test_image_grid_layout(rng):
    imgs = rng.uniform(-1, 1, (5, 3, 8, 8)).astype(np.float32)
    grid = image_grid(imgs, cols=3, sep=2)
    # 2 rows x 3 cols of 8px tiles with 2px gutters.
    assert grid.shape == (2 * 8 + 2, 3 * 8 + 2 * 2, 3)
    np.testing.assert_array_equal(grid[:8, :8], to_uint8(imgs[0]))
    np.testing.assert_array_equal(grid[10:, :8], to_uint8(imgs[3]))
    np.testing.assert_array_equal(grid[10:, 10:18], to_uint8(imgs[4]))
    # The 6th cell is empty padding.
    assert np.all(grid[10:, 20:] == 255)
    with pytest.raises(ValueError):
        image_grid(np.zeros((0, 3, 8, 8), np.float32))


def test_paired_strip_stacks_rows(rng):
    top = [rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32) for _ in range(3)]
    bottom = [rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32) for _ in range(3)]
    strip = paired_strip(top, bottom)
    assert strip.shape == (2 * 8 + 2, 3 * 8 + 2 * 2, 3)
    np.testing.assert_array_equal(strip[:8, :8], to_uint8(top[0]))
    np.testing.assert_array_equal(strip[10:, :8], to_uint8(bottom[0]))
    with pytest.raises(ValueError):
        paired_strip(top, bottom[:2])


def test_line_plot_renders_series():
    img = line_plot({"a": [0, 1, 2, 3], "b": [3, 2, 1, 0]}, size=(200, 120))
    assert img.shape == (120, 200, 3)
    assert img.dtype == np.uint8
    # Both line colors appear somewhere on the canvas.
    flat = img.reshape(-1, 3)
    assert any(np.array_equal(p, (31, 119, 180)) for p in flat)
    assert any(np.array_equal(p, (214, 39, 40)) for p in flat)
    with pytest.raises(ValueError):
        line_plot({})


def test_line_plot_constant_series_does_not_divide_by_zero():
    img = line_plot({"flat": [1.0, 1.0, 1.0]})
    assert img.dtype == np.uint8


def test_save_png_roundtrip(tmp_path, rng):
    rgb = to_uint8(rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32))
    path = tmp_path / "x.png"
    save_png(rgb, path)
    np.testing.assert_array_equal(np.asarray(Image.open(path)), rgb)
    gray = rng.integers(0, 255, (8, 8), dtype=np.uint8)
    save_png(gray, tmp_path / "g.png")
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "g.png")), gray)
