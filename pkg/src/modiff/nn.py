"""Layer kernels and parameters built on the autodiff core.

Convolutions run as one GEMM per kernel offset (9 for a 3x3) instead of a
single giant im2col buffer: peak temporary memory stays at one input-sized
copy, which is what lets batch-64 training fit in RAM on this box.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, make_result


@dataclass
class Parameter:
    """A named leaf tensor; ``frozen`` means the optimizer must skip it."""

    name: str
    tensor: Tensor
    frozen: bool = False

    def freeze(self) -> None:
        self.frozen = True
        self.tensor.requires_grad = False

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow on very negative inputs resolves to the correct limit 0.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); sigmoid recomputed in backward to save memory."""
    xd = x.data
    sig = _sigmoid(xd)

    def grad_fn(g):
        s = _sigmoid(xd)
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return make_result(xd * sig, (x,), grad_fn, "silu")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """(B, K) @ (K, N) + (N,)."""
    from .tensor import add, matmul

    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW; weight (Cout, Cin, kh, kw).

    One GEMM per kernel offset on a cache-sized patch copy; measured faster
    here than a monolithic im2col buffer, and peak temp memory stays at one
    input-sized array.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv2d: input channels {Cin} != weight channels {Cin_w}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.shape}, kernel {kh}x{kw}")
    if b is not None and b.shape != (Cout,):
        raise ShapeError(f"conv2d: bias {b.shape} for {Cout} channels")

    rows = B * Ho * Wo
    he = (Ho - 1) * stride + 1
    we = (Wo - 1) * stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # Channel-last copy once; every offset slice then reshapes to a GEMM operand.
    xcl = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))
    wof = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # (kh, kw, Cin, Cout)

    acc = np.zeros((rows, Cout), dtype=np.float32)
    for ki in range(kh):
        for kj in range(kw):
            patch = xcl[:, ki:ki + he:stride, kj:kj + we:stride, :]
            acc += patch.reshape(rows, Cin) @ wof[ki, kj]
    if b is not None:
        acc += b.data
    out = np.ascontiguousarray(acc.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    need_x = x.requires_grad or x._grad_fn is not None
    need_w = w.requires_grad or w._grad_fn is not None
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        gcl = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(rows, Cout)
        gx = gw = gb = None
        if b is not None:
            gb = g.sum(axis=(0, 2, 3))
        if need_w:
            gw = np.empty_like(w.data)
            for ki in range(kh):
                for kj in range(kw):
                    patch = xcl[:, ki:ki + he:stride, kj:kj + we:stride, :]
                    gw[:, :, ki, kj] = gcl.T @ patch.reshape(rows, Cin)
        if need_x:
            gxp = np.zeros((B, Hp, Wp, Cin), dtype=np.float32)
            for ki in range(kh):
                for kj in range(kw):
                    d = (gcl @ wof[ki, kj].T).reshape(B, Ho, Wo, Cin)
                    gxp[:, ki:ki + he:stride, kj:kj + we:stride, :] += d
            if padding:
                gxp = gxp[:, padding:padding + H, padding:padding + W, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        if b is None:
            return gx, gw
        return gx, gw, gb

    return make_result(out, parents, grad_fn, "conv2d")


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Per-group normalization over (C/G, H, W) with affine gain/bias."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm: need NCHW, got {x.shape}")
    B, C, H, W = x.shape
    if C % groups != 0:
        raise ShapeError(f"group_norm: {C} channels not divisible by {groups} groups")
    S = (C // groups) * H * W
    xg = x.data.reshape(B, groups, S)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    xhat4 = xhat.reshape(B, C, H, W)
    y = xhat4 * gain.data[None, :, None, None] + bias.data[None, :, None, None]

    def grad_fn(g):
        dgain = (g * xhat4).sum(axis=(0, 2, 3))
        dbias = g.sum(axis=(0, 2, 3))
        dxh = (g * gain.data[None, :, None, None]).reshape(B, groups, S)
        m1 = dxh.mean(axis=-1, keepdims=True)
        m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
        dx = (inv * (dxh - m1 - xhat * m2)).reshape(B, C, H, W)
        return dx.astype(np.float32), dgain, dbias

    return make_result(y, (x, gain, bias), grad_fn, "group_norm")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: odd spatial extent {H}x{W}")
    y = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return make_result(y, (x,), grad_fn, "avg_pool2")


def nearest_upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    B, C, H, W = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def grad_fn(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return make_result(y, (x,), grad_fn, "nearest_upsample2")


def attention2d(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head self-attention over spatial positions (no residual).

    Projections are bias-free (C, C) matrices applied as 1x1 convolutions.
    """
    from .tensor import bmm, mul, permute, reshape, softmax_lastdim

    B, C, H, W = x.shape
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (C, C):
            raise ShapeError(f"attention2d: {name} must be ({C},{C}), got {w.shape}")
    q = conv2d(x, reshape(wq, (C, C, 1, 1)))
    k = conv2d(x, reshape(wk, (C, C, 1, 1)))
    v = conv2d(x, reshape(wv, (C, C, 1, 1)))
    hw = H * W
    qf = permute(reshape(q, (B, C, hw)), (0, 2, 1))   # (B, HW, C)
    kf = reshape(k, (B, C, hw))                        # (B, C, HW)
    vf = permute(reshape(v, (B, C, hw)), (0, 2, 1))   # (B, HW, C)
    scores = mul(bmm(qf, kf), 1.0 / float(np.sqrt(C)))
    attn = softmax_lastdim(scores)
    out = bmm(attn, vf)                                # (B, HW, C)
    out = reshape(permute(out, (0, 2, 1)), (B, C, H, W))
    return conv2d(out, reshape(wo, (C, C, 1, 1)))


def sinusoidal_time_embedding(t, dim: int) -> Tensor:
    """Classic sin/cos embedding with frequencies 10000^(-2i/dim).

    Accepts a python int (shape (1, dim) result, broadcasts over the batch)
    or an integer array of shape (B,). Not differentiated.
    """
    if dim % 2:
        raise ShapeError(f"time embedding dim must be even, got {dim}")
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if tv.ndim != 1:
        raise ShapeError(f"time steps must be scalar or 1-D, got shape {tv.shape}")
    half = dim // 2
    freqs = np.power(10000.0, -2.0 * np.arange(half) / dim)
    ang = tv[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)
    return Tensor(emb)
