"""Time-conditional U-Net noise predictor.

One weight class serves both roles: the frozen base denoiser (one output
head predicting noise) and the small modulation network (two zero-initialized
heads predicting gain and bias over the base's noise output). Decoder is
deliberately lean — one skip concat per level, parameter-free nearest
upsampling — to keep the parameter and FLOP budget CPU-trainable.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import ShapeError, Tensor, add, concat, reshape

NORM_GROUPS = 8


@dataclass(frozen=True)
class UNetConfig:
    """Architecture knobs; defaults match the base denoiser."""

    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 48
    channel_multipliers: tuple = (1, 1, 2, 8)
    res_blocks_per_level: int = 2
    attention_resolutions: tuple = (16,)
    out_heads: int = 1
    image_size: int = 32
    time_embed_dim: int = 0  # 0 -> 4 * base_channels

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if self.base_channels % NORM_GROUPS:
            raise ShapeError(f"base_channels must be divisible by {NORM_GROUPS}")
        if not self.channel_multipliers or any(m < 1 for m in self.channel_multipliers):
            raise ShapeError(f"bad channel multipliers {self.channel_multipliers}")
        if self.out_heads not in (1, 2):
            raise ShapeError(f"out_heads must be 1 or 2, got {self.out_heads}")
        if self.image_size % (2 ** (len(self.channel_multipliers) - 1)):
            raise ShapeError("image_size must be divisible by 2^(levels-1)")
        if self.res_blocks_per_level < 1:
            raise ShapeError("need at least one res block per level")

    @property
    def temb_dim(self) -> int:
        return self.time_embed_dim or 4 * self.base_channels

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "res_blocks_per_level": self.res_blocks_per_level,
            "attention_resolutions": list(self.attention_resolutions),
            "out_heads": self.out_heads,
            "image_size": self.image_size,
            "time_embed_dim": self.time_embed_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        cfg = UNetConfig(
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            base_channels=int(d["base_channels"]),
            channel_multipliers=tuple(int(m) for m in d["channel_multipliers"]),
            res_blocks_per_level=int(d["res_blocks_per_level"]),
            attention_resolutions=tuple(int(r) for r in d["attention_resolutions"]),
            out_heads=int(d["out_heads"]),
            image_size=int(d["image_size"]),
            time_embed_dim=int(d.get("time_embed_dim", 0)),
        )
        cfg.validate()
        return cfg


class _Store:
    """Ordered parameter registry shared by all layers of one network."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: "OrderedDict[str, nn.Parameter]" = OrderedDict()

    def param(self, name: str, data: np.ndarray) -> nn.Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = nn.Parameter(name, Tensor(data, requires_grad=True))
        self.params[name] = p
        return p


class _Conv:
    def __init__(self, st: _Store, name: str, cin: int, cout: int, k: int = 3,
                 stride: int = 1, zero: bool = False):
        fan_in = cin * k * k
        w = (np.zeros((cout, cin, k, k), dtype=np.float32) if zero
             else nn.kaiming_uniform(st.rng, (cout, cin, k, k), fan_in))
        self.w = st.param(f"{name}.weight", w)
        self.b = st.param(f"{name}.bias", np.zeros(cout, dtype=np.float32))
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv2d(x, self.w.tensor, self.b.tensor,
                         stride=self.stride, padding=self.padding)


class _Dense:
    def __init__(self, st: _Store, name: str, cin: int, cout: int):
        self.w = st.param(f"{name}.weight", nn.kaiming_uniform(st.rng, (cin, cout), cin))
        self.b = st.param(f"{name}.bias", np.zeros(cout, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return nn.linear(x, self.w.tensor, self.b.tensor)


class _Norm:
    def __init__(self, st: _Store, name: str, c: int):
        self.gain = st.param(f"{name}.gain", np.ones(c, dtype=np.float32))
        self.bias = st.param(f"{name}.bias", np.zeros(c, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return nn.group_norm(x, NORM_GROUPS, self.gain.tensor, self.bias.tensor)


class _ResBlock:
    """Pre-activation residual block with additive time conditioning."""

    def __init__(self, st: _Store, name: str, cin: int, cout: int, temb_dim: int):
        self.norm1 = _Norm(st, f"{name}.norm1", cin)
        self.conv1 = _Conv(st, f"{name}.conv1", cin, cout)
        self.tproj = _Dense(st, f"{name}.tproj", temb_dim, cout)
        self.norm2 = _Norm(st, f"{name}.norm2", cout)
        self.conv2 = _Conv(st, f"{name}.conv2", cout, cout)
        self.skip = _Conv(st, f"{name}.skip", cin, cout, k=1) if cin != cout else None
        self.cout = cout

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(nn.silu(self.norm1(x)))
        tb = self.tproj(nn.silu(temb))
        tb = reshape(tb, (tb.shape[0], self.cout, 1, 1))
        h = add(h, tb)
        h = self.conv2(nn.silu(self.norm2(h)))
        res = self.skip(x) if self.skip is not None else x
        return add(h, res)


class _AttnBlock:
    """Residual single-head self-attention at one resolution."""

    def __init__(self, st: _Store, name: str, c: int):
        self.norm = _Norm(st, f"{name}.norm", c)
        self.wq = st.param(f"{name}.wq", nn.kaiming_uniform(st.rng, (c, c), c))
        self.wk = st.param(f"{name}.wk", nn.kaiming_uniform(st.rng, (c, c), c))
        self.wv = st.param(f"{name}.wv", nn.kaiming_uniform(st.rng, (c, c), c))
        self.wo = st.param(f"{name}.wo", nn.kaiming_uniform(st.rng, (c, c), c))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm(x)
        h = nn.attention2d(h, self.wq.tensor, self.wk.tensor,
                           self.wv.tensor, self.wo.tensor)
        return add(x, h)


class UNet:
    """Encoder / middle / decoder over powers-of-two resolutions."""

    def __init__(self, cfg: UNetConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = int(seed)
        st = _Store(np.random.Generator(np.random.PCG64(seed)))
        C = cfg.base_channels
        temb_dim = cfg.temb_dim
        chs = [C * m for m in cfg.channel_multipliers]
        levels = len(chs)
        spatial = [cfg.image_size // (2 ** i) for i in range(levels)]
        attn_at = [s in cfg.attention_resolutions for s in spatial]

        self.time_fc1 = _Dense(st, "time.fc1", C, temb_dim)
        self.time_fc2 = _Dense(st, "time.fc2", temb_dim, temb_dim)
        self.stem = _Conv(st, "stem", cfg.in_channels, C)

        self.down_blocks = []  # per level: list of (res, attn-or-None)
        self.downsamples = []
        cur = C
        for i, ch in enumerate(chs):
            blocks = []
            for r in range(cfg.res_blocks_per_level):
                res = _ResBlock(st, f"down{i}.res{r}", cur, ch, temb_dim)
                cur = ch
                attn = _AttnBlock(st, f"down{i}.attn{r}", ch) if attn_at[i] else None
                blocks.append((res, attn))
            self.down_blocks.append(blocks)
            if i < levels - 1:
                self.downsamples.append(_Conv(st, f"down{i}.down", cur, cur, stride=2))

        self.mid_res1 = _ResBlock(st, "mid.res1", cur, cur, temb_dim)
        self.mid_attn = _AttnBlock(st, "mid.attn", cur)
        self.mid_res2 = _ResBlock(st, "mid.res2", cur, cur, temb_dim)

        self.up_blocks = []  # per level i < levels-1, decoder order
        for i in range(levels - 2, -1, -1):
            blocks = []
            for r in range(cfg.res_blocks_per_level):
                cin = cur + chs[i] if r == 0 else chs[i]
                res = _ResBlock(st, f"up{i}.res{r}", cin, chs[i], temb_dim)
                attn = _AttnBlock(st, f"up{i}.attn{r}", chs[i]) if attn_at[i] else None
                blocks.append((res, attn))
            cur = chs[i]
            self.up_blocks.append((i, blocks))

        self.out_norm = _Norm(st, "out.norm", cur)
        # Split heads (out_heads == 2) are zero-initialized so a fresh
        # modulation net predicts exactly (0, 0) and leaves sampling alone.
        zero_head = cfg.out_heads == 2
        self.heads = [_Conv(st, f"out.head{h}", cur, cfg.out_channels, zero=zero_head)
                      for h in range(cfg.out_heads)]
        self._store = st

    # -- parameters ------------------------------------------------------

    def params(self) -> list:
        return list(self._store.params.values())

    def named_params(self) -> "OrderedDict[str, nn.Parameter]":
        return self._store.params

    def num_params(self) -> int:
        return sum(p.tensor.size for p in self.params())

    def freeze(self) -> None:
        for p in self.params():
            p.freeze()

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.tensor.data) for name, p in self._store.params.items())

    def load_state(self, state: dict) -> None:
        own = self._store.params
        missing = [n for n in own if n not in state]
        extra = [n for n in state if n not in own]
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.tensor.data.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {p.tensor.data.shape}")
            p.tensor.data = arr.copy()

    # -- forward ----------------------------------------------------------

    def __call__(self, x: Tensor, t):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (B,{cfg.in_channels},H,W), got {x.shape}")
        if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise ShapeError(f"expected {cfg.image_size}x{cfg.image_size} input, got {x.shape}")

        temb = nn.sinusoidal_time_embedding(t, cfg.base_channels)
        temb = self.time_fc2(nn.silu(self.time_fc1(temb)))

        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for res, attn in blocks:
                h = res(h, temb)
                if attn is not None:
                    h = attn(h)
            if i < len(self.down_blocks) - 1:
                skips.append(h)
                h = self.downsamples[i](h)

        h = self.mid_res1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_res2(h, temb)

        for _, blocks in self.up_blocks:
            h = nn.nearest_upsample2(h)
            h = concat([h, skips.pop()], axis=1)
            for res, attn in blocks:
                h = res(h, temb)
                if attn is not None:
                    h = attn(h)

        h = nn.silu(self.out_norm(h))
        outs = [head(h) for head in self.heads]
        if cfg.out_heads == 1:
            return outs[0]
        return tuple(outs)


def build_unet(cfg: UNetConfig, seed: int) -> UNet:
    """Deterministic construction: same cfg and seed give identical weights."""
    return UNet(cfg, seed)


def base_predict(net: UNet, x_t: Tensor, t) -> Tensor:
    """Noise prediction from the (usually frozen) base denoiser."""
    if net.cfg.out_heads != 1:
        raise ShapeError("base_predict needs a single-head network")
    return net(x_t, t)


def mcm_predict(net: UNet, stacked: Tensor, t) -> tuple[Tensor, Tensor]:
    """Gain/bias pair from the modulation network on the stacked input."""
    if net.cfg.out_heads != 2:
        raise ShapeError("mcm_predict needs a two-head network")
    return net(stacked, t)
