"""Shared test utilities: finite-difference gradient checking and the
scalar-Gaussian end-to-end oracle."""
from __future__ import annotations

import numpy as np

from types import SimpleNamespace

from modiff import nn
from modiff.schedule import VarianceSchedule, linear_schedule
from modiff.tensor import Tensor, concat, reshape, tmean
from modiff.training import BaseTrainConfig, train_base
from modiff.unet import base_predict

GAUSS_MU = 0.3
GAUSS_SIGMA = 0.5


def fd_gradcheck(fn, inputs, h: float = 1e-2, rel_tol: float = 1e-3,
                 abs_floor: float = 5e-2, max_elems: int | None = None,
                 sample_seed: int = 0) -> float:
    """Compare backward() gradients against central differences.

    fn maps a list of leaf Tensors to a scalar Tensor. The forward runs in
    f32, so the quotient divides by the *actual* rounded step (hi - lo in
    float64) rather than 2h, and h defaults large enough that f32 rounding
    noise in the scalar stays well under rel_tol. Gradients larger than
    abs_floor are checked at rel_tol relative error; smaller ones at
    rel_tol * abs_floor absolute, since the f32 scalar's resolution puts
    ~1e-5 of irreducible noise on the quotient regardless of the true
    gradient size. max_elems, when set, checks a random subset of that
    many elements per leaf instead of all of them. Returns the worst
    relative error seen.
    """
    leaves = [Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
              for x in inputs]
    out = fn(leaves)
    if out.data.size != 1:
        raise ValueError("gradcheck target must be scalar")
    out.backward()
    analytic = [lf.grad.copy() for lf in leaves]
    pick_rng = np.random.default_rng(sample_seed)

    worst = 0.0
    for li, lf in enumerate(leaves):
        lf.data = np.ascontiguousarray(lf.data)
        flat = lf.data.reshape(-1)  # view: writes hit the live leaf buffer
        g_flat = analytic[li].reshape(-1)
        if max_elems is not None and flat.size > max_elems:
            elems = pick_rng.choice(flat.size, size=max_elems, replace=False)
        else:
            elems = range(flat.size)

        def central(j, orig, step):
            flat[j] = np.float32(orig + step)
            x_hi = float(flat[j])
            hi = float(fn([Tensor(l.data) for l in leaves]).data)
            flat[j] = np.float32(orig - step)
            x_lo = float(flat[j])
            lo = float(fn([Tensor(l.data) for l in leaves]).data)
            flat[j] = np.float32(orig)
            return (hi - lo) / (x_hi - x_lo)

        for j in elems:
            orig = float(flat[j])
            g = float(g_flat[j])
            # Two step sizes plus their Richardson extrapolation: plain
            # central differences are noise-limited but truncation-free on
            # (near-)linear maps, Richardson removes the h^2 truncation that
            # dominates through curved layers (silu, normalization) at the
            # cost of 3x the read noise. The analytic gradient must match
            # whichever estimator is in its clean regime; a wrong gradient
            # misses all of them by orders of magnitude.
            d1 = central(j, orig, h)
            d2 = central(j, orig, h / 2)
            cands = (d1, d2, (4.0 * d2 - d1) / 3.0)
            num = min(cands, key=lambda c: abs(c - g))
            denom = max(abs(num), abs(g), abs_floor)
            err = abs(num - g) / denom
            worst = max(worst, err)
            if err > rel_tol:
                raise AssertionError(
                    f"grad mismatch at input {li} elem {j}: "
                    f"analytic {g:.6g} vs numeric {num:.6g} (rel {err:.3g})")
    return worst


class MlpDenoiser:
    """Tiny noise predictor for 1x1 one-channel images.

    Duck-types the network surface the training loop and sampler use: cfg
    fields, __call__(x, t), params(), frozen/freeze.
    """

    TEMB = 32

    def __init__(self, seed: int = 7, hidden: int = 64):
        rng = np.random.default_rng(seed)
        self.cfg = SimpleNamespace(in_channels=1, out_channels=1, image_size=1,
                                   out_heads=1)
        def par(name, shape, fan_in):
            return nn.Parameter(name, Tensor(nn.kaiming_uniform(rng, shape, fan_in),
                                             requires_grad=True))
        d_in = 1 + self.TEMB
        self._params = [
            par("fc1.w", (d_in, hidden), d_in),
            par("fc1.b", (hidden,), d_in),
            par("fc2.w", (hidden, hidden), hidden),
            par("fc2.b", (hidden,), hidden),
            par("out.w", (hidden, 1), hidden),
            par("out.b", (1,), hidden),
        ]

    def params(self):
        return self._params

    def freeze(self):
        for p in self._params:
            p.freeze()

    @property
    def frozen(self):
        return all(p.frozen for p in self._params)

    def __call__(self, x: Tensor, t) -> Tensor:
        b = x.shape[0]
        temb = nn.sinusoidal_time_embedding(t, self.TEMB)
        if temb.shape[0] == 1 and b > 1:
            temb = Tensor(np.repeat(temb.data, b, axis=0))
        h = concat([reshape(x, (b, 1)), temb], axis=1)
        w = {p.name: p.tensor for p in self._params}
        h = nn.silu(nn.linear(h, w["fc1.w"], w["fc1.b"]))
        h = nn.silu(nn.linear(h, w["fc2.w"], w["fc2.b"]))
        return reshape(nn.linear(h, w["out.w"], w["out.b"]), (b, 1, 1, 1))


def gaussian_oracle_net(seed: int = 7) -> MlpDenoiser:
    return MlpDenoiser(seed)


def optimal_eps_mse(s: VarianceSchedule, sigma: float = GAUSS_SIGMA) -> float:
    """Bayes MSE of noise prediction for x0 ~ N(mu, sigma^2), t uniform.

    With x_t = sqrt(abar) x0 + sqrt(1-abar) eps, the posterior variance of
    eps given x_t is abar sigma^2 / (abar sigma^2 + 1 - abar).
    """
    ab = s.alpha_bar.astype(np.float64)
    return float(np.mean(ab * sigma ** 2 / (ab * sigma ** 2 + 1.0 - ab)))


def optimal_eps_prediction(x_t: np.ndarray, t: np.ndarray, s: VarianceSchedule,
                           mu: float = GAUSS_MU, sigma: float = GAUSS_SIGMA) -> np.ndarray:
    """Closed-form posterior mean of eps given x_t for the Gaussian task."""
    ab = s.alpha_bar.astype(np.float64)[np.asarray(t) - 1]
    ab = ab.reshape([-1] + [1] * (x_t.ndim - 1))
    return (x_t - np.sqrt(ab) * mu) * np.sqrt(1.0 - ab) / (sigma ** 2 * ab + 1.0 - ab)


def eps_mse_of_net(net, s: VarianceSchedule, n: int = 20000,
                   seed: int = 123, batch: int = 4000) -> float:
    """Monte-Carlo noise-prediction MSE on fresh Gaussian draws."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for start in range(0, n, batch):
        b = min(batch, n - start)
        x0 = (GAUSS_MU + GAUSS_SIGMA * rng.standard_normal((b, 1, 1, 1))).astype(np.float32)
        eps = rng.standard_normal((b, 1, 1, 1)).astype(np.float32)
        t = rng.integers(1, s.T + 1, size=b)
        ab = s.alpha_bar.astype(np.float64)[t - 1].reshape(-1, 1, 1, 1)
        x_t = (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps).astype(np.float32)
        from modiff.tensor import no_grad
        with no_grad():
            pred = base_predict(net, Tensor(x_t), t)
        total += float(np.sum((pred.data.astype(np.float64) - eps) ** 2))
    return total / n


def train_gaussian_oracle(epochs: int = 200, n_train: int = 16384,
                          seed: int = 7):
    """Train the tiny denoiser on scalar Gaussian data."""
    s = linear_schedule(1000)
    net = gaussian_oracle_net(seed)
    rng = np.random.default_rng(11)
    images = (GAUSS_MU + GAUSS_SIGMA * rng.standard_normal((n_train, 1, 1, 1))).astype(np.float32)
    cfg = BaseTrainConfig(epochs=epochs, batch_size=256, lr=1e-3, seed=seed)
    train_base(net, images, cfg, s)
    return net, s


def forward_moment_errors(s: VarianceSchedule, t: int, n: int = 10000,
                          seed: int = 0, x0_value: float = 0.7):
    """Monte-Carlo check of the forward-noise law at one timestep.

    Draws n noised copies of a constant image x0 = x0_value and returns
    (mean_error_in_standard_errors, variance_relative_error) against the
    law mean = sqrt(abar_t) * x0, variance = 1 - abar_t.
    """
    from modiff.schedule import forward_noise

    gen = np.random.default_rng(seed)
    x0 = Tensor(np.full((n, 1, 1, 1), x0_value, np.float32))
    eps = Tensor(gen.standard_normal((n, 1, 1, 1)).astype(np.float32))
    x_t = forward_noise(x0, t, eps, s).data.reshape(-1).astype(np.float64)
    ab = s.abar(t)
    target_mean = np.sqrt(ab) * x0_value
    target_var = 1.0 - ab
    se = np.sqrt(target_var / n)
    mean_err_se = abs(x_t.mean() - target_mean) / se
    var_rel_err = abs(x_t.var() - target_var) / target_var
    return mean_err_se, var_rel_err


def roundtrip_worst_error(s: VarianceSchedule, ts, n: int = 64,
                          seed: int = 0) -> float:
    """Worst |predict_x0(forward_noise(x0)) - x0| over timesteps ts.

    Inverting at timestep t amplifies float32 rounding by 1/sqrt(abar_t)
    (about 156x at t = 1000 for the default schedule), so the identity can
    only hold to ~6e-8 * 156 * |eps| per element. Draws are clipped to the
    data range +/-1, which keeps the worst-case bound at ~9.3e-6.
    """
    from modiff.schedule import forward_noise, predict_x0

    gen = np.random.default_rng(seed)
    worst = 0.0
    for t in ts:
        x0 = Tensor(np.clip(gen.standard_normal((n, 1, 2, 2)), -1, 1)
                    .astype(np.float32))
        eps = Tensor(np.clip(gen.standard_normal((n, 1, 2, 2)), -1, 1)
                     .astype(np.float32))
        x_t = forward_noise(x0, t, eps, s)
        back = predict_x0(x_t, eps, t, s)
        worst = max(worst, float(np.max(np.abs(back.data - x0.data))))
    return worst


def random_composition(seed: int):
    """Build a random layer pipeline and its leaf inputs from a seed.

    Returns (fn, leaves) where fn maps leaf Tensors to a scalar. Covers
    conv/norm/nonlinearity/pool/upsample/attention in varying depths.
    """
    gen = np.random.default_rng(seed)
    B = int(gen.integers(1, 3))
    C = int(gen.choice([2, 4]))
    H = int(gen.choice([4, 6]))
    x = gen.standard_normal((B, C, H, H)).astype(np.float32)
    leaves = [x]
    plan = []
    cur_c, cur_h = C, H
    for _ in range(int(gen.integers(2, 5))):
        options = ["conv", "silu", "mul"]
        if cur_c % 2 == 0:
            options.append("norm")
        if cur_h % 2 == 0 and cur_h >= 4:
            options.append("pool")
        if cur_h <= 4:
            options.append("attn")
        kind = gen.choice(options)
        if kind == "conv":
            cout = int(gen.choice([2, 4]))
            w = gen.standard_normal((cout, cur_c, 3, 3)).astype(np.float32) * 0.5
            b = gen.standard_normal(cout).astype(np.float32) * 0.1
            plan.append(("conv", len(leaves), len(leaves) + 1))
            leaves += [w, b]
            cur_c = cout
        elif kind == "norm":
            gain = (1.0 + 0.1 * gen.standard_normal(cur_c)).astype(np.float32)
            bias = (0.1 * gen.standard_normal(cur_c)).astype(np.float32)
            plan.append(("norm", len(leaves), len(leaves) + 1))
            leaves += [gain, bias]
        elif kind == "attn":
            ws = [(gen.standard_normal((cur_c, cur_c)) * 0.5).astype(np.float32)
                  for _ in range(4)]
            plan.append(("attn", len(leaves)))
            leaves += ws
        elif kind == "pool":
            plan.append(("pool",))
            cur_h //= 2
        elif kind == "mul":
            plan.append(("mul",))
        else:
            plan.append(("silu",))

    def fn(ls):
        h = ls[0]
        for step in plan:
            if step[0] == "conv":
                h = nn.conv2d(h, ls[step[1]], ls[step[2]], stride=1, padding=1)
            elif step[0] == "norm":
                h = nn.group_norm(h, 2, ls[step[1]], ls[step[2]])
            elif step[0] == "attn":
                i = step[1]
                h = nn.attention2d(h, ls[i], ls[i + 1], ls[i + 2], ls[i + 3])
            elif step[0] == "pool":
                h = nn.avg_pool2(h)
            elif step[0] == "mul":
                h = h * 0.7
            else:
                h = nn.silu(h)
        return tmean(h * h)

    return fn, leaves
