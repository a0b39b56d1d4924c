"""Model save/load round trips, including optimizer moments and schedule meta."""
import numpy as np
import pytest

from modiff.checkpoint import CheckpointError
from modiff.optim import AdamState, adam_step
from modiff.persist import load_model, save_model, schedule_from_meta, schedule_meta
from modiff.schedule import linear_schedule
from modiff.tensor import Tensor
from modiff.unet import UNetConfig, base_predict, build_unet


def tiny_net(seed=0, **kw):
    d = dict(in_channels=3, out_channels=3, base_channels=8,
             channel_multipliers=(1, 2), res_blocks_per_level=1,
             attention_resolutions=(4,), out_heads=1, image_size=8)
    d.update(kw)
    return build_unet(UNetConfig(**d), seed=seed)


def base_meta(net):
    return {"kind": "test", "unet": net.cfg.to_dict(),
            "schedule": schedule_meta(linear_schedule(20, 1e-4, 0.02))}


def test_weights_roundtrip_bitwise(tmp_path, rng):
    net = tiny_net(seed=3)
    path = tmp_path / "m.ckpt"
    save_model(path, net, base_meta(net))
    back, meta, opt = load_model(path)
    assert opt is None
    assert meta["kind"] == "test"
    assert meta["init_seed"] == 3
    for (n1, p1), (n2, p2) in zip(net.named_params().items(),
                                  back.named_params().items()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.tensor.data, p2.tensor.data)
    x = Tensor(rng.standard_normal((1, 3, 8, 8)).astype(np.float32))
    np.testing.assert_array_equal(base_predict(net, x, 4).data,
                                  base_predict(back, x, 4).data)


def test_schedule_meta_roundtrip():
    s = linear_schedule(37, 2e-4, 0.015)
    back = schedule_from_meta({"schedule": schedule_meta(s)})
    assert back.T == 37
    np.testing.assert_array_equal(back.beta, s.beta)
    np.testing.assert_array_equal(back.alpha_bar, s.alpha_bar)


def test_optimizer_state_roundtrip(tmp_path, rng):
    net = tiny_net(seed=1)
    opt = AdamState(lr=3e-4)
    # Take two real steps so the moment buffers are non-trivial.
    for _ in range(2):
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32),
                   requires_grad=False)
        y = base_predict(net, x, 5)
        from modiff.tensor import tmean
        (tmean(y * y)).backward()
        adam_step(opt, net.params())
    path = tmp_path / "m.ckpt"
    save_model(path, net, base_meta(net), opt=opt)
    back_net, meta, back_opt = load_model(path)
    assert back_opt is not None
    assert back_opt.step == 2
    assert back_opt.lr == pytest.approx(3e-4)
    assert set(back_opt.m) == set(opt.m)
    for name in opt.m:
        np.testing.assert_array_equal(back_opt.m[name], opt.m[name])
        np.testing.assert_array_equal(back_opt.v[name], opt.v[name])
    # Resuming from the restored state reproduces the next step bit-for-bit.
    g = {n: rng.standard_normal(p.tensor.data.shape).astype(np.float32)
         for n, p in net.named_params().items()}
    for (n, p), (bn, bp) in zip(net.named_params().items(),
                                back_net.named_params().items()):
        p.tensor.grad = g[n].copy()
        bp.tensor.grad = g[bn].copy()
    adam_step(opt, net.params())
    adam_step(back_opt, back_net.params())
    for p, bp in zip(net.params(), back_net.params()):
        np.testing.assert_array_equal(p.tensor.data, bp.tensor.data)


def test_save_is_deterministic_bytes(tmp_path):
    net = tiny_net(seed=2)
    meta = base_meta(net)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_model(a, net, meta)
    save_model(b, net, meta)
    assert a.read_bytes() == b.read_bytes()


def test_load_rejects_missing_config(tmp_path):
    net = tiny_net()
    from modiff.checkpoint import save_checkpoint
    tensors = {n: p.tensor.data for n, p in net.named_params().items()}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors, {"kind": "test"})  # no "unet" entry
    with pytest.raises(CheckpointError, match="unet"):
        load_model(path)
