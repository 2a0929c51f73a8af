import numpy as np
import pytest
import torch

from granogen.denoiser import (
    TrainConfig,
    TrainingError,
    UNetConfig,
    build_net,
    gradient,
    inpaint_input,
    load_checkpoint,
    loss_inpaint,
    loss_simple,
    lr_at,
    predict_noise,
    sample_training_mask,
    save_checkpoint,
    train,
)
from granogen.sched import add_noise, make_schedule



def _val(loss):
    return loss.detach().item()


TINY = UNetConfig(channel_blocks=(4, 8), convs_per_block=1, time_embed_dim=8, norm_groups=2)


def expected_count(cfg: UNetConfig) -> int:
    """Closed-form parameter count from the documented layout."""
    td, n, w = cfg.time_embed_dim, cfg.convs_per_block, cfg.channel_blocks

    def conv(ci, co, k=27):
        return ci * co * k + co

    def res(ci, co):
        total, c = 0, ci
        for _ in range(n):
            total += 2 * c + conv(c, co)
            c = co
        total += td * co + co
        if ci != co:
            total += conv(ci, co, 1)
        return total

    total = 2 * (td * td + td) + conv(cfg.in_channels, w[0])
    prev = w[0]
    for i, c in enumerate(w):
        total += res(prev, c)
        if i < len(w) - 1:
            total += conv(c, c)
        prev = c
    total += res(w[-1], w[-1])
    for i in reversed(range(len(w))):
        cin = w[-1] if i == len(w) - 1 else w[i + 1]
        total += res(cin + w[i], w[i])
        if i > 0:
            total += conv(w[i], w[i], 8) if cfg.up_mode == "transposed" else conv(w[i], w[i])
    return total + 2 * w[0] + conv(w[0], 1)


@pytest.mark.parametrize("cfg", [
    UNetConfig(),
    UNetConfig(in_channels=3),
    UNetConfig(up_mode="transposed"),
    TINY,
])
def test_param_count_closed_form(cfg):
    assert build_net(cfg).param_count() == expected_count(cfg)


def test_layout_is_contiguous():
    net = build_net(UNetConfig())
    layout = net.param_layout()
    off = 0
    for name, start, shape in layout:
        assert start == off
        off += int(np.prod(shape))
    assert off == net.param_count()
    assert layout[0][0] == "time_mlp.0.weight" and layout[-1][0] == "conv_out.bias"


def test_seeded_init_is_deterministic():
    a, b = build_net(UNetConfig(), seed=3), build_net(UNetConfig(), seed=3)
    assert np.array_equal(a.get_flat(), b.get_flat())
    assert not np.array_equal(a.get_flat(), build_net(UNetConfig(), seed=4).get_flat())


def test_config_contracts():
    with pytest.raises(ValueError, match="need >= 2 levels"):
        UNetConfig(channel_blocks=(8,))
    with pytest.raises(ValueError):
        UNetConfig(in_channels=2)
    with pytest.raises(ValueError):
        UNetConfig(channel_blocks=(6, 8))
    with pytest.raises(ValueError):
        TrainConfig(lam=0.5)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_forward_shapes_and_errors():
    net = build_net(UNetConfig())
    out = net(torch.zeros(2, 1, 16, 32, 32), torch.tensor([0, 500]))
    assert out.shape == (2, 1, 16, 32, 32)
    assert torch.isfinite(out).all()
    with pytest.raises(ValueError, match="not divisible by 8"):
        net(torch.zeros(1, 1, 12, 32, 32), torch.tensor([0]))
    with pytest.raises(ValueError):
        net(torch.zeros(1, 3, 16, 32, 32), torch.tensor([0]))


def test_zero_parameters_give_zero_output(rng):
    net = build_net(UNetConfig())
    net.set_flat(np.zeros(net.param_count()))
    out = predict_noise(net, rng.standard_normal((1, 1, 8, 8, 8)), 10)
    assert np.all(out == 0)


def test_every_sampled_parameter_is_live(rng):
    net = build_net(TINY, seed=1).double()
    x = torch.as_tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    t = torch.tensor([37])
    base = net(x, t).detach()
    flat = net.get_flat()
    for i in rng.choice(flat.size, 100, replace=False):
        p = flat.copy()
        p[i] += 0.5
        net.set_flat(p)
        assert not torch.equal(net(x, t), base), f"parameter {i} has no effect"
    net.set_flat(flat)


def test_batch_permutation_equivariance(rng):
    net = build_net(TINY).double()
    x = torch.as_tensor(rng.standard_normal((3, 1, 4, 4, 4)))
    t = torch.tensor([1, 50, 90])
    perm = [2, 0, 1]
    assert torch.allclose(net(x, t)[perm], net(x[perm], t[perm]), atol=1e-12)


def _const_net(value):
    """Net whose output is ``value`` everywhere: only the output bias is set."""
    net = build_net(TINY).double()
    flat = np.zeros(net.param_count())
    flat[-1] = value
    net.set_flat(flat)
    return net


def test_loss_simple_cases(rng):
    sched = make_schedule(100)
    x0 = rng.choice([-1.0, 1.0], (2, 1, 4, 4, 4))
    t = np.array([3, 70])
    assert _val(loss_simple(_const_net(0.0), x0, np.ones_like(x0), t, sched)) == pytest.approx(1.0)
    assert _val(loss_simple(_const_net(0.0), x0, np.zeros_like(x0), t, sched)) == 0.0
    eps = rng.standard_normal(x0.shape)
    want = np.mean((eps - 0.3) ** 2)
    assert _val(loss_simple(_const_net(0.3), x0, eps, t, sched)) == pytest.approx(want, abs=1e-12)


def test_loss_inpaint_weighting(rng):
    sched = make_schedule(100)
    cfg3 = UNetConfig(in_channels=3, channel_blocks=(4, 8), convs_per_block=1, time_embed_dim=8, norm_groups=2)
    net = build_net(cfg3, seed=2).double()
    x0 = rng.choice([-1.0, 1.0], (2, 1, 4, 4, 4))
    eps = rng.standard_normal(x0.shape)
    t = np.array([5, 60])
    mask = (rng.random(x0.shape) < 0.4).astype(float)
    ones = np.ones_like(mask)
    xt = torch.as_tensor(np.stack([add_noise(x0[i], eps[i], t[i], sched) for i in range(2)]))
    with torch.no_grad():
        pred_all = net(inpaint_input(xt, torch.as_tensor(ones), torch.as_tensor(x0)), torch.as_tensor(t))
        pred = net(inpaint_input(xt, torch.as_tensor(mask), torch.as_tensor(x0)), torch.as_tensor(t))
    mse_all = float(torch.mean((torch.as_tensor(eps) - pred_all) ** 2))
    mse = float(torch.mean((torch.as_tensor(eps) - pred) ** 2))
    assert _val(loss_inpaint(net, x0, eps, t, mask, sched, lam=1.0)) == pytest.approx(mse, rel=1e-12)
    assert _val(loss_inpaint(net, x0, eps, t, ones, sched, lam=2.0)) == pytest.approx(2 * mse_all, rel=1e-12)
    err = (torch.as_tensor(eps) - pred).numpy() ** 2
    masked = float((err * mask).sum() / mask.sum())
    assert _val(loss_inpaint(net, x0, eps, t, mask, sched, masked_only=True)) == pytest.approx(masked, rel=1e-12)
    with pytest.raises(ValueError):
        loss_inpaint(net, x0, eps, t, mask[:, :, :2], sched)


def test_loss_inpaint_two_voxel_arithmetic():
    # errors 1 (masked) and 3 (known), lambda 2 -> (2*1 + 9) / 2
    err = np.array([1.0, 3.0])
    m = np.array([1.0, 0.0])
    w = 1 + (2.0 - 1) * m
    assert np.mean(w * err**2) == 5.5


def test_masked_only_ignores_hidden_x0_in_context(rng):
    # x_t is held fixed; masked x0 values must reach neither the context
    # channel nor the masked-only objective
    cfg3 = UNetConfig(in_channels=3, channel_blocks=(4, 8), convs_per_block=1, time_embed_dim=8, norm_groups=2)
    net = build_net(cfg3, seed=5).double()
    xt = torch.as_tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    m = torch.as_tensor((rng.random((1, 1, 4, 4, 4)) < 0.5).astype(float))
    x0a = torch.as_tensor(rng.choice([-1.0, 1.0], (1, 1, 4, 4, 4)))
    x0b = torch.where(m.bool(), -x0a, x0a)
    assert torch.equal(inpaint_input(xt, m, x0a), inpaint_input(xt, m, x0b))
    t = torch.tensor([20])
    assert torch.equal(net(inpaint_input(xt, m, x0a), t), net(inpaint_input(xt, m, x0b), t))


def test_gradient_matches_finite_differences(rng):
    sched = make_schedule(100)
    cfg = UNetConfig(in_channels=3, channel_blocks=(4, 4), convs_per_block=1, time_embed_dim=4, norm_groups=2)
    net = build_net(cfg, seed=7).double()
    assert net.param_count() <= 5000
    x0 = rng.choice([-1.0, 1.0], (2, 1, 4, 4, 4))
    eps = rng.standard_normal(x0.shape)
    t = np.array([10, 80])
    mask = (rng.random(x0.shape) < 0.5).astype(float)

    def closure():
        return loss_inpaint(net, x0, eps, t, mask, sched, lam=2.0)

    g = gradient(net, closure)
    flat = net.get_flat()
    h = 1e-3
    for i in rng.choice(flat.size, 40, replace=False):
        p = flat.copy()
        p[i] += h
        net.set_flat(p)
        up = _val(closure())
        p[i] -= 2 * h
        net.set_flat(p)
        down = _val(closure())
        fd = (up - down) / (2 * h)
        assert abs(fd - g[i]) <= 1e-3 * max(abs(fd), abs(g[i]), 1e-4)
    net.set_flat(flat)


def test_gradient_linear_and_stationary(rng):
    sched = make_schedule(100)
    net = _const_net(0.0)
    x0 = rng.choice([-1.0, 1.0], (1, 1, 4, 4, 4))
    eps = np.zeros_like(x0)
    t = np.array([5])
    g0 = gradient(net, lambda: loss_simple(net, x0, eps, t, sched))
    assert np.linalg.norm(g0) <= 1e-8
    net = build_net(TINY, seed=3).double()
    eps = rng.standard_normal(x0.shape)
    g1 = gradient(net, lambda: loss_simple(net, x0, eps, t, sched))
    g2 = gradient(net, lambda: 2 * loss_simple(net, x0, eps, t, sched))
    assert np.allclose(g2, 2 * g1, rtol=1e-12, atol=1e-15)


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, warmup_epochs=5, epochs=20)
    assert lr_at(0, cfg) == pytest.approx(1e-3 / 5)
    assert lr_at(4, cfg) == pytest.approx(1e-3)
    assert lr_at(5, cfg) == pytest.approx(1e-3)
    assert lr_at(19, cfg) < lr_at(10, cfg) < lr_at(5, cfg)
    assert lr_at(20, cfg) == pytest.approx(0.0, abs=1e-18)


def test_training_masks(rng):
    for _ in range(300):
        m = sample_training_mask((16, 32, 32), rng)
        assert m.dtype == np.uint8 and m.any()
        assert 0.0 < m.mean() <= 0.76


def _toy_data(rng, n=8):
    return [(rng.random((8, 8, 8)) < 0.4).astype(np.uint8) for _ in range(n)]


def test_training_is_reproducible_and_learns(rng):
    data = _toy_data(rng)
    sched = make_schedule(1000)
    cfg = TrainConfig(lr=3e-3, batch_size=4, warmup_epochs=1, epochs=100, max_steps=120, seed=1)
    r1 = train(build_net(TINY, seed=0), data, cfg, sched)
    r2 = train(build_net(TINY, seed=0), data, cfg, sched)
    assert r1.step_losses == r2.step_losses
    assert np.array_equal(r1.final_params, r2.final_params)
    assert r1.steps == 120
    assert r1.epoch_losses[-1] < r1.epoch_losses[0]


def test_inpainting_training_runs(rng):
    cfg3 = UNetConfig(in_channels=3, channel_blocks=(4, 8), convs_per_block=1, time_embed_dim=8, norm_groups=2)
    rep = train(build_net(cfg3), _toy_data(rng, 4), TrainConfig(max_steps=3, batch_size=2), make_schedule(50), "inpainting")
    assert rep.steps == 3 and all(np.isfinite(rep.step_losses))
    with pytest.raises(ValueError):
        train(build_net(TINY), _toy_data(rng, 2), TrainConfig(max_steps=1), make_schedule(50), "inpainting")


def test_training_errors(rng):
    with pytest.raises(ValueError):
        train(build_net(TINY), [], TrainConfig(), make_schedule(50))
    net = build_net(TINY)
    flat = net.get_flat()
    flat[-1] = np.nan
    net.set_flat(flat)
    with pytest.raises(TrainingError, match="step 0"):
        train(net, _toy_data(rng, 2), TrainConfig(max_steps=2), make_schedule(50))


def test_checkpoint_round_trip(tmp_path):
    net = build_net(UNetConfig(in_channels=3, up_mode="transposed"), seed=9)
    p = tmp_path / "n.ckpt"
    save_checkpoint(p, net, seed=9, epoch=4, extra={"mode": "inpainting"})
    back, meta = load_checkpoint(p)
    assert back.config == net.config
    assert np.array_equal(back.get_flat(), net.get_flat())
    assert meta["seed"] == 9 and meta["epoch"] == 4 and meta["extra"] == {"mode": "inpainting"}
    save_checkpoint(tmp_path / "m.ckpt", back, seed=9, epoch=4, extra={"mode": "inpainting"})
    assert p.read_bytes() == (tmp_path / "m.ckpt").read_bytes()
    raw = p.read_bytes()
    assert raw[:4] == b"GRNC"
    (tmp_path / "bad.ckpt").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="corrupt"):
        load_checkpoint(tmp_path / "bad.ckpt")
