import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from granogen.sched import (
    StepPlan,
    add_noise,
    ddim_sigma,
    ddim_step,
    ddpm_step,
    make_plan,
    make_schedule,
    predict_x0,
)


def cosine_f(u, T, s=0.008):
    return math.cos(((u / T + s) / (1 + s)) * math.pi / 2) ** 2


def test_squaredcos_matches_formula():
    sched = make_schedule(1000)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bars[0] > 0.99
    assert sched.alpha_bars[999] < 1e-3
    f0 = cosine_f(0, 1000)
    for t in (0, 1, 10, 500, 900):
        want = min(1 - (cosine_f(t + 1, 1000) / f0) / (cosine_f(t, 1000) / f0), 0.999)
        assert sched.betas[t] == pytest.approx(want, abs=1e-15)
    assert sched.betas.max() <= 0.999


def test_single_step_schedule_is_capped():
    sched = make_schedule(1)
    raw = 1 - cosine_f(1, 1) / cosine_f(0, 1)
    assert raw > 0.999
    assert sched.betas.tolist() == [0.999]


def test_linear_schedule():
    sched = make_schedule(50, "linear")
    assert sched.betas[0] == pytest.approx(1e-4)
    assert sched.betas[-1] == pytest.approx(2e-2)


def test_bad_arguments():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, "quadratic")
    sched = make_schedule(10)
    with pytest.raises(ValueError):
        add_noise(np.zeros(2), np.zeros(2), 10, sched)
    with pytest.raises(ValueError):
        predict_x0(np.zeros(2), np.zeros(2), -1, sched)


@pytest.mark.parametrize("T", [1, 2, 3, 7, 50, 333, 1000, 2000])
def test_product_identity(T):
    sched = make_schedule(T)
    assert np.all(sched.betas > 0) and np.all(sched.betas < 1)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    prod = 1.0
    for t in range(T):
        prod *= sched.alphas[t]
        assert abs(sched.alpha_bars[t] - prod) <= 1e-12
        if t:
            assert abs(sched.alpha_bars[t] - sched.alpha_bars[t - 1] * sched.alphas[t]) <= 1e-12


def test_schedule_tables_are_read_only():
    sched = make_schedule(10)
    with pytest.raises(ValueError):
        sched.betas[0] = 0.5


def test_add_noise_limits(rng):
    sched = make_schedule(100)
    x0 = rng.standard_normal((3, 4))
    eps = rng.standard_normal((3, 4))
    ab = sched.alpha_bars[40]
    assert np.allclose(add_noise(x0, np.zeros_like(x0), 40, sched), math.sqrt(ab) * x0)
    assert np.allclose(add_noise(np.zeros_like(x0), eps, 40, sched), math.sqrt(1 - ab) * eps)


def test_add_noise_moments(rng):
    sched = make_schedule(1000)
    t, x0 = 300, 0.7
    ab = sched.alpha_bars[t]
    eps = rng.standard_normal(10_000)
    xt = add_noise(np.full(10_000, x0), eps, t, sched)
    n = len(xt)
    var = 1 - ab
    assert abs(xt.mean() - math.sqrt(ab) * x0) <= 3 * math.sqrt(var / n)
    # standard error of the sample variance for a Gaussian
    assert abs(xt.var(ddof=1) - var) <= 3 * var * math.sqrt(2 / (n - 1))


def test_predict_x0(rng):
    sched = make_schedule(1000)
    x0 = rng.choice([-1.0, 1.0], (4, 4, 4))
    eps = rng.standard_normal(x0.shape)
    for t in (0, 10, 500, 999):
        assert np.max(np.abs(predict_x0(add_noise(x0, eps, t, sched), eps, t, sched) - x0)) <= 1e-6
    xt = rng.standard_normal(5)
    assert np.allclose(predict_x0(xt, np.zeros(5), 7, sched), xt / math.sqrt(sched.alpha_bars[7]))
    ab = sched.alpha_bars[3]
    assert predict_x0(np.array([1.7 * math.sqrt(ab)]), np.zeros(1), 3, sched, clip=True)[0] == 1.0


def test_ddpm_step_cases(rng):
    sched = make_schedule(10)
    xt = rng.standard_normal(6)
    eps = rng.standard_normal(6)
    z = rng.standard_normal(6)
    mu0 = (xt - sched.betas[0] / math.sqrt(1 - sched.alpha_bars[0]) * eps) / math.sqrt(sched.alphas[0])
    assert np.array_equal(ddpm_step(xt, eps, 0, z, sched), mu0)
    t = 5
    sigma = math.sqrt(sched.betas[t] * (1 - sched.alpha_bars[t - 1]) / (1 - sched.alpha_bars[t]))
    assert np.allclose(ddpm_step(np.zeros(6), np.zeros(6), t, z, sched), sigma * z)


def test_ddpm_posterior_mean_one_voxel():
    # with the true noise, the step mean is the posterior mean of q(x_{t-1} | x_t, x_0)
    sched = make_schedule(4)
    x0, eps, t = 0.8, -0.3, 2
    ab, ab1, a, b = sched.alpha_bars[t], sched.alpha_bars[t - 1], sched.alphas[t], sched.betas[t]
    xt = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
    mean = (math.sqrt(ab1) * b / (1 - ab)) * x0 + (math.sqrt(a) * (1 - ab1) / (1 - ab)) * xt
    got = ddpm_step(np.array([xt]), np.array([eps]), t, np.zeros(1), sched)[0]
    assert got == pytest.approx(mean, abs=1e-12)


def test_ddim_step_cases(rng):
    sched = make_schedule(4)
    x0, eps = 0.6, 0.25
    t, tp = 3, 1
    xt = math.sqrt(sched.alpha_bars[t]) * x0 + math.sqrt(1 - sched.alpha_bars[t]) * eps
    # eta = 0 with the true noise lands exactly on the forward marginal at t_prev
    want = math.sqrt(sched.alpha_bars[tp]) * x0 + math.sqrt(1 - sched.alpha_bars[tp]) * eps
    got = ddim_step(np.array([xt]), np.array([eps]), t, tp, 0.0, None, sched)
    assert got[0] == pytest.approx(want, abs=1e-12)
    again = ddim_step(np.array([xt]), np.array([eps]), t, tp, 0.0, None, sched)
    assert np.array_equal(got, again)
    assert ddim_step(np.array([xt]), np.array([eps]), t, -1, 0.0, None, sched)[0] == pytest.approx(x0)
    with pytest.raises(ValueError):
        ddim_step(np.array([xt]), np.array([eps]), 1, 1, 0.0, None, sched)


def test_ddim_sigma_eta_one_matches_ddpm_variance():
    sched = make_schedule(20)
    t = 7
    s = ddim_sigma(t, t - 1, 1.0, sched)
    want = sched.betas[t] * (1 - sched.alpha_bars[t - 1]) / (1 - sched.alpha_bars[t])
    assert s * s == pytest.approx(want, rel=1e-12)


def test_ddim_clip_rederives_noise(rng):
    sched = make_schedule(100)
    xt = rng.standard_normal(50) * 3
    eps = rng.standard_normal(50)
    out = ddim_step(xt, eps, 60, 40, 0.0, None, sched, clip=True)
    x0 = np.clip(predict_x0(xt, eps, 60, sched), -1, 1)
    e2 = (xt - math.sqrt(sched.alpha_bars[60]) * x0) / math.sqrt(1 - sched.alpha_bars[60])
    want = math.sqrt(sched.alpha_bars[40]) * x0 + math.sqrt(1 - sched.alpha_bars[40]) * e2
    assert np.allclose(out, want)


def test_plan_layout():
    sched = make_schedule(1000)
    plan = make_plan(sched, 50)
    ts = [t for t, _ in plan.steps]
    assert len(ts) == 50 and ts[0] == 999 and ts[-1] == 19
    assert plan.steps[-1][1] == -1
    assert all(a - b == 20 for a, b in zip(ts, ts[1:]))
    full = make_plan(make_schedule(10), method="ddpm")
    assert [t for t, _ in full.steps] == list(range(9, -1, -1))
    with pytest.raises(ValueError):
        StepPlan(((5, 6), (6, -1)))
    with pytest.raises(ValueError):
        StepPlan(((5, 3),))
    with pytest.raises(ValueError):
        make_plan(sched, 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([4, 50, 1000]), st.integers(1, 50))
def test_oracle_ddim_recovers_x0(seed, T, n):
    r = np.random.default_rng(seed)
    sched = make_schedule(T)
    plan = make_plan(sched, min(n, T))
    x0 = r.uniform(-1, 1, (3, 3, 3))
    x = r.standard_normal(x0.shape)
    for t, tp in plan.steps:
        ab = sched.alpha_bars[t]
        eps = (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        x = ddim_step(x, eps, t, tp, 0.0, None, sched)
    assert np.max(np.abs(x - x0)) <= 1e-4
