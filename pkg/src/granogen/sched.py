"""Noise schedules and the forward/reverse diffusion updates.

All functions are pure and operate on float64 numpy arrays of any shape.
Timesteps are 0-based: ``t`` in [0, T). ``t_prev = -1`` denotes the clean
sample, for which the cumulative product is taken as 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at ``t``; ``t == -1`` gives 1."""
        if t == -1:
            return 1.0
        _check_t(t, self)
        return float(self.alpha_bars[t])


@dataclass(frozen=True)
class StepPlan:
    steps: tuple[tuple[int, int], ...]
    eta: float = 0.0
    method: str = "ddim"

    def __post_init__(self):
        if not self.steps:
            raise ValueError("empty step plan")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.method not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.method!r}")
        ts = [t for t, _ in self.steps]
        if any(a <= b for a, b in zip(ts, ts[1:])):
            raise ValueError("plan timesteps must be strictly decreasing")
        for t, tp in self.steps:
            if tp >= t:
                raise ValueError(f"t_prev {tp} must precede t {t}")
        if self.steps[-1][1] != -1:
            raise ValueError("plan must end at t_prev = -1")


def _cosine_f(u: float, T: int) -> float:
    return math.cos(((u / T + COSINE_OFFSET) / (1 + COSINE_OFFSET)) * math.pi / 2) ** 2


def make_schedule(T: int, kind: str = "squaredcos") -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "squaredcos":
        f0 = _cosine_f(0.0, T)
        bars = [_cosine_f(t + 1.0, T) / f0 for t in range(T)]
        prev = [1.0] + bars[:-1]
        betas = np.array([min(1.0 - b / p, MAX_BETA) for b, p in zip(bars, prev)])
    elif kind == "linear":
        betas = np.linspace(1e-4, 2e-2, T) if T > 1 else np.array([1e-4])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T, betas, alphas, alpha_bars, kind)


def make_plan(sched: NoiseSchedule, n_steps: int = 50, eta: float = 0.0, method: str = "ddim") -> StepPlan:
    """Evenly spaced inference timesteps, starting from t = T-1.

    ``method="ddpm"`` ignores ``n_steps`` and walks every timestep.
    """
    T = sched.T
    if method == "ddpm":
        ts = list(range(T - 1, -1, -1))
    else:
        if not 1 <= n_steps <= T:
            raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
        ts = [int(round(T - k * T / n_steps)) - 1 for k in range(n_steps)]
    pairs = tuple(zip(ts, ts[1:] + [-1]))
    return StepPlan(pairs, eta, method)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t < sched.T:
        raise ValueError(f"timestep {t} out of range [0, {sched.T})")


def add_noise(x0, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Sample q(x_t | x_0) with the supplied Gaussian draw ``eps``."""
    _check_t(t, sched)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {eps.shape}")
    ab = sched.alpha_bars[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(xt, eps_hat, t: int, sched: NoiseSchedule, clip: bool = False) -> np.ndarray:
    _check_t(t, sched)
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if xt.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {xt.shape} vs {eps_hat.shape}")
    ab = sched.alpha_bars[t]
    x0 = (xt - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if clip:
        x0 = np.clip(x0, -1.0, 1.0)
    return x0


def ddpm_step(xt, eps_hat, t: int, z, sched: NoiseSchedule) -> np.ndarray:
    """Ancestral step with the posterior variance; ``z`` is ignored at t = 0."""
    _check_t(t, sched)
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    beta = sched.betas[t]
    ab = sched.alpha_bars[t]
    mean = (xt - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(sched.alphas[t])
    if t == 0:
        return mean
    var = beta * (1.0 - sched.alpha_bars[t - 1]) / (1.0 - ab)
    return mean + math.sqrt(var) * np.asarray(z, dtype=np.float64)


def ddim_sigma(t: int, t_prev: int, eta: float, sched: NoiseSchedule) -> float:
    ab = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)


def ddim_step(
    xt, eps_hat, t: int, t_prev: int, eta: float, z, sched: NoiseSchedule, clip: bool = False
) -> np.ndarray:
    """Generalized DDIM update from ``t`` to ``t_prev``.

    With ``clip`` the predicted clean sample is clamped to [-1, 1] and the
    noise direction is re-derived from it, keeping the update consistent.
    """
    _check_t(t, sched)
    if t_prev >= t or t_prev < -1:
        raise ValueError(f"t_prev {t_prev} must be in [-1, {t})")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x0 = predict_x0(xt, eps_hat, t, sched, clip=clip)
    if t_prev == -1:
        return x0
    ab = sched.alpha_bars[t]
    if clip:
        eps_hat = (xt - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
    ab_prev = sched.alpha_bars[t_prev]
    sigma = ddim_sigma(t, t_prev, eta, sched)
    direction = 1.0 - ab_prev - sigma * sigma
    if direction < 0:
        raise ValueError(f"sigma^2 {sigma * sigma} exceeds 1 - alpha_bar_prev")
    out = math.sqrt(ab_prev) * x0 + math.sqrt(direction) * eps_hat
    if sigma > 0:
        out = out + sigma * np.asarray(z, dtype=np.float64)
    return out
