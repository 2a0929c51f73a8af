"""Reverse diffusion: unconditional sampling and masked inpainting.

Inpainting follows the compositing recipe without resampling loops: every
step denoises the whole window with the 3-channel net, re-noises the known
data to the next noise level and pastes it over the known voxels. The last
step pastes the clean known data, so known voxels come out exactly as given.
Compositing is a voxel select rather than a blend, so it holds even if the
net produces non-finite values.

The net is evaluated one sample at a time, which makes a batch bitwise equal
to the same samples run separately.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from granogen.denoiser import DenoiserNet, predict_noise
from granogen.sched import NoiseSchedule, StepPlan, ddim_step, ddpm_step
from granogen.voxcore import MaskGrid, VoxelGrid, binarize


@dataclass
class InpaintTask:
    known: VoxelGrid  # binary or +-1 signal; values under the mask are ignored
    mask: MaskGrid  # 1 = generate
    plan: StepPlan
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.mask, MaskGrid):
            self.mask = MaskGrid(self.mask)
        if self.known.dims != self.mask.dims:
            raise ValueError(f"known dims {self.known.dims} differ from mask dims {self.mask.dims}")


def _signal(grid: VoxelGrid) -> np.ndarray:
    if grid.kind == "binary":
        return grid.data.astype(np.float64) * 2.0 - 1.0
    if grid.kind == "signal":
        return np.asarray(grid.data, dtype=np.float64)
    raise ValueError(f"cannot inpaint a {grid.kind} grid")


def sample_seeds(seed: int, batch: int) -> list[int]:
    """Per-sample seeds derived from one run seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(batch)]


def _check_dims(net: DenoiserNet, dims):
    div = net.config.divisor
    if len(dims) != 3 or any(int(d) % div for d in dims):
        raise ValueError(f"dims {tuple(dims)} must be 3D and divisible by {div}")


def _step(x, eps, t, t_prev, plan: StepPlan, z, sched, clip):
    if plan.method == "ddpm":
        return ddpm_step(x, eps, t, z, sched)
    return ddim_step(x, eps, t, t_prev, plan.eta, z, sched, clip=clip)


def _denoise_one(net, sched, plan, dims, rng, clip):
    x = rng.standard_normal(dims)
    for t, t_prev in plan.steps:
        eps = predict_noise(net, x[None, None], t)[0, 0]
        z = rng.standard_normal(dims)
        x = _step(x, eps, t, t_prev, plan, z, sched, clip)
    return x


def sample_unconditional(
    net: DenoiserNet,
    sched: NoiseSchedule,
    plan: StepPlan,
    dims,
    batch: int = 1,
    seed: int = 0,
    seeds: list[int] | None = None,
    clip: bool = True,
    pitch: float = 1.0,
) -> list[VoxelGrid]:
    """Draw ``batch`` binary grids. Sample i uses seed ``seeds[i]``
    (default ``sample_seeds(seed, batch)``)."""
    if net.config.in_channels != 1:
        raise ValueError("unconditional sampling needs a 1-channel net")
    dims = tuple(int(d) for d in dims)
    _check_dims(net, dims)
    if seeds is None:
        seeds = sample_seeds(seed, batch)
    elif len(seeds) != batch:
        raise ValueError("need one seed per sample")
    out = []
    for s in seeds:
        x0 = _denoise_one(net, sched, plan, dims, np.random.default_rng(s), clip)
        out.append(VoxelGrid(binarize(x0), pitch))
    return out


def inpaint(net: DenoiserNet, sched: NoiseSchedule, task: InpaintTask, clip: bool = True) -> VoxelGrid:
    """Fill the masked voxels of ``task.known``; known voxels pass through unchanged."""
    known = _signal(task.known)
    m = task.mask.data.astype(np.float64)
    grid_out = dict(pitch=task.known.pitch, origin=task.known.origin)
    if not m.any():
        return VoxelGrid(binarize(known), **grid_out)
    if net.config.in_channels != 3:
        raise ValueError("inpainting needs a 3-channel net")
    dims = known.shape
    _check_dims(net, dims)
    rng = np.random.default_rng(task.seed)
    unknown = task.mask.data.astype(bool)
    context = np.where(unknown, 0.0, known)
    x = rng.standard_normal(dims)
    plan = task.plan
    for t, t_prev in plan.steps:
        eps = predict_noise(net, np.stack([x, m, context])[None], t)[0, 0]
        z = rng.standard_normal(dims)
        x_prev = _step(x, eps, t, t_prev, plan, z, sched, clip)
        if t_prev == -1:
            x = np.where(unknown, x_prev, known)
            break
        ab = sched.alpha_bar(t_prev)
        noisy_known = np.sqrt(ab) * known + np.sqrt(1.0 - ab) * rng.standard_normal(dims)
        x = np.where(unknown, x_prev, noisy_known)
    return VoxelGrid(binarize(x), **grid_out)
