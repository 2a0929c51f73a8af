"""Stitch blocks into long samples by inpainting the overlaps between them.

Adjacent blocks share ``O`` slices along the stitch axis, so N blocks of
depth D give N*(D-O)+O slices. Each shared zone is regenerated by an
inpainting job whose window is::

    [C slices before the zone | O masked slices | C slices after the zone]

The left context is read from the already-stitched output, so seams are
processed strictly left to right.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from granogen.denoiser import DenoiserNet
from granogen.repaint import InpaintTask, inpaint, sample_seeds
from granogen.sched import NoiseSchedule, StepPlan
from granogen.voxcore import MaskGrid, VoxelGrid, binarize

AXES = {"z": 0, "y": 1, "x": 2}


class SeamError(RuntimeError):
    def __init__(self, seam: int, cause: Exception):
        super().__init__(f"seam {seam}: {cause}")
        self.seam = seam


@dataclass(frozen=True)
class SeamSpec:
    axis: str = "x"
    depth: int = 32  # D, block length along the axis
    overlap: int = 16  # O, slices regenerated per seam
    context: int = 8  # C, known slices kept on each side

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of z, y, x; got {self.axis!r}")
        if not 0 < self.overlap < self.depth:
            raise ValueError(f"need 0 < overlap < depth, got O={self.overlap} D={self.depth}")
        if self.context < 1:
            raise ValueError("context must be >= 1")
        if self.overlap + self.context > self.depth:
            raise ValueError(
                f"context {self.context} + overlap {self.overlap} exceeds block depth {self.depth}"
            )

    @property
    def index(self) -> int:
        return AXES[self.axis]

    @property
    def window(self) -> int:
        return self.overlap + 2 * self.context

    def output_depth(self, n_blocks: int) -> int:
        return n_blocks * (self.depth - self.overlap) + self.overlap


def _front(a: np.ndarray, spec: SeamSpec) -> np.ndarray:
    return np.moveaxis(a, spec.index, 0)


def _check_blocks(blocks, axis: str, depth: int):
    if len(blocks) < 2:
        raise ValueError("need at least two blocks")
    ref = blocks[0].dims
    ax = AXES[axis]
    for i, b in enumerate(blocks):
        if b.kind != "binary":
            raise ValueError(f"block {i} is not binary")
        if b.dims[ax] != depth:
            raise ValueError(f"block {i} has depth {b.dims[ax]} along {axis}, expected {depth}")
        if tuple(d for k, d in enumerate(b.dims) if k != ax) != tuple(d for k, d in enumerate(ref) if k != ax):
            raise ValueError(f"block {i} dims {b.dims} do not match {ref} off-axis")


def _window(left: np.ndarray, right: np.ndarray, spec: SeamSpec):
    """Known data and mask for one seam, axis first. ``left``/``right`` are
    the C context slices on either side."""
    C, O = spec.context, spec.overlap
    shape = (spec.window,) + left.shape[1:]
    known = np.zeros(shape, dtype=np.uint8)
    known[:C] = left
    known[C + O:] = right
    mask = np.zeros(shape, dtype=np.uint8)
    mask[C:C + O] = 1
    return known, mask


def build_seam_job(
    block_a: VoxelGrid,
    block_b: VoxelGrid,
    spec: SeamSpec,
    plan: StepPlan,
    seed: int = 0,
    divisor: int = 1,
) -> InpaintTask:
    """Inpainting job for the zone shared by the end of ``block_a`` and the
    start of ``block_b``; context is A[D-O-C : D-O] and B[O : O+C]."""
    _check_blocks([block_a, block_b], spec.axis, spec.depth)
    if spec.window % divisor:
        raise ValueError(f"seam window {spec.window} not divisible by {divisor}")
    D, O, C = spec.depth, spec.overlap, spec.context
    a, b = _front(block_a.data, spec), _front(block_b.data, spec)
    known, mask = _window(a[D - O - C:D - O], b[O:O + C], spec)
    return _task(known, mask, spec, plan, seed, block_a)


def _task(known, mask, spec, plan, seed, like: VoxelGrid) -> InpaintTask:
    ax = spec.index
    known = np.moveaxis(known, 0, ax)
    mask = np.moveaxis(mask, 0, ax)
    return InpaintTask(VoxelGrid(np.ascontiguousarray(known), like.pitch), MaskGrid(mask), plan, seed)


def stitch_sequence(
    blocks: list[VoxelGrid],
    spec: SeamSpec,
    net: DenoiserNet,
    sched: NoiseSchedule,
    plan: StepPlan,
    seed: int = 0,
    clip: bool = True,
) -> VoxelGrid:
    """Join ``blocks`` along ``spec.axis``; seam i uses seed ``sample_seeds(seed, N-1)[i]``."""
    _check_blocks(blocks, spec.axis, spec.depth)
    if spec.window % net.config.divisor:
        raise ValueError(f"seam window {spec.window} not divisible by {net.config.divisor}")
    D, O, C = spec.depth, spec.overlap, spec.context
    n = len(blocks)
    first = _front(blocks[0].data, spec)
    out = np.zeros((spec.output_depth(n),) + first.shape[1:], dtype=np.uint8)
    out[:D] = first
    seeds = sample_seeds(seed, n - 1)
    for i in range(1, n):
        start = i * (D - O)
        cur = _front(blocks[i].data, spec)
        out[start + O:start + D] = cur[O:]
        known, mask = _window(out[start - C:start], cur[O:O + C], spec)
        try:
            filled = inpaint(net, sched, _task(known, mask, spec, plan, seeds[i - 1], blocks[0]), clip=clip)
        except Exception as exc:
            raise SeamError(i - 1, exc) from exc
        out[start:start + O] = _front(filled.data, spec)[C:C + O]
    return VoxelGrid(np.ascontiguousarray(np.moveaxis(out, 0, spec.index)), blocks[0].pitch, blocks[0].origin)


def blend_average(blocks: list[VoxelGrid], overlap: int, axis: str = "x") -> VoxelGrid:
    """Baseline join: overlaps become the mean of the two +-1 signals, binarized.

    A tie (one block occupied, the other empty) averages to 0 and maps to empty.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of z, y, x; got {axis!r}")
    if not blocks:
        raise ValueError("need at least two blocks")
    ax = AXES[axis]
    D, O = blocks[0].dims[ax], overlap
    if not 0 < O < D:
        raise ValueError(f"need 0 < overlap < depth, got O={O} D={D}")
    _check_blocks(blocks, axis, D)
    n = len(blocks)
    first = np.moveaxis(blocks[0].data, ax, 0)
    out = np.zeros((n * (D - O) + O,) + first.shape[1:], dtype=np.uint8)
    out[:D] = first
    for i in range(1, n):
        start = i * (D - O)
        cur = np.moveaxis(blocks[i].data, ax, 0)
        prev = out[start:start + O].astype(np.float64) * 2 - 1
        mean = (prev + (cur[:O].astype(np.float64) * 2 - 1)) / 2.0
        out[start:start + O] = binarize(mean)
        out[start + O:start + D] = cur[O:]
    return VoxelGrid(np.ascontiguousarray(np.moveaxis(out, 0, ax)), blocks[0].pitch, blocks[0].origin)


def stitch_lattice(
    blocks,
    specs: dict[str, SeamSpec],
    net: DenoiserNet,
    sched: NoiseSchedule,
    plan: StepPlan,
    seed: int = 0,
    clip: bool = True,
) -> VoxelGrid:
    """Stitch a nested [z][y][x] list of blocks: x rows first, then y, then z.

    ``specs`` maps each axis with more than one block to its SeamSpec; the
    y and z specs refer to the depths of the partially stitched pieces,
    which equal the original block depths along those axes.
    """
    grid = [[list(row) for row in plane] for plane in blocks]
    seq = iter(sample_seeds(seed, 4096))

    def join(items, axis):
        if len(items) == 1:
            return items[0]
        return stitch_sequence(items, specs[axis], net, sched, plan, next(seq), clip)

    planes = []
    for plane in grid:
        rows = [join(row, "x") for row in plane]
        planes.append(join(rows, "y"))
    return join(planes, "z")
