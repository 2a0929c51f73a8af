"""Synthetic granular scenes by ballistic deposition.

Grains fall along -z onto a floor at z = 0, then roll laterally while that
lowers them; each is tried at a few random lateral positions and the lowest
rest wins.
The fall is resolved with a column heightmap, which is exact for a vertical
drop from above, and a voxel-overlap check guards the result.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from granogen.hull import convex_hull_float, inside_hull
from granogen.segment import LabelGrid
from granogen.voxcore import ArchiveEntry, VoxelGrid, encode_entry, extract_blocks, write_archive

log = logging.getLogger(__name__)

MAX_REJECTIONS = 200


@dataclass(frozen=True)
class SceneSpec:
    dims: tuple[int, int, int] = (24, 64, 64)
    pitch: float | None = None  # defaults to min_diam / 6
    grain_kind: str = "sphere"
    min_diam: float = 0.025
    max_diam: float = 0.05
    target_phi: float = 0.5
    seed: int = 0
    min_gap: int = 0  # empty voxels enforced between grains (Chebyshev)
    trials: int = 8
    max_grains: int | None = None

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"bad scene dims {self.dims}")
        if self.grain_kind not in ("sphere", "convex_poly"):
            raise ValueError(f"unknown grain kind {self.grain_kind!r}")
        if not 0 < self.min_diam <= self.max_diam:
            raise ValueError("need 0 < min_diam <= max_diam")
        if not 0 < self.target_phi <= 0.64:
            raise ValueError("target_phi must lie in (0, 0.64]")
        if self.pitch is not None and self.pitch <= 0:
            raise ValueError("pitch must be positive")
        if self.trials < 1 or self.min_gap < 0:
            raise ValueError("trials >= 1 and min_gap >= 0 required")

    @property
    def voxel_pitch(self) -> float:
        return self.pitch if self.pitch is not None else self.min_diam / 6.0


@dataclass
class Scene:
    grid: VoxelGrid
    labels: LabelGrid
    phi: float
    n_grains: int
    target_reached: bool


def _sphere(diam: float, rng) -> np.ndarray:
    r = diam / 2.0
    off = rng.uniform(-0.5, 0.5, size=3)
    n = int(np.ceil(2 * r + 2))
    c = (n - 1) / 2.0 + off
    z, y, x = np.ogrid[:n, :n, :n]
    m = (z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2 <= r * r
    return _crop(m)


def _convex_poly(diam: float, rng) -> np.ndarray:
    semi = diam / 2.0 * np.array([1.0, rng.uniform(0.55, 1.0), rng.uniform(0.4, 0.8)])
    k = int(rng.integers(8, 17))
    d = rng.normal(size=(k, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rot = Rotation.from_quat(rng.normal(size=4)).as_matrix()
    pts = (d * semi) @ rot.T
    verts, faces = convex_hull_float(pts)
    n = int(np.ceil(diam + 3))
    c = (n - 1) / 2.0 + rng.uniform(-0.5, 0.5, size=3)
    grid = np.argwhere(np.ones((n, n, n), dtype=bool)) - c
    m = inside_hull(verts, faces, grid, tol=1e-9).reshape(n, n, n)
    if not m.any():
        m[n // 2, n // 2, n // 2] = True
    return _crop(m)


def _crop(m: np.ndarray) -> np.ndarray:
    idx = np.argwhere(m)
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    return m[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]


def _bottom_profile(m: np.ndarray) -> np.ndarray:
    """Lowest occupied z per (y, x) column; large where the column is empty."""
    has = m.any(axis=0)
    lo = np.argmax(m, axis=0)
    return np.where(has, lo, 1 << 30)


def _landing(height, lo, pad, y0, x0) -> int:
    """Rest height of a grain dropped with its box corner at (y0, x0)."""
    ny, nx = height.shape
    ys, xs = y0 - pad, x0 - pad
    cy0, cx0 = max(ys, 0), max(xs, 0)
    cy1, cx1 = min(ys + lo.shape[0], ny), min(xs + lo.shape[1], nx)
    hm = height[cy0:cy1, cx0:cx1]
    lp = lo[cy0 - ys : cy1 - ys, cx0 - xs : cx1 - xs]
    # the inflated base sits ``pad`` below the grain; the floor needs no gap
    return max(int(np.max(hm - lp)) + pad, 0)


def _roll(height, lo, pad, y0, x0, gy, gx, max_moves=64):
    """Slide one voxel at a time while a lateral neighbour rests strictly lower."""
    ny, nx = height.shape
    z0 = _landing(height, lo, pad, y0, x0)
    for _ in range(max_moves):
        moved = False
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            y1, x1 = y0 + dy, x0 + dx
            if not (0 <= y1 <= ny - gy and 0 <= x1 <= nx - gx):
                continue
            z1 = _landing(height, lo, pad, y1, x1)
            if z1 < z0:
                z0, y0, x0, moved = z1, y1, x1, True
                break
        if not moved:
            break
    return z0, y0, x0


def generate_scene(spec: SceneSpec) -> Scene:
    """Deposit grains until ``target_phi`` (or MAX_REJECTIONS misses in a row)."""
    rng = np.random.default_rng(spec.seed)
    nz, ny, nx = spec.dims
    pitch = spec.voxel_pitch
    labels = np.zeros(spec.dims, dtype=np.int32)
    # heightmap of the gap-inflated occupancy: first free z per column
    height = np.zeros((ny, nx), dtype=np.int64)
    total = labels.size
    filled = 0
    count = 0
    misses = 0
    gap_struct = np.ones((3, 3, 3), dtype=bool)
    make = _sphere if spec.grain_kind == "sphere" else _convex_poly
    while filled / total < spec.target_phi and misses < MAX_REJECTIONS:
        if spec.max_grains is not None and count >= spec.max_grains:
            break
        diam = rng.uniform(spec.min_diam, spec.max_diam) / pitch
        g = make(diam, rng)
        gz, gy, gx = g.shape
        if spec.min_gap:
            inflated = ndimage.binary_dilation(
                np.pad(g, spec.min_gap), gap_struct, iterations=spec.min_gap
            )
        else:
            inflated = g
        pad = spec.min_gap
        lo = _bottom_profile(inflated)
        best = None
        if gy <= ny and gx <= nx:
            for _ in range(spec.trials):
                y0 = int(rng.integers(0, ny - gy + 1))
                x0 = int(rng.integers(0, nx - gx + 1))
                z0, y0, x0 = _roll(height, lo, pad, y0, x0, gy, gx)
                if z0 + gz > nz:
                    continue
                if best is None or z0 < best[0]:
                    best = (z0, y0, x0)
        if best is None:
            misses += 1
            continue
        misses = 0
        z0, y0, x0 = best
        region = labels[z0 : z0 + gz, y0 : y0 + gy, x0 : x0 + gx]
        if np.any(region[g]):
            raise AssertionError("deposition produced an overlap")
        count += 1
        region[g] = count
        filled += int(g.sum())
        # update heightmap with the inflated top surface
        top = np.where(inflated.any(axis=0), inflated.shape[0] - np.argmax(inflated[::-1], axis=0), 0)
        ys, xs = y0 - pad, x0 - pad
        cy0, cx0 = max(ys, 0), max(xs, 0)
        cy1, cx1 = min(ys + top.shape[0], ny), min(xs + top.shape[1], nx)
        t = top[cy0 - ys : cy1 - ys, cx0 - xs : cx1 - xs]
        cand = np.where(t > 0, z0 - pad + t, 0)
        height[cy0:cy1, cx0:cx1] = np.maximum(height[cy0:cy1, cx0:cx1], cand)
    phi = filled / total
    reached = phi >= spec.target_phi
    if not reached and (spec.max_grains is None or count < spec.max_grains):
        log.warning("scene seed=%d stopped at phi=%.4f below target %.4f", spec.seed, phi, spec.target_phi)
    grid = VoxelGrid((labels > 0).astype(np.uint8), pitch=pitch)
    return Scene(grid, LabelGrid(labels, pitch), phi, count, reached)


def make_dataset(spec: SceneSpec, count: int, block_dims, path=None) -> list[ArchiveEntry]:
    """``count`` scenes (seeds spec.seed, spec.seed+1, ...) cut into blocks.

    Entries are named ``s<scene>_b<block>`` and carry phi, seed and scene id.
    Writes an archive when ``path`` is given.
    """
    entries: list[ArchiveEntry] = []
    for s in range(count):
        seed = spec.seed + s
        scene = generate_scene(replace(spec, seed=seed))
        for b, block in enumerate(extract_blocks(scene.grid, block_dims)):
            meta = {
                "phi": float(block.data.mean()),
                "seed": seed,
                "scene_id": s,
                "scene_phi": scene.phi,
            }
            entries.append(encode_entry(block, f"s{s:04d}_b{b:03d}", meta))
    if path is not None:
        write_archive(path, entries)
    return entries

