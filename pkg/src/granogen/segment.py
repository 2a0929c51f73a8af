"""Grain segmentation: distance map, markers, priority-flood watershed,
per-grain refinement and polyhedral export.

Connectivity conventions: maxima use the 26-neighborhood; flooding,
erosion and surface extraction use the 6-neighborhood.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from granogen import kernels
from granogen.edt import edt
from granogen.hull import DegenerateHull, convex_hull, convex_hull_float
from granogen.voxcore import VoxelGrid

log = logging.getLogger(__name__)

CONN6 = ndimage.generate_binary_structure(3, 1)
CONN26 = np.ones((3, 3, 3), dtype=bool)
MIN_ERODE_VOXELS = 8


@dataclass
class LabelGrid:
    labels: np.ndarray
    pitch: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 3:
            raise ValueError("labels must be 3D")
        if self.labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")

    @property
    def dims(self):
        return tuple(int(d) for d in self.labels.shape)

    @property
    def count(self) -> int:
        return int(self.labels.max(initial=0))


@dataclass
class Grain:
    label: int
    voxels: np.ndarray  # (n, 3) grid indices (z, y, x)
    centroid: np.ndarray  # meters, (z, y, x)
    volume: float  # m^3
    axis_lengths: np.ndarray  # meters, descending
    axes: np.ndarray  # rows are unit principal directions, (z, y, x)
    hull_vertices: np.ndarray  # meters, (x, y, z) mesh convention
    hull_faces: np.ndarray


@dataclass
class GrainSet:
    grains: list[Grain] = field(default_factory=list)
    pitch: float = 1.0
    dropped: int = 0

    def __len__(self):
        return len(self.grains)

    def __iter__(self):
        return iter(self.grains)


def distance_map(grid: VoxelGrid) -> np.ndarray:
    """Distance (voxel units) from each foreground voxel to the nearest background voxel."""
    fg = np.asarray(grid.data if isinstance(grid, VoxelGrid) else grid).astype(bool)
    if not fg.any():
        raise ValueError("distance map of an all-background grid")
    if fg.all():
        raise ValueError("distance map undefined: grid has no background voxel")
    return edt(~fg)


def find_markers(dist: np.ndarray, min_distance: float = 3.0, min_height: float = 1.5) -> np.ndarray:
    """Regional maxima of ``dist``, thinned by non-maximum suppression.

    Each flat maximal plateau (26-connected) yields one candidate: its voxel
    nearest the plateau centroid, ties to the lowest linear index. Candidates
    are visited by decreasing height (then linear index) and dropped when
    closer than ``min_distance`` to one already kept. Returns (K, 3) indices.
    """
    dist = np.asarray(dist, dtype=np.float64)
    maxf = ndimage.maximum_filter(dist, footprint=CONN26, mode="constant", cval=-np.inf)
    cand = (dist == maxf) & (dist >= min_height) & (dist > 0)
    comp, n = ndimage.label(cand, structure=CONN26)
    peaks = []
    for k, sl in enumerate(ndimage.find_objects(comp), 1):
        if sl is None:
            continue
        grown = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in sl)
        local = comp[grown] == k
        value = dist[grown][local][0]
        ring = ndimage.binary_dilation(local, CONN26) & ~local
        # an equal-valued neighbour outside the plateau means a higher voxel lies beyond it
        if np.any(ring & (dist[grown] == value) & ~cand[grown]):
            continue
        idx = np.argwhere(local) + [s.start for s in grown]
        centre = idx.mean(axis=0)
        d2 = ((idx - centre) ** 2).sum(axis=1)
        best = idx[d2 == d2.min()]
        lin = np.ravel_multi_index(best.T, dist.shape)
        pick = best[np.argmin(lin)]
        peaks.append((value, int(np.ravel_multi_index(tuple(pick), dist.shape)), pick))
    peaks.sort(key=lambda p: (-p[0], p[1]))
    kept: list[np.ndarray] = []
    for _, _, p in peaks:
        if kept and np.min(np.sqrt(((np.array(kept) - p) ** 2).sum(axis=1))) < min_distance:
            continue
        kept.append(p)
    return np.array(kept, dtype=np.int64).reshape(-1, 3)


def watershed(
    dist: np.ndarray,
    markers,
    foreground: np.ndarray,
    valleys: np.ndarray | None = None,
    valley_weight: float = 0.5,
) -> np.ndarray:
    """Marker-driven priority flood on ``-dist`` over the foreground.

    Marker k (0-based, in the given order) becomes label k+1. With an sdf
    field in [-1, 1], voxels near its zero level are delayed by
    ``valley_weight * (1 - |sdf|)`` so basins meet along contact valleys.
    Foreground voxels unreachable from any marker stay 0.
    """
    fg = np.asarray(foreground).astype(bool)
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape != fg.shape:
        raise ValueError("dist and foreground shapes differ")
    prio = -dist
    if valleys is not None:
        valleys = np.asarray(valleys, dtype=np.float64)
        if valleys.shape != fg.shape:
            raise ValueError("valley field shape differs")
        prio = prio + valley_weight * (1.0 - np.abs(valleys))
    labels = np.zeros(fg.shape, dtype=np.int32)
    markers = np.asarray(markers, dtype=np.int64).reshape(-1, 3)
    for k, (z, y, x) in enumerate(markers):
        if not fg[z, y, x]:
            raise ValueError(f"marker {k} at {(int(z), int(y), int(x))} lies on background")
        if labels[z, y, x]:
            raise ValueError(f"duplicate marker at {(int(z), int(y), int(x))}")
        labels[z, y, x] = k + 1
    flat = labels.reshape(-1)
    kernels.flood(
        np.ascontiguousarray(prio, dtype=np.float64).reshape(-1),
        flat,
        np.ascontiguousarray(fg, dtype=np.uint8).reshape(-1),
        fg.shape,
    )
    return flat.reshape(fg.shape)


def segment(
    grid: VoxelGrid,
    min_distance: float = 3.0,
    min_height: float = 1.5,
    valleys: VoxelGrid | np.ndarray | None = None,
    valley_weight: float = 0.5,
) -> LabelGrid:
    """Full pass: distance map, markers, watershed.

    Foreground components (6-connected) that received no marker get one at
    their deepest voxel so every foreground voxel ends up labeled.
    """
    fg = grid.data.astype(bool)
    if not fg.any():
        return LabelGrid(np.zeros(grid.dims, dtype=np.int32), grid.pitch, grid.origin)
    dist = distance_map(grid)
    markers = find_markers(dist, min_distance, min_height)
    comp, n = ndimage.label(fg, structure=CONN6)
    seeded = set(comp[tuple(markers.T)].tolist()) if len(markers) else set()
    extra = []
    for k, sl in enumerate(ndimage.find_objects(comp), 1):
        if k in seeded or sl is None:
            continue
        local = np.where(comp[sl] == k, dist[sl], -1.0)
        pos = np.unravel_index(int(np.argmax(local)), local.shape)
        extra.append([p + s.start for p, s in zip(pos, sl)])
    if extra:
        markers = np.concatenate([markers, np.array(extra, dtype=np.int64)])
    if isinstance(valleys, VoxelGrid):
        valleys = valleys.data
    labels = watershed(dist, markers, fg, valleys, valley_weight)
    return LabelGrid(labels, grid.pitch, grid.origin)


# per-grain geometry


def _surface(vox: np.ndarray) -> np.ndarray:
    return vox & ~ndimage.binary_erosion(vox, CONN6, border_value=0)


_FACES = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
_CORNERS = np.array([[a, b, c] for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)])


def _voxel_hull(vox: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hull of the surface voxels in local voxel units (z, y, x).

    Each surface voxel contributes its six face centers, so the hull spans the
    voxels rather than shrinking half a voxel inside them. Inputs whose voxel
    centers are coplanar fall back to the voxel corners (one voxel -> a cube).
    Work is done in doubled integer coordinates to keep the hull exact.
    """
    pts = np.argwhere(_surface(vox))
    try:
        convex_hull(pts)
        offsets = _FACES
    except DegenerateHull:
        pts, offsets = np.argwhere(vox), _CORNERS
    doubled = (2 * pts[:, None, :] + offsets[None]).reshape(-1, 3)
    v, f = convex_hull(np.unique(doubled, axis=0))
    return v.astype(np.float64) / 2.0, f


def _smooth(verts, faces, support, iters):
    """Laplacian averaging over the hull's vertex graph, kept inside ``support``."""
    nbrs = [set() for _ in range(len(verts))]
    for a, b, c in faces:
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    nbrs = [sorted(s) for s in nbrs]
    v = verts.copy()
    hi = np.array(support.shape) - 1
    for _ in range(iters):
        moved = np.array([v[n].mean(axis=0) for n in nbrs])
        cell = np.clip(np.round(moved).astype(int), 0, hi)
        ok = support[tuple(cell.T)]
        v = np.where(ok[:, None], moved, v)
    try:
        return convex_hull_float(v)
    except DegenerateHull:
        return verts, faces


def refine_grains(labels: LabelGrid, erosion_steps: int = 0, smoothing_iters: int = 0) -> GrainSet:
    """Per-grain geometry after optional erosion and hull smoothing.

    Grains under 8 voxels are never eroded; grains that erode away are
    dropped and counted in ``GrainSet.dropped``.
    """
    lab = labels.labels
    pitch = labels.pitch
    origin = np.asarray(labels.origin)
    out = GrainSet(pitch=pitch)
    for k, sl in enumerate(ndimage.find_objects(lab), 1):
        if sl is None:
            continue
        pad = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in sl)
        vox = lab[pad] == k
        if erosion_steps and vox.sum() >= MIN_ERODE_VOXELS:
            vox = ndimage.binary_erosion(vox, CONN6, iterations=erosion_steps, border_value=0)
            if not vox.any():
                out.dropped += 1
                continue
        base = np.array([s.start for s in pad])
        idx = np.argwhere(vox)
        centers = idx + base + 0.5
        centroid = origin + centers.mean(axis=0) * pitch
        cov = np.cov((idx * pitch).T, bias=True) if len(idx) > 1 else np.zeros((3, 3))
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        hv, hf = _voxel_hull(vox)
        if smoothing_iters:
            support = ndimage.binary_dilation(np.pad(vox, 1), CONN26)
            sv, hf = _smooth(hv + 1.0, hf, support, smoothing_iters)
            hv = sv - 1.0
        world = origin + (hv + base + 0.5) * pitch
        out.grains.append(
            Grain(
                label=k,
                voxels=idx + base,
                centroid=centroid,
                volume=float(len(idx)) * pitch**3,
                axis_lengths=2.0 * np.sqrt(evals),
                axes=evecs[:, order].T,
                # (z, y, x) -> (x, y, z) is a reflection, so flip the winding too
                hull_vertices=world[:, ::-1].copy(),
                hull_faces=hf[:, ::-1].copy(),
            )
        )
    if out.dropped:
        log.warning("%d grains vanished under erosion and were dropped", out.dropped)
    return out


def export_grains(grains: GrainSet, format: str = "tri_list") -> bytes:
    """Plain-text polyhedra, coordinates in meters with 9 decimals.

    ``tri_list``: per grain a ``g <label>`` line, its ``v x y z`` lines and
    ``f i j k`` lines (1-indexed over the whole file).
    ``polyhedron_table``: per grain ``grain <label>``, ``vertices <n>`` with
    n coordinate rows, ``faces <m>`` with m rows of 0-based local indices.
    """
    if len(grains) == 0:
        raise ValueError("no grains to export")
    lines = []
    if format == "tri_list":
        base = 1
        for g in grains:
            lines.append(f"g {g.label}")
            lines.extend("v {:.9f} {:.9f} {:.9f}".format(*p) for p in g.hull_vertices)
            lines.extend("f {} {} {}".format(*(f + base)) for f in g.hull_faces)
            base += len(g.hull_vertices)
    elif format == "polyhedron_table":
        lines.append("# polyhedron_table v1")
        for g in grains:
            lines.append(f"grain {g.label}")
            lines.append(f"vertices {len(g.hull_vertices)}")
            lines.extend("{:.9f} {:.9f} {:.9f}".format(*p) for p in g.hull_vertices)
            lines.append(f"faces {len(g.hull_faces)}")
            lines.extend("{} {} {}".format(*f) for f in g.hull_faces)
    else:
        raise ValueError(f"unknown export format {format!r}")
    return ("\n".join(lines) + "\n").encode()
