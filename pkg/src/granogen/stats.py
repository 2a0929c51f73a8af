"""Macroscopic and per-grain statistics of an assembly, plus dashboards.

The JSON dashboard stores floats in shortest round-trip form so parsing it
reproduces every value bit for bit. Reference values from ballast DEM
assemblies are attached as annotations only.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from granogen.segment import GrainSet, LabelGrid
from granogen.voxcore import VoxelGrid

CDF_POINTS = 64
DASHBOARD_VERSION = 1

REFERENCE = {
    "packing_density": 0.62,
    "coordination_first_order": 5.77,
    "coordination_second_order": 6.41,
    "p50_m": 0.0192,
    "p90_m": 0.0240,
    "mean_aspect_ratio": 8.74,
    "elongated_count": 4066,
}

DEFINITIONS = {
    "coordination_second_order": "mean number of grains reachable within two contact hops, excluding self",
    "aspect_ratio": "longest / shortest principal axis of the voxel-center covariance, shortest floored at one voxel",
    "contact": "Chebyshev voxel distance <= tolerance between two grains",
    "percentile": "linear interpolation between order statistics",
}


def packing_density(grid: VoxelGrid, region=None) -> float:
    """Foreground fraction, optionally inside ``region = ((z0, y0, x0), (z1, y1, x1))``."""
    data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid)
    if region is not None:
        (z0, y0, x0), (z1, y1, x1) = region
        data = data[z0:z1, y0:y1, x0:x1]
    if data.size == 0:
        raise ValueError("empty region")
    return float(np.count_nonzero(data)) / data.size


def contact_graph(labels: LabelGrid, tolerance: int = 1) -> dict[int, set[int]]:
    """Adjacency over labels 1..K: i~j when voxels lie within ``tolerance`` (Chebyshev)."""
    lab = labels.labels if isinstance(labels, LabelGrid) else np.asarray(labels)
    k = int(lab.max(initial=0))
    adj: dict[int, set[int]] = {i: set() for i in range(1, k + 1)}
    if k < 2:
        return adj
    t = int(tolerance)
    shape = lab.shape
    pairs = []
    r = range(-t, t + 1)
    # half of the offset cube suffices since contact is symmetric
    offsets = [o for o in ((a, b, c) for a in r for b in r for c in r) if o > (0, 0, 0)]
    for off in offsets:
        src = tuple(slice(max(0, -d), shape[i] - max(0, d)) for i, d in enumerate(off))
        dst = tuple(slice(max(0, d), shape[i] - max(0, -d)) for i, d in enumerate(off))
        a, b = lab[src], lab[dst]
        hit = (a != b) & (a > 0) & (b > 0)
        if hit.any():
            pairs.append(np.stack([a[hit], b[hit]], axis=1))
    if pairs:
        p = np.unique(np.sort(np.concatenate(pairs), axis=1), axis=0)
        for i, j in p.tolist():
            adj[i].add(j)
            adj[j].add(i)
    return adj


def _reach(adj):
    first, second = {}, {}
    for i, n in adj.items():
        reach = set(n)
        for j in n:
            reach |= adj[j]
        reach.discard(i)
        first[i] = len(n)
        second[i] = len(reach)
    return first, second


def coordination(adj: dict[int, set[int]]) -> tuple[float, float]:
    """(mean degree, mean 2-hop reach excluding self)."""
    if not adj:
        return 0.0, 0.0
    first, second = _reach(adj)
    return float(np.mean(list(first.values()))), float(np.mean(list(second.values())))


@dataclass
class Granulometry:
    diameters: np.ndarray
    p50: float
    p90: float
    cdf_x: np.ndarray
    cdf_y: np.ndarray


def granulometry(grains: GrainSet) -> Granulometry:
    if len(grains) == 0:
        raise ValueError("granulometry of an empty grain set")
    vols = np.array([g.volume for g in grains], dtype=np.float64)
    d = np.cbrt(6.0 * vols / np.pi)
    p50, p90 = np.percentile(d, [50, 90], method="linear")
    xs = np.linspace(d.min(), d.max(), CDF_POINTS)
    ds = np.sort(d)
    ys = np.searchsorted(ds, xs, side="right") / len(ds)
    return Granulometry(d, float(p50), float(p90), xs, ys)


@dataclass
class AspectRatios:
    ratios: np.ndarray
    mean: float
    elongated: int


def aspect_ratios(grains: GrainSet) -> AspectRatios:
    """Longest over shortest principal axis, both floored at one voxel.

    The floor keeps thin or tiny grains finite (a lone voxel has AR 1).
    """
    if len(grains) == 0:
        return AspectRatios(np.zeros(0), 0.0, 0)
    floor = grains.pitch
    ar = np.array([max(g.axis_lengths[0], floor) / max(g.axis_lengths[-1], floor) for g in grains])
    return AspectRatios(ar, float(ar.mean()), int(np.count_nonzero(ar > 2.0)))


@dataclass
class AssemblyReport:
    packing_density: float
    grain_count: int = 0
    coordination: dict | None = None
    granulometry: dict | None = None
    shape: dict | None = None
    per_grain: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": DASHBOARD_VERSION,
            "packing_density": self.packing_density,
            "grain_count": self.grain_count,
            "coordination": self.coordination,
            "granulometry": self.granulometry,
            "shape": self.shape,
            "definitions": DEFINITIONS,
            "reference_annotations": REFERENCE,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        # repr-style floats (json default) round-trip exactly
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["label", "volume_m3", "diameter_m", "centroid_z_m", "centroid_y_m", "centroid_x_m",
                "axis1_m", "axis2_m", "axis3_m", "aspect_ratio", "degree", "second_order"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.per_grain:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
        return buf.getvalue()


def report(grid: VoxelGrid, labels: LabelGrid | None, grains: GrainSet | None,
           tolerance: int = 1, provenance: dict | None = None) -> AssemblyReport:
    """Everything at once; each field comes from the corresponding single op."""
    phi = packing_density(grid)
    rep = AssemblyReport(packing_density=phi, provenance=dict(provenance or {}))
    if labels is None or grains is None or labels.count == 0 or len(grains) == 0:
        return rep
    adj = contact_graph(labels, tolerance)
    c1, c2 = coordination(adj)
    f1, f2 = _reach(adj)
    gran = granulometry(grains)
    ar = aspect_ratios(grains)
    rep.grain_count = len(grains)
    rep.coordination = {
        "first_order_mean": c1,
        "second_order_mean": c2,
        "first_order": [f1.get(g.label, 0) for g in grains],
        "second_order": [f2.get(g.label, 0) for g in grains],
        "tolerance_voxels": tolerance,
    }
    rep.granulometry = {
        "diameters_m": gran.diameters.tolist(),
        "p50_m": gran.p50,
        "p90_m": gran.p90,
        "cdf_diameter_m": gran.cdf_x.tolist(),
        "cdf_fraction": gran.cdf_y.tolist(),
    }
    rep.shape = {
        "aspect_ratios": ar.ratios.tolist(),
        "mean_aspect_ratio": ar.mean,
        "elongated_count": ar.elongated,
        "definition": "principal_axes",
    }
    for g, d, a in zip(grains, gran.diameters.tolist(), ar.ratios.tolist()):
        rep.per_grain.append({
            "label": g.label,
            "volume_m3": float(g.volume),
            "diameter_m": d,
            "centroid_z_m": float(g.centroid[0]),
            "centroid_y_m": float(g.centroid[1]),
            "centroid_x_m": float(g.centroid[2]),
            "axis1_m": float(g.axis_lengths[0]),
            "axis2_m": float(g.axis_lengths[1]),
            "axis3_m": float(g.axis_lengths[2]),
            "aspect_ratio": a,
            "degree": f1.get(g.label, 0),
            "second_order": f2.get(g.label, 0),
        })
    return rep
