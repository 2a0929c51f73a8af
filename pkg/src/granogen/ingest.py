"""Mesh parsing, z-slicing, scanline rasterization and voxelization.

Two text formats are read:

``tri_list``
    ``v x y z`` vertex lines and ``f i j k`` faces (1-indexed, global),
    with optional ``g <id>`` lines that set the grain id of following faces.
    ``#`` starts a comment.

``grid_xml_subset``
    An ASCII subset of the VTK XML UnstructuredGrid format: one Piece with
    ``Points`` (Float32/Float64, 3 components) and ``Cells`` carrying
    ``connectivity``, ``offsets`` and ``types`` arrays, triangle cells
    (type 5) only. An optional integer ``CellData`` array named ``grain``
    (or ``GrainId``) groups triangles into grains.

Mesh coordinates are (x, y, z) in meters; grids are indexed (z, y, x).
"""
from __future__ import annotations

import math
import xml.parsers.expat
from dataclasses import dataclass, field

import numpy as np

from granogen.edt import edt
from granogen.voxcore import VoxelGrid

AREA_TOL = 1e-12
MATCH_TOL = 1e-9


class MeshFormatError(ValueError):
    """Parse failure; ``code`` names the failure class, ``line`` the input line."""

    def __init__(self, code: str, message: str, line: int | None = None, offset: int | None = None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", offset {offset})" if offset is not None else ")")
        super().__init__(f"{message}{where}")
        self.code = code
        self.line = line
        self.offset = offset


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    groups: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise MeshError("triangle index out of range")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64).reshape(-1)
            if len(self.groups) != len(self.triangles):
                raise MeshError("one group id per triangle required")
        if len(self.triangles):
            areas = self.areas()
            bad = np.flatnonzero(areas <= AREA_TOL)
            if len(bad):
                raise MeshError(f"degenerate triangle {int(bad[0])} (area {areas[bad[0]]:.3g} m^2)")

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def grain_ids(self) -> np.ndarray:
        if self.groups is None:
            return np.zeros(len(self.triangles), dtype=np.int64)
        return self.groups


@dataclass
class SlicePolygonSet:
    z: float
    loops: list[np.ndarray] = field(default_factory=list)
    orientation: list[int] = field(default_factory=list)
    grains: list[int] = field(default_factory=list)


# parsing


def parse_mesh(text, format: str = "tri_list") -> TriangleMesh:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MeshFormatError("encoding", f"input is not UTF-8 text: {exc}") from None
    if format == "tri_list":
        return _parse_tri_list(text)
    if format == "grid_xml_subset":
        return _parse_grid_xml(text)
    raise ValueError(f"unknown mesh format {format!r}")


def _parse_tri_list(text: str) -> TriangleMesh:
    verts, tris, groups = [], [], []
    group = 0
    face_lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v" and len(parts) == 4:
                verts.append([float(p) for p in parts[1:]])
            elif tag == "f" and len(parts) == 4:
                tris.append([int(p) for p in parts[1:]])
                groups.append(group)
                face_lines.append(lineno)
            elif tag == "g" and len(parts) == 2:
                group = int(parts[1])
            else:
                raise MeshFormatError("syntax", f"unrecognized record {raw.strip()!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, MeshFormatError):
                raise
            raise MeshFormatError("syntax", f"bad number in {raw.strip()!r}", lineno) from None
    n = len(verts)
    for tri, lineno in zip(tris, face_lines):
        for k in tri:
            if not 1 <= k <= n:
                raise MeshFormatError("index_range", f"index {k} out of range (1-indexed, {n} vertices)", lineno)
    return TriangleMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(tris, dtype=np.int64).reshape(-1, 3) - 1,
        np.array(groups, dtype=np.int64),
    )


class _Node:
    __slots__ = ("tag", "attrs", "children", "text", "line")

    def __init__(self, tag, attrs, line):
        self.tag = tag
        self.attrs = attrs
        self.children = []
        self.text = []
        self.line = line

    def find(self, tag):
        return [c for c in self.children if c.tag == tag]


def _xml_tree(text: str) -> _Node:
    parser = xml.parsers.expat.ParserCreate()
    root = _Node("#doc", {}, 0)
    stack = [root]

    def start(tag, attrs):
        node = _Node(tag, attrs, parser.CurrentLineNumber)
        stack[-1].children.append(node)
        stack.append(node)

    def end(tag):
        stack.pop()

    def chars(data):
        stack[-1].text.append(data)

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    parser.CharacterDataHandler = chars
    try:
        parser.Parse(text, True)
    except xml.parsers.expat.ExpatError as exc:
        raise MeshFormatError("xml", f"malformed XML: {xml.parsers.expat.ErrorString(exc.code)}",
                              exc.lineno, exc.offset) from None
    return root


def _one(node: _Node, tag: str) -> _Node:
    found = node.find(tag)
    if len(found) != 1:
        raise MeshFormatError("structure", f"expected one <{tag}> in <{node.tag}>, found {len(found)}", node.line)
    return found[0]


def _array(node: _Node, kind):
    fmt = node.attrs.get("format", "ascii")
    if fmt != "ascii":
        raise MeshFormatError("encoding", f"data encoding {fmt!r} not supported (ascii only)", node.line)
    tokens = "".join(node.text).split()
    try:
        return np.array([kind(t) for t in tokens])
    except ValueError:
        raise MeshFormatError("syntax", f"bad value in DataArray {node.attrs.get('Name', '')!r}", node.line) from None


def _parse_grid_xml(text: str) -> TriangleMesh:
    root = _xml_tree(text)
    vtk = _one(root, "VTKFile")
    if vtk.attrs.get("type") != "UnstructuredGrid":
        raise MeshFormatError("structure", "only UnstructuredGrid files are supported", vtk.line)
    piece = _one(_one(vtk, "UnstructuredGrid"), "Piece")
    pts_node = _one(_one(piece, "Points"), "DataArray")
    if pts_node.attrs.get("type") not in ("Float32", "Float64"):
        raise MeshFormatError("structure", "Points must be Float32 or Float64", pts_node.line)
    if pts_node.attrs.get("NumberOfComponents") != "3":
        raise MeshFormatError("structure", "Points need 3 components", pts_node.line)
    points = _array(pts_node, float)
    if points.size % 3:
        raise MeshFormatError("structure", "point data length is not a multiple of 3", pts_node.line)
    points = points.reshape(-1, 3)
    arrays = {a.attrs.get("Name"): a for a in _one(piece, "Cells").find("DataArray")}
    for name in ("connectivity", "offsets", "types"):
        if name not in arrays:
            raise MeshFormatError("structure", f"Cells lacks the {name!r} array", piece.line)
    conn = _array(arrays["connectivity"], int)
    offsets = _array(arrays["offsets"], int)
    types = _array(arrays["types"], int)
    for k, ct in enumerate(types):
        if ct != 5:
            raise MeshFormatError("cell_type", f"unsupported cell type {ct} at cell {k} (triangles only)",
                                  arrays["types"].line, k)
    if len(offsets) != len(types):
        raise MeshFormatError("structure", "offsets and types differ in length", arrays["offsets"].line)
    expected = 3 * np.arange(1, len(types) + 1)
    if not np.array_equal(offsets, expected) or len(conn) != 3 * len(types):
        raise MeshFormatError("structure", "offsets inconsistent with triangle cells", arrays["offsets"].line)
    bad = np.flatnonzero((conn < 0) | (conn >= len(points)))
    if len(bad):
        raise MeshFormatError("index_range", f"connectivity index {conn[bad[0]]} out of range",
                              arrays["connectivity"].line, int(bad[0]))
    groups = None
    for cd in piece.find("CellData"):
        for arr in cd.find("DataArray"):
            if arr.attrs.get("Name") in ("grain", "GrainId"):
                groups = _array(arr, int)
                if len(groups) != len(types):
                    raise MeshFormatError("structure", "grain array length mismatch", arr.line)
    return TriangleMesh(points, conn.reshape(-1, 3), groups)


# slicing


def slice_mesh(mesh: TriangleMesh, z: float) -> SlicePolygonSet:
    """Cut every grain with the plane at height ``z`` into closed loops.

    Vertices lying exactly on the plane count as above it, i.e. the plane
    is taken infinitesimally below ``z``. Every crossing point is keyed by
    the mesh edge it lies on, so loops of watertight grains always close.
    """
    out = SlicePolygonSet(float(z))
    if len(mesh.triangles) == 0:
        return out
    V = mesh.vertices
    above = V[:, 2] >= z
    tri = mesh.triangles
    n_above = above[tri].sum(axis=1)
    crossing = np.flatnonzero((n_above == 1) | (n_above == 2))
    if len(crossing) == 0:
        return out
    gids = mesh.grain_ids()
    by_grain: dict[int, list] = {}
    for f in crossing:
        a, b, c = (int(i) for i in tri[f])
        down = up = None
        for u, v in ((a, b), (b, c), (c, a)):
            if above[u] != above[v]:
                key = (u, v) if u < v else (v, u)
                if above[u]:
                    down = key
                else:
                    up = key
        # for outward-wound faces, running from the downward crossing to the
        # upward one circles the material counter-clockwise seen from +z
        k0, k1 = down, up
        p0, p1 = _cross_point(V, k0, z), _cross_point(V, k1, z)
        by_grain.setdefault(int(gids[f]), []).append((k0, k1, p0, p1))
    for grain in sorted(by_grain):
        for loop in _stitch(by_grain[grain], z, grain):
            out.loops.append(loop)
            out.orientation.append(1 if _signed_area(loop) > 0 else -1)
            out.grains.append(grain)
    return out


def _cross_point(V, key, z):
    u, v = key
    pu, pv = V[u], V[v]
    s = (z - pu[2]) / (pv[2] - pu[2])
    return pu[:2] + s * (pv[:2] - pu[:2])


def _stitch(segments, z, grain):
    nxt = {}
    for k0, k1, p0, p1 in segments:
        if k0 in nxt:
            raise MeshError(f"open contour at z={z:g} in grain {grain} (non-manifold edge)")
        nxt[k0] = (k1, p0)
    loops = []
    while nxt:
        start = next(iter(nxt))
        key = start
        pts = []
        while True:
            if key not in nxt:
                raise MeshError(f"open contour at z={z:g} in grain {grain}")
            key2, p = nxt.pop(key)
            pts.append(p)
            key = key2
            if key == start:
                break
        loop = _dedupe(np.array(pts))
        if len(loop) >= 3:
            loops.append(loop)
    return loops


def _dedupe(pts):
    """Drop repeated points (within MATCH_TOL) and collinear interior vertices."""
    keep = [pts[0]]
    for p in pts[1:]:
        if np.max(np.abs(p - keep[-1])) > MATCH_TOL:
            keep.append(p)
    while len(keep) > 1 and np.max(np.abs(keep[0] - keep[-1])) <= MATCH_TOL:
        keep.pop()
    changed = True
    while changed and len(keep) > 3:
        changed = False
        for i in range(len(keep)):
            a, b, c = keep[i - 1], keep[i], keep[(i + 1) % len(keep)]
            u, w = b - a, c - b
            if abs(u[0] * w[1] - u[1] * w[0]) <= MATCH_TOL * max(np.hypot(*u), np.hypot(*w)) and u @ w > 0:
                del keep[i]
                changed = True
                break
    return np.array(keep)


def _signed_area(loop):
    x, y = loop[:, 0], loop[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# rasterization


def _cells(extent: float, pitch: float) -> int:
    return max(1, int(math.ceil(extent / pitch - 1e-9)))


def rasterize_slice(slc: SlicePolygonSet, bounds, pitch: float) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centers.

    ``bounds`` is ((xmin, ymin), (xmax, ymax)); returns a (ny, nx) uint8
    mask where pixel (j, i) has center (xmin + (i+0.5)p, ymin + (j+0.5)p).
    """
    if not pitch > 0:
        raise ValueError(f"pitch must be positive, got {pitch}")
    (xmin, ymin), (xmax, ymax) = bounds
    nx = _cells(xmax - xmin, pitch)
    ny = _cells(ymax - ymin, pitch)
    mask = np.zeros((ny, nx), dtype=np.uint8)
    if not slc.loops:
        return mask
    a = np.concatenate(slc.loops)
    b = np.concatenate([np.roll(loop, -1, axis=0) for loop in slc.loops])
    xc = xmin + (np.arange(nx) + 0.5) * pitch
    yc = ymin + (np.arange(ny) + 0.5) * pitch
    y0, y1 = a[:, 1], b[:, 1]
    for j, y in enumerate(yc):
        hit = ((y0 <= y) & (y < y1)) | ((y1 <= y) & (y < y0))
        if not hit.any():
            continue
        s = (y - y0[hit]) / (y1[hit] - y0[hit])
        xs = np.sort(a[hit, 0] + s * (b[hit, 0] - a[hit, 0]))
        right = len(xs) - np.searchsorted(xs, xc, side="right")
        mask[j] = right & 1
    return mask


def voxelize(mesh: TriangleMesh, pitch: float, bounds) -> VoxelGrid:
    """Stack rasterized slices taken at voxel-center heights.

    ``bounds`` is ((xmin, ymin, zmin), (xmax, ymax, zmax)) in meters.
    """
    if not pitch > 0:
        raise ValueError(f"pitch must be positive, got {pitch}")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError(f"degenerate bounds {bounds}")
    nx, ny, nz = (_cells(e, pitch) for e in hi - lo)
    data = np.zeros((nz, ny, nx), dtype=np.uint8)
    for k in range(nz):
        z = lo[2] + (k + 0.5) * pitch
        try:
            slc = slice_mesh(mesh, z)
            data[k] = rasterize_slice(slc, ((lo[0], lo[1]), (hi[0], hi[1])), pitch)
        except MeshError as exc:
            raise MeshError(f"slice {k}: {exc}") from None
    return VoxelGrid(data, pitch, (lo[2], lo[1], lo[0]), "binary")


def signed_distance(grid: VoxelGrid) -> VoxelGrid:
    """Normalized signed distance: negative on foreground, positive on background.

    Each voxel gets the Euclidean distance (voxel units) to the nearest
    voxel of the opposite phase, negated inside; values are then divided by
    the largest magnitude.
    """
    if grid.kind != "binary":
        raise ValueError("signed_distance needs a binary grid")
    fg = grid.data.astype(bool)
    if fg.all() or not fg.any():
        raise ValueError("no surface: grid is uniform")
    sdf = raw_signed_distance(fg)
    return VoxelGrid(sdf / np.abs(sdf).max(), grid.pitch, grid.origin, "sdf")


def raw_signed_distance(fg: np.ndarray) -> np.ndarray:
    return edt(fg) - edt(~fg)
