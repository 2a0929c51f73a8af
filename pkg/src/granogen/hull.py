"""Incremental 3D convex hull with exact integer orientation tests.

Points are int64 lattice coordinates (voxel indices, or floats quantized by
``convex_hull_float``). All predicates are evaluated exactly, so coplanar
and collinear input is handled without tolerances: points on a hull face
are simply not promoted to vertices.
"""
from __future__ import annotations

from collections import deque

import numpy as np

QUANTUM = 1024  # sub-units per unit for float input


class DegenerateHull(ValueError):
    """Input points are coplanar (or fewer than 4 distinct points)."""


def _orient(a, b, c, d) -> int:
    # sign of det[b-a, c-a, d-a] with Python ints (exact)
    bx, by, bz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    cx, cy, cz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    dx, dy, dz = d[0] - a[0], d[1] - a[1], d[2] - a[2]
    return bx * (cy * dz - cz * dy) - by * (cx * dz - cz * dx) + bz * (cx * dy - cy * dx)


def _normal(pts, f):
    a, b, c = (pts[i] for i in f)
    n = np.cross(b - a, c - a)
    return n, int(n @ a)


def convex_hull(points) -> tuple[np.ndarray, np.ndarray]:
    """Hull of integer points; returns (vertices, faces).

    ``faces`` index into ``vertices`` and are wound counter-clockwise seen
    from outside. Raises DegenerateHull for coplanar input.
    """
    pts = np.unique(np.asarray(points, dtype=np.int64).reshape(-1, 3), axis=0)
    if len(pts) < 4:
        raise DegenerateHull("need at least 4 distinct points")
    if np.abs(pts).max() > 2**18:
        raise ValueError("coordinates too large for exact int64 predicates")
    tet = _initial_simplex(pts)
    i0, i1, i2, i3 = tet
    P = [tuple(int(v) for v in p) for p in pts]
    if _orient(P[i0], P[i1], P[i2], P[i3]) > 0:
        i1, i2 = i2, i1
    faces: dict[int, tuple[int, int, int]] = {}
    edge_face: dict[tuple[int, int], int] = {}
    planes: dict[int, tuple[np.ndarray, int]] = {}
    next_id = 0

    def add_face(a, b, c):
        nonlocal next_id
        fid = next_id
        next_id += 1
        faces[fid] = (a, b, c)
        for e in ((a, b), (b, c), (c, a)):
            edge_face[e] = fid
        planes[fid] = _normal(pts, (a, b, c))
        return fid

    def drop_face(fid):
        a, b, c = faces.pop(fid)
        for e in ((a, b), (b, c), (c, a)):
            if edge_face.get(e) == fid:
                del edge_face[e]
        planes.pop(fid)

    # i3 lies below (i0, i1, i2); the other faces follow by edge consistency
    for a, b, c in ((i0, i1, i2), (i0, i3, i1), (i1, i3, i2), (i2, i3, i0)):
        add_face(a, b, c)

    remaining = np.setdiff1d(np.arange(len(pts)), np.array(tet))
    conflicts: dict[int, np.ndarray] = {}
    _assign(pts, remaining, list(faces), planes, conflicts)

    while conflicts:
        fid = next(iter(conflicts))
        cand = conflicts[fid]
        n, off = planes[fid]
        far = int(cand[np.argmax(pts[cand] @ n - off)])
        # visible region by flood over face adjacency
        visible = {fid}
        queue = deque([fid])
        while queue:
            f = queue.popleft()
            a, b, c = faces[f]
            for u, v in ((a, b), (b, c), (c, a)):
                g = edge_face[(v, u)]
                if g in visible:
                    continue
                gn, goff = planes[g]
                if int(gn @ pts[far]) - goff > 0:
                    visible.add(g)
                    queue.append(g)
        horizon = []
        for f in visible:
            a, b, c = faces[f]
            for u, v in ((a, b), (b, c), (c, a)):
                if edge_face[(v, u)] not in visible:
                    horizon.append((u, v))
        orphan = [conflicts.pop(f) for f in visible if f in conflicts]
        for f in visible:
            drop_face(f)
        new = [add_face(u, v, far) for u, v in horizon]
        if orphan:
            pool = np.concatenate(orphan)
            pool = pool[pool != far]
            _assign(pts, pool, new, planes, conflicts)

    used = sorted({i for f in faces.values() for i in f})
    remap = {old: k for k, old in enumerate(used)}
    verts = pts[used]
    tris = np.array([[remap[i] for i in f] for f in faces.values()], dtype=np.int64)
    return verts, tris


def _assign(pts, idx, face_ids, planes, conflicts):
    """Give each point to the first face that sees it; unseen points are interior."""
    if len(idx) == 0:
        return
    left = np.asarray(idx)
    for f in face_ids:
        if len(left) == 0:
            break
        n, off = planes[f]
        above = (pts[left] @ n - off) > 0
        if above.any():
            conflicts[f] = left[above]
            left = left[~above]


def _initial_simplex(pts):
    i0 = 0
    d = ((pts - pts[i0]) ** 2).sum(axis=1)
    i1 = int(np.argmax(d))
    if d[i1] == 0:
        raise DegenerateHull("all points coincide")
    cr = np.cross(pts[i1] - pts[i0], pts - pts[i0])
    area = (cr**2).sum(axis=1)
    i2 = int(np.argmax(area))
    if area[i2] == 0:
        raise DegenerateHull("points are collinear")
    n = np.cross(pts[i1] - pts[i0], pts[i2] - pts[i0])
    vol = np.abs((pts - pts[i0]) @ n)
    i3 = int(np.argmax(vol))
    if vol[i3] == 0:
        raise DegenerateHull("points are coplanar")
    return i0, i1, i2, i3


def convex_hull_float(points, quantum: int = QUANTUM) -> tuple[np.ndarray, np.ndarray]:
    """Hull of real points via quantization to ``1/quantum`` units."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = np.round(pts * quantum).astype(np.int64)
    verts, faces = convex_hull(q)
    return verts.astype(np.float64) / quantum, faces


def hull_volume(verts, faces) -> float:
    v = np.asarray(verts, dtype=np.float64)
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def inside_hull(verts, faces, points, tol: float = 0.0) -> np.ndarray:
    """Boolean per point: on or inside every face plane (within ``tol``)."""
    v = np.asarray(verts, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    n = np.cross(b - a, c - a)
    off = np.einsum("ij,ij->i", n, a)
    return np.all(p @ n.T - off <= tol * np.linalg.norm(n, axis=1), axis=1)
