"""Pure-Python reference implementations of the hot kernels.

These mirror ``_core.pyx`` call for call and are used when the compiled
extension is unavailable (or disabled with ``GRANOGEN_PURE_PYTHON=1``).
"""
import heapq
import math

import numpy as np

INF = math.inf


def edt_sq_lines(f):
    """Squared 1D distance transform of every row of ``f``, in place.

    ``f`` is a C-contiguous float64 array of shape (nlines, n) holding
    sampled costs (0 on sites, ``inf`` elsewhere, or the squared distances
    from a previous pass). Uses the lower envelope of parabolas.
    """
    nlines, n = f.shape
    v = [0] * n
    z = [0.0] * (n + 1)
    for line in range(nlines):
        row = f[line].tolist()
        k = -1
        for q in range(n):
            fq = row[q]
            if fq == INF:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -INF
                z[1] = INF
                continue
            while True:
                p = v[k]
                s = ((fq + q * q) - (row[p] + p * p)) / (2.0 * (q - p))
                if s <= z[k]:
                    k -= 1
                    if k < 0:
                        break
                else:
                    break
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -INF
                z[1] = INF
            else:
                k += 1
                v[k] = q
                z[k] = s
                z[k + 1] = INF
        if k < 0:
            continue  # no finite site on this line
        k = 0
        out = f[line]
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            p = v[k]
            out[q] = (q - p) * (q - p) + row[p]


def flood(priority, labels, mask, shape):
    """Marker-based priority flood over a raveled 3D volume, 6-connected.

    ``labels`` holds the seeds (nonzero) and receives the result in place.
    Only voxels with ``mask != 0`` are flooded. Ties in priority are
    resolved by insertion order, so the result is deterministic.
    """
    nz, ny, nx = shape
    sxy = ny * nx
    prio = priority.tolist()
    out = labels.tolist()
    inside = mask.tolist()
    heap = []
    age = 0
    for idx in np.flatnonzero(labels).tolist():
        heapq.heappush(heap, (prio[idx], age, idx))
        age += 1
    while heap:
        _, _, idx = heapq.heappop(heap)
        lab = out[idx]
        z, rem = divmod(idx, sxy)
        y, x = divmod(rem, nx)
        for ok, nb in (
            (z > 0, idx - sxy),
            (z < nz - 1, idx + sxy),
            (y > 0, idx - nx),
            (y < ny - 1, idx + nx),
            (x > 0, idx - 1),
            (x < nx - 1, idx + 1),
        ):
            if ok and inside[nb] and out[nb] == 0:
                out[nb] = lab
                heapq.heappush(heap, (prio[nb], age, nb))
                age += 1
    labels[:] = out
