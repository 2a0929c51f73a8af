"""Exact Euclidean distance transform by separable lower-envelope passes."""
import numpy as np

from granogen import kernels


def squared_edt(sites: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance (voxel units) from each voxel to the nearest site.

    ``sites`` is a boolean array of any dimension. Voxels are at integer
    centers; if there are no sites the result is ``inf`` everywhere.
    """
    sites = np.asarray(sites, dtype=bool)
    f = np.where(sites, 0.0, np.inf)
    for axis in range(f.ndim):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        lines = moved.reshape(-1, moved.shape[-1])
        kernels.edt_sq_lines(lines)
        f = np.moveaxis(lines.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(f)


def edt(sites: np.ndarray) -> np.ndarray:
    return np.sqrt(squared_edt(sites))
