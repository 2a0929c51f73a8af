import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from granogen import kernels
from granogen.edt import edt, squared_edt
from granogen.kernels import _pure

try:
    from granogen.kernels import _core
except ImportError:  # pragma: no cover - build without the extension
    _core = None

BACKENDS = [_pure] + ([_core] if _core is not None else [])


def brute_sq_edt(sites):
    """O(n^2) nearest-site scan."""
    pts = np.argwhere(sites)
    out = np.full(sites.shape, np.inf)
    if len(pts) == 0:
        return out
    for idx in np.ndindex(sites.shape):
        out[idx] = ((pts - idx) ** 2).sum(axis=1).min()
    return out


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_line_edt_matches_brute_force(backend, rng):
    for _ in range(50):
        n = int(rng.integers(1, 40))
        row = np.where(rng.random(n) < 0.2, 0.0, np.inf)
        got = row[None].copy()
        backend.edt_sq_lines(got)
        sites = np.flatnonzero(row == 0)
        want = np.array([min(((i - sites) ** 2).min(), np.inf) if len(sites) else np.inf for i in range(n)])
        assert np.array_equal(got[0], want)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.02, 0.6))
def test_edt_matches_exhaustive_oracle(seed, density):
    r = np.random.default_rng(seed)
    sites = r.random((12, 12, 12)) < density
    assert np.array_equal(squared_edt(sites), brute_sq_edt(sites))


def test_edt_anisotropic_shapes(rng):
    sites = rng.random((3, 17, 9)) < 0.1
    assert np.array_equal(squared_edt(sites), brute_sq_edt(sites))
    assert np.allclose(edt(sites), np.sqrt(brute_sq_edt(sites)))


def test_edt_no_sites_is_inf():
    assert np.all(np.isinf(squared_edt(np.zeros((3, 3, 3), bool))))


@pytest.mark.skipif(_core is None, reason="compiled kernels not built")
def test_backends_agree_on_flood(rng):
    for _ in range(20):
        shape = (6, 7, 8)
        prio = rng.integers(0, 5, shape).astype(np.float64).ravel()
        mask = (rng.random(shape) < 0.7).astype(np.uint8).ravel()
        labels = np.zeros(mask.size, np.int32)
        seeds = rng.choice(np.flatnonzero(mask), size=4, replace=False)
        labels[seeds] = np.arange(1, 5)
        a, b = labels.copy(), labels.copy()
        _pure.flood(prio, a, mask, shape)
        _core.flood(prio, b, mask, shape)
        assert np.array_equal(a, b)


@pytest.mark.skipif(_core is None, reason="compiled kernels not built")
def test_backends_agree_on_edt(rng):
    f = np.where(rng.random((50, 33)) < 0.1, 0.0, np.inf)
    a, b = f.copy(), f.copy()
    _pure.edt_sq_lines(a)
    _core.edt_sq_lines(b)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_flood_ties_follow_insertion_order(backend):
    # flat corridor, two seeds at the ends: the earlier-pushed basin wins the middle
    shape = (1, 1, 5)
    prio = np.zeros(5)
    mask = np.ones(5, np.uint8)
    labels = np.array([1, 0, 0, 0, 2], np.int32)
    backend.flood(prio, labels, mask, shape)
    assert labels.tolist() == [1, 1, 1, 2, 2]


def test_pure_fallback_selected_by_env():
    code = "from granogen import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, GRANOGEN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND in ("compiled", "python")
