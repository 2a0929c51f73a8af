"""Voxel grid types, block extraction and the compressed archive format.

Grids are indexed (z, y, x) with z the vertical/slicing axis. Binary grids
hold {0, 1}; diffusion works on ``signal`` grids scaled to {-1, +1}; ``sdf``
grids hold normalized signed distances in [-1, 1].

Archive layout
--------------
An archive is a plain tar file. Each grid is one member ``<id>.grnm``::

    offset  size  field
    0       4     magic b"GRNM"
    4       2     version (u16, currently 1)
    6       12    dims nz, ny, nx (3 x u32)
    18      8     pitch in meters (f64)
    26      24    origin z, y, x in meters (3 x f64)
    50      1     kind (0 binary, 2 sdf)
    51      1     packing (1 bit-packed, 0 int16 fixed point)
    52      ...   zlib (deflate) compressed payload

All fields little-endian. Binary payloads are bit-packed row-major with x
fastest and the first voxel in the least significant bit. SDF payloads are
int16 values ``round(v * 32767)``. Free-form metadata sits next to each
entry as ``<id>.json``.
"""
from __future__ import annotations

import io
import json
import struct
import tarfile
import zlib
from dataclasses import dataclass, field
from typing import Container, Iterable, Iterator

import numpy as np

KINDS = ("binary", "signal", "sdf")
_KIND_CODE = {"binary": 0, "signal": 1, "sdf": 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}

MAGIC = b"GRNM"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sH3Id3dBB")
SDF_SCALE = 32767


class ArchiveError(ValueError):
    """Raised for malformed or unsupported archive content."""


@dataclass
class VoxelGrid:
    data: np.ndarray
    pitch: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = "binary"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown value kind {self.kind!r}")
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"grid data must be a non-empty 3D array, got shape {data.shape}")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        if self.kind == "binary":
            if data.dtype != np.uint8:
                if not np.all((data == 0) | (data == 1)):
                    raise ValueError("binary grid values must be in {0, 1}")
                data = data.astype(np.uint8)
            elif data.max(initial=0) > 1:
                raise ValueError("binary grid values must be in {0, 1}")
        else:
            data = data.astype(np.float64, copy=False)
            if self.kind == "sdf" and (np.abs(data).max(initial=0) > 1.0):
                raise ValueError("sdf values must lie in [-1, 1]")
        self.data = data
        self.pitch = float(self.pitch)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.pitch == other.pitch
            and self.origin == other.origin
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass
class MaskGrid:
    """Binary mask, 1 = unknown (to generate), 0 = known context."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("mask must be 3D")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("mask values must be in {0, 1}")
        self.data = data.astype(np.uint8)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)


@dataclass
class ArchiveEntry:
    id: str
    header: dict
    payload: bytes
    metadata: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        h = self.header
        return (
            HEADER.pack(
                MAGIC,
                h.get("version", FORMAT_VERSION),
                *h["dims"],
                h["pitch"],
                *h["origin"],
                _KIND_CODE[h["kind"]],
                1 if h["packed"] else 0,
            )
            + self.payload
        )

    @classmethod
    def from_bytes(cls, id: str, blob: bytes, metadata: dict | None = None) -> "ArchiveEntry":
        if len(blob) < HEADER.size:
            raise ArchiveError("corrupt payload: truncated header")
        magic, version, nz, ny, nx, pitch, oz, oy, ox, kind, packed = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ArchiveError("unsupported format: bad magic")
        if kind not in _CODE_KIND:
            raise ArchiveError(f"unsupported format: kind code {kind}")
        header = {
            "version": version,
            "dims": (nz, ny, nx),
            "pitch": pitch,
            "origin": (oz, oy, ox),
            "kind": _CODE_KIND[kind],
            "packed": bool(packed),
        }
        return cls(id, header, blob[HEADER.size:], dict(metadata or {}))


def encode_entry(
    grid: VoxelGrid, id: str, metadata: dict | None = None, existing: Container[str] = ()
) -> ArchiveEntry:
    """Serialize a binary or sdf grid into a compressed archive entry.

    ``existing`` holds the ids already present in the target archive.
    """
    if not id:
        raise ArchiveError("entry id must be non-empty")
    if id in existing:
        raise ArchiveError(f"duplicate entry id {id!r}")
    if grid.kind == "binary":
        raw = np.packbits(grid.data.ravel(), bitorder="little").tobytes()
        packed = True
    elif grid.kind == "sdf":
        q = np.round(grid.data.ravel() * SDF_SCALE).astype("<i2")
        raw = q.tobytes()
        packed = False
    else:
        raise ArchiveError(f"unsupported value kind {grid.kind!r}")
    header = {
        "version": FORMAT_VERSION,
        "dims": grid.dims,
        "pitch": grid.pitch,
        "origin": grid.origin,
        "kind": grid.kind,
        "packed": packed,
    }
    return ArchiveEntry(id, header, zlib.compress(raw, 6), dict(metadata or {}))


def decode_entry(entry: ArchiveEntry) -> VoxelGrid:
    h = entry.header
    if h.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ArchiveError(f"unsupported format: version {h['version']}")
    nz, ny, nx = h["dims"]
    n = nz * ny * nx
    try:
        raw = zlib.decompress(entry.payload)
    except zlib.error as exc:
        raise ArchiveError(f"corrupt payload: {exc}") from None
    if h["kind"] == "binary":
        if not h["packed"]:
            raise ArchiveError("unsupported format: unpacked binary payload")
        if len(raw) != (n + 7) // 8:
            raise ArchiveError(f"corrupt payload: expected {(n + 7) // 8} bytes, got {len(raw)}")
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n, bitorder="little")
        data = bits.reshape(nz, ny, nx)
    elif h["kind"] == "sdf":
        if len(raw) != 2 * n:
            raise ArchiveError(f"corrupt payload: expected {2 * n} bytes, got {len(raw)}")
        q = np.frombuffer(raw, dtype="<i2").astype(np.float64)
        data = (q / SDF_SCALE).reshape(nz, ny, nx)
    else:
        raise ArchiveError(f"unsupported format: kind {h['kind']!r}")
    return VoxelGrid(data, h["pitch"], tuple(h["origin"]), h["kind"])


def write_archive(path, entries: Iterable[ArchiveEntry]) -> int:
    """Write entries to a tar archive; returns the entry count."""
    seen = set()
    count = 0
    with tarfile.open(path, "w") as tar:
        for entry in entries:
            if entry.id in seen:
                raise ArchiveError(f"duplicate entry id {entry.id!r}")
            seen.add(entry.id)
            _add_member(tar, f"{entry.id}.grnm", entry.to_bytes())
            meta = json.dumps(entry.metadata, sort_keys=True).encode()
            _add_member(tar, f"{entry.id}.json", meta)
            count += 1
    return count


def _add_member(tar: tarfile.TarFile, name: str, blob: bytes) -> None:
    info = tarfile.TarInfo(name)
    info.size = len(blob)
    info.mtime = 0  # reproducible archives
    tar.addfile(info, io.BytesIO(blob))


def iter_archive(path) -> Iterator[ArchiveEntry]:
    """Yield entries lazily in archive order."""
    with tarfile.open(path, "r") as tar:
        pending = {}
        for member in tar:
            name = member.name
            if name.endswith(".grnm"):
                eid = name[: -len(".grnm")]
                blob = tar.extractfile(member).read()
                pending[eid] = ArchiveEntry.from_bytes(eid, blob)
            elif name.endswith(".json"):
                eid = name[: -len(".json")]
                entry = pending.pop(eid, None)
                if entry is None:
                    raise ArchiveError(f"corrupt payload: metadata without entry {eid!r}")
                entry.metadata = json.loads(tar.extractfile(member).read())
                yield entry
        for entry in pending.values():
            yield entry


def read_archive(path) -> list[ArchiveEntry]:
    return list(iter_archive(path))


def load_grids(path) -> list[VoxelGrid]:
    return [decode_entry(e) for e in iter_archive(path)]


def extract_blocks(grid: VoxelGrid, block_dims) -> list[VoxelGrid]:
    """Tile ``grid`` from its origin corner with non-overlapping blocks.

    Remainder voxels on the far faces are dropped. Blocks come back in
    (z, y, x) index order, each with its physical origin shifted.
    """
    bz, by, bx = (int(b) for b in block_dims)
    if min(bz, by, bx) < 1:
        raise ValueError(f"block dims must be positive, got {block_dims}")
    nz, ny, nx = grid.dims
    if bz > nz or by > ny or bx > nx:
        raise ValueError(f"block {block_dims} larger than grid {grid.dims}")
    oz, oy, ox = grid.origin
    p = grid.pitch
    blocks = []
    for k in range(nz // bz):
        for j in range(ny // by):
            for i in range(nx // bx):
                sub = grid.data[k * bz:(k + 1) * bz, j * by:(j + 1) * by, i * bx:(i + 1) * bx]
                origin = (oz + k * bz * p, oy + j * by * p, ox + i * bx * p)
                blocks.append(VoxelGrid(sub.copy(), p, origin, grid.kind))
    return blocks


def to_signal(grid: VoxelGrid) -> VoxelGrid:
    """Map a binary grid {0, 1} onto the diffusion range {-1, +1}."""
    if grid.kind != "binary":
        raise ValueError(f"to_signal needs a binary grid, got {grid.kind}")
    return VoxelGrid(grid.data.astype(np.float64) * 2.0 - 1.0, grid.pitch, grid.origin, "signal")


def from_signal(grid: VoxelGrid, threshold: float = 0.0) -> VoxelGrid:
    if grid.kind != "signal":
        raise ValueError(f"from_signal needs a signal grid, got {grid.kind}")
    return VoxelGrid(binarize(grid.data, threshold), grid.pitch, grid.origin, "binary")


def binarize(values: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Strictly-greater threshold; a value equal to ``threshold`` maps to 0."""
    return (np.asarray(values) > threshold).astype(np.uint8)
