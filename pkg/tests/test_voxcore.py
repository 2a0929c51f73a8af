import io
import tarfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from granogen.voxcore import (
    HEADER,
    ArchiveEntry,
    ArchiveError,
    MaskGrid,
    VoxelGrid,
    binarize,
    decode_entry,
    encode_entry,
    extract_blocks,
    from_signal,
    read_archive,
    to_signal,
    write_archive,
)


def test_zero_grid_round_trip():
    g = VoxelGrid(np.zeros((16, 32, 32), np.uint8))
    assert decode_entry(encode_entry(g, "z")) == g


def test_random_grid_round_trip(rng):
    g = VoxelGrid(rng.integers(0, 2, (16, 32, 32)).astype(np.uint8), 0.004, (1.0, 2.0, 3.0))
    back = decode_entry(encode_entry(g, "r"))
    assert back == g
    assert back.pitch == 0.004 and back.origin == (1.0, 2.0, 3.0)


def test_signal_grid_rejected():
    g = VoxelGrid(np.ones((2, 2, 2)), kind="signal")
    with pytest.raises(ArchiveError, match="unsupported value kind"):
        encode_entry(g, "s")


def test_duplicate_and_empty_ids():
    g = VoxelGrid(np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(ArchiveError):
        encode_entry(g, "a", existing={"a"})
    with pytest.raises(ArchiveError):
        encode_entry(g, "")


def test_sdf_within_one_quantum(rng):
    v = rng.uniform(-1, 1, (5, 6, 7))
    back = decode_entry(encode_entry(VoxelGrid(v, kind="sdf"), "d"))
    assert back.kind == "sdf"
    assert np.max(np.abs(back.data - v)) <= 1 / 32767


def test_truncated_payload_is_corrupt(rng):
    e = encode_entry(VoxelGrid(rng.integers(0, 2, (8, 8, 8)).astype(np.uint8)), "t")
    import zlib

    raw = zlib.decompress(e.payload)[:-3]
    bad = ArchiveEntry(e.id, e.header, zlib.compress(raw), e.metadata)
    with pytest.raises(ArchiveError, match="corrupt payload"):
        decode_entry(bad)
    with pytest.raises(ArchiveError, match="corrupt payload"):
        decode_entry(ArchiveEntry(e.id, e.header, b"not zlib", e.metadata))


def test_unknown_version_rejected():
    e = encode_entry(VoxelGrid(np.zeros((2, 2, 2), np.uint8)), "v")
    blob = bytearray(e.to_bytes())
    blob[4:6] = (7).to_bytes(2, "little")
    with pytest.raises(ArchiveError, match="unsupported format"):
        decode_entry(ArchiveEntry.from_bytes("v", bytes(blob)))


def test_header_layout():
    e = encode_entry(VoxelGrid(np.zeros((3, 4, 5), np.uint8), 0.5, (1, 2, 3)), "h")
    blob = e.to_bytes()
    assert HEADER.size == 52
    magic, ver, nz, ny, nx, pitch, oz, oy, ox, kind, packing = HEADER.unpack_from(blob)
    assert (magic, ver, nz, ny, nx, pitch, kind, packing) == (b"GRNM", 1, 3, 4, 5, 0.5, 0, 1)
    assert (oz, oy, ox) == (1.0, 2.0, 3.0)


def test_bit_order_x_fastest_lsb_first():
    d = np.zeros((1, 1, 16), np.uint8)
    d[0, 0, 0] = 1
    d[0, 0, 9] = 1
    import zlib

    payload = zlib.decompress(encode_entry(VoxelGrid(d), "b").payload)
    assert payload == bytes([0b00000001, 0b00000010])


def test_archive_file_round_trip(tmp_path, rng):
    grids = [VoxelGrid(rng.integers(0, 2, (4, 8, 8)).astype(np.uint8)) for _ in range(3)]
    entries = [encode_entry(g, f"g{i}", {"phi": float(g.data.mean())}) for i, g in enumerate(grids)]
    p = tmp_path / "a.tar"
    write_archive(p, entries)
    back = read_archive(p)
    assert [e.id for e in back] == ["g0", "g1", "g2"]
    assert [decode_entry(e) for e in back] == grids
    assert back[1].metadata == {"phi": float(grids[1].data.mean())}
    with tarfile.open(p) as tf:
        assert sorted(tf.getnames()) == sorted([f"g{i}.{s}" for i in range(3) for s in ("grnm", "json")])
    # identical inputs produce identical bytes
    write_archive(tmp_path / "b.tar", entries)
    assert p.read_bytes() == (tmp_path / "b.tar").read_bytes()


def test_write_archive_rejects_duplicates(tmp_path):
    e = encode_entry(VoxelGrid(np.zeros((2, 2, 2), np.uint8)), "x")
    with pytest.raises(ArchiveError):
        write_archive(tmp_path / "d.tar", [e, e])


def test_empty_archive_is_valid(tmp_path):
    write_archive(tmp_path / "e.tar", [])
    assert read_archive(tmp_path / "e.tar") == []


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_round_trip_property(nz, ny, nx, seed):
    r = np.random.default_rng(seed)
    g = VoxelGrid(r.integers(0, 2, (nz, ny, nx)).astype(np.uint8))
    assert decode_entry(encode_entry(g, "p")) == g


def test_block_counts():
    g = VoxelGrid(np.zeros((64, 128, 128), np.uint8))
    assert len(extract_blocks(g, (32, 64, 64))) == 8
    g = VoxelGrid(np.zeros((33, 64, 64), np.uint8))
    assert len(extract_blocks(g, (32, 64, 64))) == 1
    with pytest.raises(ValueError):
        extract_blocks(g, (34, 64, 64))


def test_blocks_reassemble(rng):
    g = VoxelGrid(rng.integers(0, 2, (64, 64, 64)).astype(np.uint8), 0.01)
    b = extract_blocks(g, (32, 32, 32))
    stacked = np.block([[[b[0].data, b[1].data], [b[2].data, b[3].data]],
                        [[b[4].data, b[5].data], [b[6].data, b[7].data]]])
    assert np.array_equal(stacked, g.data)
    assert b[7].origin == pytest.approx((0.32, 0.32, 0.32))


@settings(max_examples=30, deadline=None)
@given(st.tuples(*[st.integers(1, 20)] * 3), st.tuples(*[st.integers(1, 20)] * 3))
def test_block_count_formula(dims, block):
    g = VoxelGrid(np.zeros(dims, np.uint8))
    if any(b > d for b, d in zip(block, dims)):
        with pytest.raises(ValueError):
            extract_blocks(g, block)
    else:
        n = np.prod([d // b for d, b in zip(dims, block)])
        assert len(extract_blocks(g, block)) == n


def test_signal_conversions(rng):
    ones = VoxelGrid(np.ones((2, 3, 4), np.uint8))
    assert np.all(to_signal(ones).data == 1.0)
    g = VoxelGrid(rng.integers(0, 2, (8, 8, 8)).astype(np.uint8))
    assert from_signal(to_signal(g)) == g
    s = VoxelGrid(np.array([-0.2, 0.4]).reshape(1, 1, 2), kind="signal")
    assert from_signal(s).data.ravel().tolist() == [0, 1]
    assert binarize(np.array([0.0])).tolist() == [0]


def test_validation():
    with pytest.raises(ValueError):
        VoxelGrid(np.full((2, 2, 2), 2))
    with pytest.raises(ValueError):
        VoxelGrid(np.full((2, 2, 2), 1.5), kind="sdf")
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((2, 2, 2), np.uint8), pitch=0)
    with pytest.raises(ValueError):
        MaskGrid(np.full((2, 2, 2), 3))
