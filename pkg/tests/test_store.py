"""Segment I/O, tiling, grayscale mapping and corpus layout."""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from das.store import (
    CorpusManifest,
    DasfFormatError,
    DasSegment,
    GrayTile,
    Tile,
    export_labeled_tile,
    gray_pixels,
    read_pgm,
    read_segment,
    tile_grid_shape,
    tile_image_name,
    tile_segment,
    tile_to_gray,
    write_pgm,
    write_segment,
)


def make_segment(data, **kw):
    return DasSegment(data=np.asarray(data, dtype=np.float32), **kw)


class TestDasfFormat:
    def test_roundtrip_identity_1x1(self, tmp_path):
        seg = make_segment([[0.0]])
        path = tmp_path / "one.dasf"
        write_segment(seg, path)
        assert read_segment(path) == seg

    def test_roundtrip_metadata(self, tmp_path):
        seg = make_segment(
            np.arange(12).reshape(3, 4),
            sample_rate_hz=500.0, channel_start=5500,
            channel_spacing_m=2.0, start_time_ns=1_500_000_000_123,
        )
        path = tmp_path / "meta.dasf"
        write_segment(seg, path)
        back = read_segment(path)
        assert back == seg
        assert back.channel_start == 5500
        assert back.start_time_ns == 1_500_000_000_123

    @settings(max_examples=25, deadline=None)
    @given(
        n_channels=st.integers(1, 8),
        n_samples=st.integers(1, 32),
        seed=st.integers(0, 2**16),
    )
    def test_roundtrip_random_bit_exact(self, tmp_path_factory, n_channels, n_samples, seed):
        data = np.random.default_rng(seed).standard_normal(
            (n_channels, n_samples)).astype(np.float32)
        seg = make_segment(data)
        path = tmp_path_factory.mktemp("rt") / "seg.dasf"
        write_segment(seg, path)
        back = read_segment(path)
        assert back.data.tobytes() == seg.data.tobytes()

    def test_file_size_formula(self, tmp_path):
        # header bytes declared at offset 8; payload is 4 bytes per value
        seg = make_segment(np.zeros((200, 30000), dtype=np.float32))
        path = tmp_path / "big.dasf"
        write_segment(seg, path)
        raw = path.read_bytes()
        (header_len,) = struct.unpack("<Q", raw[8:16])
        assert len(raw) == 16 + header_len + 200 * 30000 * 4

    def test_non_finite_rejected(self, tmp_path):
        seg = make_segment([[1.0, 2.0]])
        seg.data[0, 0] = np.nan  # mutate after construction
        with pytest.raises(ValueError, match="non-finite"):
            write_segment(seg, tmp_path / "bad.dasf")
        with pytest.raises(ValueError, match="non-finite"):
            DasSegment(data=np.array([[np.inf]], dtype=np.float32))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dasf"
        seg = make_segment([[1.0]])
        write_segment(seg, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(DasfFormatError, match="bad magic"):
            read_segment(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.dasf"
        write_segment(make_segment(np.ones((2, 3))), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(DasfFormatError, match="truncated payload"):
            read_segment(path)

    def test_payload_size_mismatch(self, tmp_path):
        path = tmp_path / "extra.dasf"
        write_segment(make_segment(np.ones((2, 3))), path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(DasfFormatError, match="size mismatch"):
            read_segment(path)

    def test_segment_invariants(self):
        with pytest.raises(ValueError):
            DasSegment(data=np.zeros((0, 4), dtype=np.float32))
        with pytest.raises(ValueError):
            DasSegment(data=np.zeros((2, 2), dtype=np.float32), sample_rate_hz=0.0)


class TestTiling:
    def test_minute_file_tiling_count(self):
        # a 200-channel, one-minute 500 Hz file cuts into 150 square tiles
        seg = make_segment(np.zeros((200, 30000), dtype=np.float32))
        tiles = tile_segment(seg, 200, 200)
        assert len(tiles) == 150

    def test_exact_fit_single_tile(self):
        seg = make_segment(np.zeros((200, 200), dtype=np.float32))
        assert len(tile_segment(seg, 200, 200)) == 1

    def test_remainder_dropped(self):
        seg = make_segment(np.zeros((200, 30100), dtype=np.float32))
        assert len(tile_segment(seg, 200, 200)) == 150  # floor(30100/200)

    def test_row_major_order_and_origins(self):
        seg = make_segment(np.arange(6 * 9).reshape(6, 9), channel_start=100)
        tiles = tile_segment(seg, 3, 3)
        assert len(tiles) == 2 * 3
        # channel blocks outer, sample blocks inner
        assert [(t.origin_channel, t.origin_sample) for t in tiles] == [
            (100, 0), (100, 3), (100, 6), (103, 0), (103, 3), (103, 6)
        ]
        np.testing.assert_array_equal(tiles[4].values, seg.data[3:6, 3:6])

    def test_tile_too_large(self):
        seg = make_segment(np.zeros((4, 100), dtype=np.float32))
        with pytest.raises(ValueError, match="larger"):
            tile_segment(seg, 8, 8)

    @settings(max_examples=40, deadline=None)
    @given(
        n_channels=st.integers(2, 40),
        n_samples=st.integers(2, 40),
        tile=st.integers(1, 12),
        stride=st.integers(1, 12),
    )
    def test_count_formula_and_disjoint_cover(self, n_channels, n_samples, tile, stride):
        if tile > min(n_channels, n_samples):
            return
        seg = make_segment(np.zeros((n_channels, n_samples), dtype=np.float32))
        tiles = tile_segment(seg, tile, stride)
        rows = (n_channels - tile) // stride + 1
        cols = (n_samples - tile) // stride + 1
        assert len(tiles) == rows * cols
        assert tile_grid_shape(n_channels, n_samples, tile, stride) == (rows, cols)
        if stride == tile:
            # disjoint tiles covering the top-left floor(n/T)*T sub-grid
            hit = np.zeros((n_channels, n_samples), dtype=int)
            for t in tiles:
                r = t.origin_channel - seg.channel_start
                hit[r : r + tile, t.origin_sample : t.origin_sample + tile] += 1
            covered = hit[: rows * tile, : cols * tile]
            assert (covered == 1).all()
            assert hit.sum() == rows * cols * tile * tile


class TestGrayscale:
    def test_two_point_range(self):
        pix = gray_pixels(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(pix, [[0, 255], [255, 0]])

    def test_constant_tile_all_zero(self):
        pix = gray_pixels(np.full((4, 4), 3.7))
        assert pix.dtype == np.uint8
        assert (pix == 0).all()

    def test_rounding(self):
        pix = gray_pixels(np.array([[0.0, 0.3, 1.0]]))
        np.testing.assert_array_equal(pix, [[0, 76, 255]])  # rint(76.5-eps)

    def test_full_range_endpoints(self, rng):
        for _ in range(20):
            values = rng.normal(size=(16, 16)) * rng.uniform(0.1, 1e4)
            pix = gray_pixels(values)
            assert pix.min() == 0 and pix.max() == 255

    def test_affine_invariance(self, rng):
        # gray(a*x + b) == gray(x) for a > 0: min-max mapping is affine-invariant
        for _ in range(50):
            values = rng.normal(size=(8, 8))
            a = float(rng.uniform(0.05, 50.0))
            b = float(rng.normal() * 100.0)
            np.testing.assert_array_equal(
                gray_pixels(values), gray_pixels(a * values + b))

    def test_tile_to_gray_copies_origin(self):
        tile = Tile(values=np.zeros((4, 4), dtype=np.float32),
                    origin_channel=7, origin_sample=12, tile_size=4, source="x")
        gray = tile_to_gray(tile)
        assert (gray.origin_channel, gray.origin_sample, gray.tile_size) == (7, 12, 4)
        assert gray.source == "x"


class TestPgm:
    def test_roundtrip(self, tmp_path, rng):
        pix = rng.integers(0, 256, size=(5, 9)).astype(np.uint8)
        path = tmp_path / "t.pgm"
        write_pgm(pix, path)
        np.testing.assert_array_equal(read_pgm(path), pix)

    def test_payload_starting_with_whitespace_bytes(self, tmp_path):
        # raster bytes that look like ASCII whitespace must not be eaten
        pix = np.full((3, 3), 0x0A, dtype=np.uint8)
        pix[0, 0] = 0x20
        path = tmp_path / "ws.pgm"
        write_pgm(pix, path)
        np.testing.assert_array_equal(read_pgm(path), pix)

    def test_header(self, tmp_path):
        path = tmp_path / "h.pgm"
        write_pgm(np.zeros((2, 7), dtype=np.uint8), path)
        assert path.read_bytes().startswith(b"P5\n7 2\n255\n")


class TestExportAndManifest:
    def test_naming_convention(self):
        gray = GrayTile(pixels=np.zeros((200, 200), dtype=np.uint8),
                        origin_channel=5500, origin_sample=0, tile_size=200)
        assert tile_image_name(gray) == "c5500_s0_t200.pgm"

    def test_source_hash_disambiguates(self, tmp_path):
        kw = dict(pixels=np.zeros((4, 4), dtype=np.uint8),
                  origin_channel=5, origin_sample=0, tile_size=4)
        a = export_labeled_tile(GrayTile(source="fileA", **kw), "waves", tmp_path)
        b = export_labeled_tile(GrayTile(source="fileB", **kw), "waves", tmp_path)
        assert a != b
        assert a.parent == b.parent == tmp_path / "waves"

    def test_unknown_label(self, tmp_path):
        gray = GrayTile(pixels=np.zeros((2, 2), dtype=np.uint8),
                        origin_channel=0, origin_sample=0, tile_size=2)
        with pytest.raises(ValueError, match="unknown label"):
            export_labeled_tile(gray, "saturated", tmp_path)

    def test_manifest_roundtrip_and_validate(self, tmp_path):
        manifest = CorpusManifest(root=str(tmp_path), tile_size=4, seed=9)
        for i, label in enumerate(["noise", "waves", "noise"]):
            gray = GrayTile(pixels=np.zeros((4, 4), dtype=np.uint8),
                            origin_channel=i, origin_sample=0, tile_size=4)
            export_labeled_tile(gray, label, tmp_path, manifest)
        path = manifest.save()
        back = CorpusManifest.load(path)
        assert back.counts == {"noise": 2, "waves": 1}
        assert back.records == manifest.records
        back.validate()
        (tmp_path / back.records[0][0]).unlink()
        with pytest.raises(FileNotFoundError):
            back.validate()

    def test_manifest_rejects_unknown_label(self, tmp_path):
        manifest = CorpusManifest(root=str(tmp_path), tile_size=4, seed=0)
        with pytest.raises(ValueError, match="unknown label"):
            manifest.add("x/y.pgm", "interfering")
