"""Segment/tile data model, DASF file I/O, grayscale export and corpus layout.

A DAS recording is stored as a 2D strain-rate array (rows = fiber channels,
columns = time samples).  Segments are written to disk in the DASF container:

    bytes 0-3    ASCII magic "DASF"
    bytes 4-7    format version, u32 little-endian (currently 1)
    bytes 8-15   header length, u64 little-endian
    header       UTF-8 JSON with keys n_channels, n_samples, sample_rate_hz,
                 channel_start, channel_spacing_m, start_time_ns, dtype="f32le"
    payload      n_channels * n_samples float32 little-endian, channel-major

Training images are exported as binary PGM ("P5", maxval 255) under a
directory-per-label layout, indexed by a JSON manifest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Corpus labels, index = alphabetical position (noise=0, waves=1).
LABELS = ("noise", "waves")

DASF_MAGIC = b"DASF"
DASF_VERSION = 1


class DasfFormatError(ValueError):
    """Raised when a DASF file cannot be parsed."""


class CorpusShortfallError(RuntimeError):
    """Raised when a corpus request cannot be filled for some label."""


@dataclass
class DasSegment:
    """Immutable 2D strain-rate recording plus acquisition metadata.

    Attributes:
        data: float32 array of shape (n_channels, n_samples).
        sample_rate_hz: acquisition rate in Hz.
        channel_start: absolute index of the first fiber channel in `data`.
        channel_spacing_m: distance between adjacent channels in meters.
        start_time_ns: epoch nanoseconds of the first sample.
    """

    data: np.ndarray
    sample_rate_hz: float = 500.0
    channel_start: int = 0
    channel_spacing_m: float = 2.0
    start_time_ns: int = 0

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"segment data must be 2D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"segment must be at least 1x1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("non-finite values in segment data")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.channel_spacing_m <= 0:
            raise ValueError(f"channel_spacing_m must be positive, got {self.channel_spacing_m}")
        self.data = arr

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    @property
    def nyquist_hz(self) -> float:
        return self.sample_rate_hz / 2.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, DasSegment):
            return NotImplemented
        return (
            np.array_equal(self.data, other.data)
            and self.sample_rate_hz == other.sample_rate_hz
            and self.channel_start == other.channel_start
            and self.channel_spacing_m == other.channel_spacing_m
            and self.start_time_ns == other.start_time_ns
        )


def write_segment(segment: DasSegment, path) -> None:
    """Write a segment to `path` in DASF format (bit-exact round trip)."""
    if not np.isfinite(segment.data).all():
        raise ValueError("non-finite values in segment data")
    header = {
        "n_channels": segment.n_channels,
        "n_samples": segment.n_samples,
        "sample_rate_hz": segment.sample_rate_hz,
        "channel_start": segment.channel_start,
        "channel_spacing_m": segment.channel_spacing_m,
        "start_time_ns": segment.start_time_ns,
        "dtype": "f32le",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DASF_MAGIC)
        fh.write(struct.pack("<I", DASF_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(segment.data.astype("<f4", copy=False).tobytes())


def read_segment(path) -> DasSegment:
    """Read a DASF file written by :func:`write_segment`."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DasfFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != DASF_MAGIC:
        raise DasfFormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != DASF_VERSION:
        raise DasfFormatError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise DasfFormatError(f"{path}: truncated header (declared {header_len} bytes)")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DasfFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("dtype") != "f32le":
        raise DasfFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    n_channels, n_samples = int(header["n_channels"]), int(header["n_samples"])
    payload = raw[16 + header_len :]
    expected = n_channels * n_samples * 4
    if len(payload) < expected:
        raise DasfFormatError(
            f"{path}: truncated payload ({len(payload)} of {expected} bytes)"
        )
    if len(payload) > expected:
        raise DasfFormatError(
            f"{path}: header/payload size mismatch ({len(payload)} vs {expected} bytes)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n_channels, n_samples)
    return DasSegment(
        data=data.copy(),
        sample_rate_hz=float(header["sample_rate_hz"]),
        channel_start=int(header["channel_start"]),
        channel_spacing_m=float(header["channel_spacing_m"]),
        start_time_ns=int(header["start_time_ns"]),
    )


@dataclass
class Tile:
    """A tile_size x tile_size window of a segment.

    `origin_channel` is absolute (segment.channel_start + row offset);
    `origin_sample` is the column offset into the segment.  `source` is an
    optional identity of the parent recording, used to keep export names
    collision-free across segments.
    """

    values: np.ndarray
    origin_channel: int
    origin_sample: int
    tile_size: int
    source: str = ""

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ValueError(f"tile_size must be positive, got {self.tile_size}")
        if self.values.shape != (self.tile_size, self.tile_size):
            raise ValueError(
                f"tile values shape {self.values.shape} != ({self.tile_size}, {self.tile_size})"
            )


@dataclass
class GrayTile:
    """Grayscale image of a tile: uint8 pixels in [0, 255] plus tile origin."""

    pixels: np.ndarray
    origin_channel: int
    origin_sample: int
    tile_size: int
    source: str = ""

    def __post_init__(self):
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {self.pixels.dtype}")


def tile_grid_shape(n_channels: int, n_samples: int, tile_size: int, stride: int):
    """Grid dimensions (channel blocks, sample blocks) for a tiling."""
    if tile_size > n_channels or tile_size > n_samples:
        raise ValueError(
            f"tile_size {tile_size} larger than segment dims ({n_channels}, {n_samples})"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return (
        (n_channels - tile_size) // stride + 1,
        (n_samples - tile_size) // stride + 1,
    )


def tile_segment(segment: DasSegment, tile_size: int, stride: int | None = None,
                 source: str = "") -> list[Tile]:
    """Cut a segment into tiles, channel blocks outer, sample blocks inner.

    With stride == tile_size the tiles are disjoint; trailing remainders
    smaller than tile_size are dropped.
    """
    if stride is None:
        stride = tile_size
    n_rows, n_cols = tile_grid_shape(segment.n_channels, segment.n_samples, tile_size, stride)
    tiles = []
    for i in range(n_rows):
        r = i * stride
        for j in range(n_cols):
            c = j * stride
            tiles.append(Tile(
                values=segment.data[r : r + tile_size, c : c + tile_size],
                origin_channel=segment.channel_start + r,
                origin_sample=c,
                tile_size=tile_size,
                source=source,
            ))
    return tiles


def gray_pixels(values: np.ndarray) -> np.ndarray:
    """Min-max map a 2D array to uint8: round(255*(v-min)/(max-min)).

    A constant array maps to all zeros.  This single routine is shared by the
    training export and by inference so both see byte-identical images.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("non-finite values in tile")
    vmin = v.min()
    vmax = v.max()
    if vmax == vmin:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - vmin) * (255.0 / (vmax - vmin))).astype(np.uint8)


def tile_to_gray(tile: Tile) -> GrayTile:
    """Grayscale-normalize a tile (per-tile min-max to [0, 255])."""
    return GrayTile(
        pixels=gray_pixels(tile.values),
        origin_channel=tile.origin_channel,
        origin_sample=tile.origin_sample,
        tile_size=tile.tile_size,
        source=tile.source,
    )


def write_pgm(pixels: np.ndarray, path) -> None:
    """Write a uint8 2D array as a binary PGM (P5, maxval 255)."""
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError("write_pgm expects a 2D uint8 array")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm`.

    The raster begins right after the single whitespace byte that follows
    the maxval token, so the header is scanned token-wise (a naive
    whitespace split would eat raster bytes that look like whitespace).
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(int(raw[start:pos]))
    pos += 1  # the single whitespace byte after maxval
    w, h, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos : pos + w * h]
    if len(body) < w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def tile_image_name(gray: GrayTile) -> str:
    """Deterministic collision-free file name from tile origin metadata."""
    base = f"c{gray.origin_channel}_s{gray.origin_sample}_t{gray.tile_size}"
    if gray.source:
        base += "_" + hashlib.sha1(gray.source.encode("utf-8")).hexdigest()[:8]
    return base + ".pgm"


@dataclass
class CorpusManifest:
    """Index of an exported training corpus (directory-per-label layout)."""

    root: str
    tile_size: int
    seed: int
    counts: dict = field(default_factory=lambda: {label: 0 for label in LABELS})
    records: list = field(default_factory=list)  # (relative path, label)

    def add(self, rel_path: str, label: str) -> None:
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        self.records.append((rel_path, label))
        self.counts[label] = self.counts.get(label, 0) + 1

    def paths(self, label: str | None = None) -> list:
        sel = self.records if label is None else [r for r in self.records if r[1] == label]
        return [Path(self.root) / rel for rel, _ in sel]

    def validate(self) -> None:
        for rel, label in self.records:
            if label not in LABELS:
                raise ValueError(f"unknown label {label!r} in manifest")
            p = Path(self.root) / rel
            if not p.is_file():
                raise FileNotFoundError(f"manifest entry missing on disk: {p}")
            if Path(rel).parts[0] != label:
                raise ValueError(f"manifest entry {rel} not under its label directory")

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else Path(self.root) / "manifest.json"
        doc = {
            "root": ".",
            "tile_size": self.tile_size,
            "seed": self.seed,
            "counts": {k: self.counts.get(k, 0) for k in LABELS},
            "records": [[rel, label] for rel, label in self.records],
        }
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        manifest = cls(
            root=str(path.parent if doc.get("root") in (None, ".") else doc["root"]),
            tile_size=int(doc["tile_size"]),
            seed=int(doc["seed"]),
        )
        manifest.counts = {k: 0 for k in LABELS}
        for rel, label in doc["records"]:
            manifest.add(rel, label)
        return manifest


def export_labeled_tile(gray: GrayTile, label: str, root,
                        manifest: CorpusManifest | None = None) -> Path:
    """Write a grayscale tile under root/<label>/ and record it in `manifest`."""
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r} (expected one of {LABELS})")
    root = Path(root)
    label_dir = root / label
    label_dir.mkdir(parents=True, exist_ok=True)
    name = tile_image_name(gray)
    path = label_dir / name
    write_pgm(gray.pixels, path)
    if manifest is not None:
        manifest.add(str(Path(label) / name), label)
    return path
