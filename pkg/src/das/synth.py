"""Synthetic DAS scenes: shaped background noise, surface-wave events,
saturation clipping, and per-tile ground truth.

Scenes reproduce the four signal families seen in traffic-noise recordings:
instrument noise whose spectral amplitude rises with frequency, coherent
V-shaped surface waves peaking below 40 Hz, interfering overlapping waves,
and clipped (saturated) regions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .store import (
    CorpusManifest,
    CorpusShortfallError,
    DasSegment,
    LABELS,
    export_labeled_tile,
    tile_grid_shape,
    tile_segment,
    tile_to_gray,
)

# Synthetic instrument noise carries most of its energy above this frequency;
# the band below it is attenuated by 1/(1+slope) so that wave energy (which
# peaks below it) stands out the way it does on real fibers.
QUIET_BAND_HZ = 40.0

GT_NOISE = "noise"
GT_WAVES = "waves"
GT_INTERFERING = "interfering"
GT_SATURATED = "saturated"
GT_AMBIGUOUS = "ambiguous"
GT_LABELS = (GT_NOISE, GT_WAVES, GT_INTERFERING, GT_SATURATED, GT_AMBIGUOUS)


@dataclass
class WaveEvent:
    """One coherent surface-wave event with V-shaped moveout.

    The wavelet is a Ricker pulse of peak frequency `peak_frequency_hz`,
    arriving at channel c with delay |c - apex_channel| * spacing / velocity
    and amplitude `amplitude * exp(-decay_per_m * distance)`.
    """

    apex_channel: int
    apex_time_s: float
    apparent_velocity_mps: float
    peak_frequency_hz: float
    amplitude: float
    decay_per_m: float = 0.0

    def __post_init__(self):
        if self.apparent_velocity_mps <= 0:
            raise ValueError(f"apparent velocity must be positive, got {self.apparent_velocity_mps}")
        if not 2.5 < self.peak_frequency_hz < 40.0:
            raise ValueError(
                f"peak frequency must lie in (2.5, 40) Hz, got {self.peak_frequency_hz}"
            )
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be non-negative, got {self.amplitude}")
        if self.decay_per_m < 0:
            raise ValueError(f"decay_per_m must be non-negative, got {self.decay_per_m}")


@dataclass
class SceneConfig:
    """Full description of one synthetic scene (deterministic given seed)."""

    n_channels: int
    n_samples: int
    sample_rate_hz: float = 500.0
    noise_sigma: float = 150.0
    noise_spectral_slope: float = 2.0
    events: list = field(default_factory=list)
    saturation_clip: float | None = None
    interference_density: float = 0.0
    seed: int = 0
    # Ground-truth margins: a tile is "waves" when exactly one event carries
    # at least snr_margin times the tile's noise energy; events below
    # negligible_ratio times the noise energy are ignored; anything between
    # is "ambiguous".
    snr_margin: float = 2.0
    negligible_ratio: float = 0.25

    def __post_init__(self):
        if self.n_channels < 1 or self.n_samples < 1:
            raise ValueError("scene dimensions must be positive")
        if self.noise_sigma <= 0:
            raise ValueError(f"noise_sigma must be positive, got {self.noise_sigma}")
        if self.noise_spectral_slope < 0:
            raise ValueError("noise_spectral_slope must be non-negative")
        if not np.isfinite(self.interference_density) or self.interference_density < 0:
            raise ValueError("interference_density must be finite and non-negative")
        if self.saturation_clip is not None and self.saturation_clip <= 0:
            raise ValueError("saturation_clip must be positive when set")

    def to_dict(self) -> dict:
        doc = {
            "n_channels": self.n_channels,
            "n_samples": self.n_samples,
            "sample_rate_hz": self.sample_rate_hz,
            "noise_sigma": self.noise_sigma,
            "noise_spectral_slope": self.noise_spectral_slope,
            "events": [vars(e).copy() for e in self.events],
            "saturation_clip": self.saturation_clip,
            "interference_density": self.interference_density,
            "seed": self.seed,
            "snr_margin": self.snr_margin,
            "negligible_ratio": self.negligible_ratio,
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneConfig":
        doc = dict(doc)
        doc["events"] = [WaveEvent(**e) for e in doc.get("events", [])]
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "SceneConfig":
        return cls.from_dict(json.loads(open(path).read()))


@dataclass
class GroundTruthMask:
    """Per-tile labels aligned with the tile grid of the same parameters."""

    labels: np.ndarray  # dtype <U11, shape (channel blocks, sample blocks)
    tile_size: int
    stride: int

    def counts(self) -> dict:
        out = {label: 0 for label in GT_LABELS}
        values, n = np.unique(self.labels, return_counts=True)
        for v, k in zip(values, n):
            out[str(v)] = int(k)
        return out

    def to_dict(self) -> dict:
        return {
            "tile_size": self.tile_size,
            "stride": self.stride,
            "labels": self.labels.tolist(),
        }


def ricker(t: np.ndarray, peak_frequency_hz: float) -> np.ndarray:
    """Ricker (Mexican-hat) wavelet with unit peak amplitude at t = 0."""
    a = (np.pi * peak_frequency_hz * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def gen_noise(shape, sigma: float, slope: float, seed: int,
              sample_rate_hz: float = 500.0, channel_start: int = 0,
              channel_spacing_m: float = 2.0, start_time_ns: int = 0) -> DasSegment:
    """Generate background noise with amplitude spectrum rising with frequency.

    slope = 0 gives flat white noise with per-sample standard deviation
    `sigma`.  For slope > 0 the spectral amplitude is weighted by
    1 + slope * f / f_nyquist, the band below QUIET_BAND_HZ is attenuated by
    1/(1 + 2*slope), and the result is rescaled so its overall standard
    deviation is `sigma`.  Deterministic given `seed`.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    n_channels, n_samples = shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_channels, n_samples)) * sigma
    if slope > 0:
        spec = np.fft.rfft(x, axis=1)
        freqs = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate_hz)
        weights = 1.0 + slope * freqs / (sample_rate_hz / 2.0)
        weights[freqs < QUIET_BAND_HZ] /= 1.0 + 2.0 * slope
        spec *= weights
        x = np.fft.irfft(spec, n=n_samples, axis=1)
        x *= sigma / x.std()
    return DasSegment(
        data=x.astype(np.float32),
        sample_rate_hz=sample_rate_hz,
        channel_start=channel_start,
        channel_spacing_m=channel_spacing_m,
        start_time_ns=start_time_ns,
    )


def event_field(event: WaveEvent, n_channels: int, n_samples: int,
                sample_rate_hz: float, channel_start: int = 0,
                channel_spacing_m: float = 2.0) -> np.ndarray:
    """Clean (noise-free) field of one event over a segment grid."""
    if event.peak_frequency_hz >= sample_rate_hz / 2.0:
        raise ValueError(
            f"event peak frequency {event.peak_frequency_hz} Hz >= Nyquist "
            f"{sample_rate_hz / 2.0} Hz"
        )
    duration = n_samples / sample_rate_hz
    if not 0.0 <= event.apex_time_s <= duration:
        raise ValueError(
            f"apex time {event.apex_time_s}s outside segment range [0, {duration}]s"
        )
    t = np.arange(n_samples) / sample_rate_hz
    channels = channel_start + np.arange(n_channels)
    dist = np.abs(channels - event.apex_channel) * channel_spacing_m
    arrival = event.apex_time_s + dist / event.apparent_velocity_mps
    gains = event.amplitude * np.exp(-event.decay_per_m * dist)
    tau = t[None, :] - arrival[:, None]
    return gains[:, None] * ricker(tau, event.peak_frequency_hz)


def add_wave_event(segment: DasSegment, event: WaveEvent) -> DasSegment:
    """Return a new segment with the event's wavefield added."""
    fld = event_field(
        event, segment.n_channels, segment.n_samples, segment.sample_rate_hz,
        segment.channel_start, segment.channel_spacing_m,
    )
    return DasSegment(
        data=(segment.data.astype(np.float64) + fld).astype(np.float32),
        sample_rate_hz=segment.sample_rate_hz,
        channel_start=segment.channel_start,
        channel_spacing_m=segment.channel_spacing_m,
        start_time_ns=segment.start_time_ns,
    )


def _tile_sums(arr: np.ndarray, tile_size: int, stride: int) -> np.ndarray:
    """Sum of `arr` over each tile window, via a summed-area table."""
    n_rows, n_cols = tile_grid_shape(arr.shape[0], arr.shape[1], tile_size, stride)
    sat = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(arr, axis=0), axis=1, out=sat[1:, 1:])
    r0 = np.arange(n_rows)[:, None] * stride
    c0 = np.arange(n_cols)[None, :] * stride
    r1, c1 = r0 + tile_size, c0 + tile_size
    return sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]


def _interference_events(config: SceneConfig, rng: np.random.Generator) -> list:
    """Randomly placed extra events; overlaps produce interfering regions."""
    n_cells = config.n_channels * config.n_samples
    count = rng.poisson(config.interference_density * n_cells / 1e6)
    duration = config.n_samples / config.sample_rate_hz
    events = []
    for _ in range(int(count)):
        events.append(WaveEvent(
            apex_channel=int(rng.integers(0, config.n_channels)),
            apex_time_s=float(rng.uniform(0.0, duration)),
            apparent_velocity_mps=float(rng.uniform(60.0, 400.0)),
            peak_frequency_hz=float(rng.uniform(5.0, 35.0)),
            amplitude=float(config.noise_sigma * rng.uniform(4.0, 12.0)),
            decay_per_m=float(rng.uniform(0.001, 0.01)),
        ))
    return events


def gen_segment(config: SceneConfig) -> DasSegment:
    """Render a scene's segment only (same realization as :func:`gen_scene`)."""
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    noise_seg = gen_noise(
        (config.n_channels, config.n_samples), config.noise_sigma,
        config.noise_spectral_slope, seeds[0], config.sample_rate_hz,
    )
    rng = np.random.default_rng(seeds[1])
    data = noise_seg.data.astype(np.float64)
    for event in list(config.events) + _interference_events(config, rng):
        data += event_field(
            event, config.n_channels, config.n_samples, config.sample_rate_hz,
            noise_seg.channel_start, noise_seg.channel_spacing_m,
        )
    if config.saturation_clip is not None:
        np.clip(data, -config.saturation_clip, config.saturation_clip, out=data)
    return DasSegment(
        data=data.astype(np.float32),
        sample_rate_hz=config.sample_rate_hz,
        channel_start=noise_seg.channel_start,
        channel_spacing_m=noise_seg.channel_spacing_m,
        start_time_ns=noise_seg.start_time_ns,
    )


def gen_scene(config: SceneConfig, tile_size: int, stride: int):
    """Render a scene and its ground-truth tile labels.

    Returns (segment, mask).  Tile label precedence: saturated when any
    sample in the tile clipped; interfering when two or more events are
    present above the negligible floor; waves when exactly one event
    dominates by the SNR margin; noise when total event energy is below the
    floor; ambiguous otherwise.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    noise_seg = gen_noise(
        (config.n_channels, config.n_samples), config.noise_sigma,
        config.noise_spectral_slope, seeds[0], config.sample_rate_hz,
    )
    noise = noise_seg.data.astype(np.float64)
    noise_energy = _tile_sums(noise * noise, tile_size, stride)

    rng = np.random.default_rng(seeds[1])
    all_events = list(config.events) + _interference_events(config, rng)

    data = noise.copy()
    event_energies = []
    for event in all_events:
        fld = event_field(
            event, config.n_channels, config.n_samples, config.sample_rate_hz,
            noise_seg.channel_start, noise_seg.channel_spacing_m,
        )
        data += fld
        event_energies.append(_tile_sums(fld * fld, tile_size, stride))

    if config.saturation_clip is not None:
        clip = config.saturation_clip
        clipped = (np.abs(data) > clip).astype(np.float64)
        clipped_counts = _tile_sums(clipped, tile_size, stride)
        np.clip(data, -clip, clip, out=data)
    else:
        clipped_counts = np.zeros_like(noise_energy)

    n_rows, n_cols = noise_energy.shape
    labels = np.full((n_rows, n_cols), GT_NOISE, dtype="<U11")
    if event_energies:
        stacked = np.stack(event_energies)  # (n_events, rows, cols)
        floor = config.negligible_ratio * noise_energy
        present = stacked >= floor[None, :, :]
        n_present = present.sum(axis=0)
        total = stacked.sum(axis=0)
        strongest = stacked.max(axis=0)
        labels[total >= floor] = GT_AMBIGUOUS
        waves = (n_present == 1) & (strongest >= config.snr_margin * noise_energy)
        labels[waves] = GT_WAVES
        labels[n_present >= 2] = GT_INTERFERING
    labels[clipped_counts > 0] = GT_SATURATED

    segment = DasSegment(
        data=data.astype(np.float32),
        sample_rate_hz=config.sample_rate_hz,
        channel_start=noise_seg.channel_start,
        channel_spacing_m=noise_seg.channel_spacing_m,
        start_time_ns=noise_seg.start_time_ns,
    )
    return segment, GroundTruthMask(labels=labels, tile_size=tile_size, stride=stride)


def gen_labeled_corpus(configs: Sequence[SceneConfig], tile_size: int, out_root,
                       per_label: int, seed: int = 0) -> CorpusManifest:
    """Export a balanced grayscale corpus labeled by scene ground truth.

    Tiles are non-overlapping (stride = tile_size); saturated, interfering
    and ambiguous tiles are excluded.  Raises CorpusShortfallError when a
    label cannot reach `per_label` tiles.
    """
    candidates = {label: [] for label in LABELS}
    for scene_idx, config in enumerate(configs):
        _, mask = gen_scene(config, tile_size, tile_size)
        for label in LABELS:
            rows, cols = np.nonzero(mask.labels == label)
            candidates[label].extend(
                (scene_idx, int(r), int(c)) for r, c in zip(rows, cols)
            )

    rng = np.random.default_rng(seed)
    selected = {}
    for label in LABELS:
        pool = candidates[label]
        if len(pool) < per_label:
            raise CorpusShortfallError(
                f"insufficient {label} tiles: have {len(pool)}, need {per_label}"
            )
        order = rng.permutation(len(pool))[:per_label]
        selected[label] = [pool[i] for i in order]

    needed_scenes = sorted({s for sel in selected.values() for s, _, _ in sel})
    exported = {}
    for scene_idx in needed_scenes:
        segment, _ = gen_scene(configs[scene_idx], tile_size, tile_size)
        wanted = {
            (r, c): label
            for label in LABELS
            for s, r, c in selected[label]
            if s == scene_idx
        }
        tiles = tile_segment(segment, tile_size, tile_size, source=f"scene{scene_idx:05d}")
        _, n_cols = tile_grid_shape(segment.n_channels, segment.n_samples,
                                    tile_size, tile_size)
        for (r, c), label in wanted.items():
            tile = tiles[r * n_cols + c]
            exported[(scene_idx, r, c)] = (tile_to_gray(tile), label)

    manifest = CorpusManifest(root=str(out_root), tile_size=tile_size, seed=seed)
    for label in LABELS:
        for key in selected[label]:
            gray, lab = exported[key]
            export_labeled_tile(gray, lab, out_root, manifest)
    manifest.save()
    return manifest
