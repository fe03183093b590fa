"""Rule-based tile labeling and training-corpus assembly.

A tile is assigned exactly one of four categories, in this precedence:

  1. saturated  -- region standard deviation above the saturation threshold
  2. noise      -- the largest average spectral amplitude below the split
                   frequency is smaller than the smallest above it
  3. waves      -- the largest average spectral amplitude below the split
                   frequency is at least `waves_ratio` times the mean of the
                   average amplitudes from the split frequency to Nyquist
  4. ambiguous  -- anything else

Saturated and ambiguous tiles are excluded from training corpora; the
binary corpus keeps only noise/waves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import average_spectral_amplitude, channel_spectra, region_sigma
from .store import (
    CorpusManifest,
    CorpusShortfallError,
    DasSegment,
    LABELS,
    Tile,
    export_labeled_tile,
    tile_segment,
    tile_to_gray,
)
from .synth import SceneConfig, gen_segment

CATEGORY_NOISE = "noise"
CATEGORY_WAVES = "waves"
CATEGORY_SATURATED = "saturated"
CATEGORY_AMBIGUOUS = "ambiguous"
CATEGORIES = (CATEGORY_NOISE, CATEGORY_WAVES, CATEGORY_SATURATED, CATEGORY_AMBIGUOUS)


@dataclass
class LabelCriteria:
    """Thresholds for the tile labeling rules.

    The spectral thresholds are expressed in Hz; the sigma thresholds are in
    the instrument's raw count units (defaults taken from the 500 Hz fiber
    deployment this pipeline models; synthetic data may scale them).
    """

    split_freq_hz: float = 40.0
    waves_ratio: float = 2.0
    saturation_sigma: float = 1000.0
    noise_sigma_hint: float = 200.0

    def __post_init__(self):
        if self.split_freq_hz <= 0:
            raise ValueError("split_freq_hz must be positive")
        if self.waves_ratio <= 1:
            raise ValueError("waves_ratio must be greater than 1")
        if not self.saturation_sigma > self.noise_sigma_hint > 0:
            raise ValueError("need saturation_sigma > noise_sigma_hint > 0")

    def to_dict(self) -> dict:
        return {
            "split_freq_hz": self.split_freq_hz,
            "waves_ratio": self.waves_ratio,
            "saturation_sigma": self.saturation_sigma,
            "noise_sigma_hint": self.noise_sigma_hint,
        }

    @classmethod
    def from_json(cls, path) -> "LabelCriteria":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class TileLabel:
    """Label decision plus the diagnostics it was derived from."""

    category: str
    region_sigma: float
    max_below: float
    min_above: float
    mean_above: float

    def decide(self, criteria: LabelCriteria) -> str:
        """Re-derive the category from the stored diagnostics."""
        if self.region_sigma > criteria.saturation_sigma:
            return CATEGORY_SATURATED
        if self.max_below < self.min_above:
            return CATEGORY_NOISE
        if self.max_below >= criteria.waves_ratio * self.mean_above:
            return CATEGORY_WAVES
        return CATEGORY_AMBIGUOUS


def classify_tile(tile, criteria: LabelCriteria, sample_rate: float) -> TileLabel:
    """Apply the labeling rules to a tile (or bare 2D region).

    Bins with center below `split_freq_hz` count as "below"; bins at or
    above it count as "above".
    """
    values = tile.values if isinstance(tile, Tile) else np.asarray(tile)
    if values.shape[1] < 2:
        raise ValueError("tile must be at least 2 samples long per channel")
    if criteria.split_freq_hz >= sample_rate / 2.0:
        raise ValueError("split frequency must lie below Nyquist")

    sigma = region_sigma(values)
    summary = average_spectral_amplitude(channel_spectra(values, sample_rate))
    below = summary.freqs < criteria.split_freq_hz
    above = ~below
    # Spectra always include the Nyquist bin, so `above` is never empty; a
    # tile too short to resolve anything below the split counts as noise.
    max_below = float(summary.avg_amplitude[below].max()) if below.any() else -np.inf
    min_above = float(summary.avg_amplitude[above].min())
    mean_above = float(summary.avg_amplitude[above].mean())

    label = TileLabel(
        category=CATEGORY_AMBIGUOUS,
        region_sigma=sigma,
        max_below=max_below,
        min_above=min_above,
        mean_above=mean_above,
    )
    label.category = label.decide(criteria)
    return label


def _materialize(source) -> DasSegment:
    if isinstance(source, DasSegment):
        return source
    if isinstance(source, SceneConfig):
        return gen_segment(source)
    raise TypeError(f"unsupported source type {type(source).__name__}")


def build_training_set(sources: Sequence, criteria: LabelCriteria, tile_size: int,
                       out_root, per_label_target: int, seed: int = 0,
                       source_ids: Sequence[str] | None = None) -> CorpusManifest:
    """Build a balanced binary corpus from segments or scene configs.

    Every source is cut into non-overlapping tiles, each tile is classified,
    saturated and ambiguous tiles are discarded, and a seeded random
    selection of `per_label_target` tiles per label is exported as grayscale
    images.  Raises CorpusShortfallError naming the scarce class when the
    target cannot be met.
    """
    if per_label_target < 1:
        raise ValueError("per_label_target must be positive")
    segments = [_materialize(s) for s in sources]
    if source_ids is None:
        source_ids = [f"src{i:05d}" for i in range(len(segments))]
    if len(source_ids) != len(segments):
        raise ValueError("source_ids length must match sources")

    candidates = {label: [] for label in LABELS}
    all_tiles = []
    for src_idx, segment in enumerate(segments):
        tiles = tile_segment(segment, tile_size, tile_size, source=source_ids[src_idx])
        all_tiles.append(tiles)
        for tile_idx, tile in enumerate(tiles):
            decision = classify_tile(tile, criteria, segment.sample_rate_hz)
            if decision.category in LABELS:
                candidates[decision.category].append((src_idx, tile_idx))

    rng = np.random.default_rng(seed)
    selected = {}
    for label in LABELS:
        pool = candidates[label]
        if len(pool) < per_label_target:
            raise CorpusShortfallError(
                f"insufficient {label} tiles: have {len(pool)}, need {per_label_target}"
            )
        order = rng.permutation(len(pool))[:per_label_target]
        selected[label] = [pool[i] for i in order]

    manifest = CorpusManifest(root=str(out_root), tile_size=tile_size, seed=seed)
    for label in LABELS:
        for src_idx, tile_idx in selected[label]:
            gray = tile_to_gray(all_tiles[src_idx][tile_idx])
            export_labeled_tile(gray, label, out_root, manifest)
    manifest.save()
    return manifest
