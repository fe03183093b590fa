"""Tiled inference: probability maps over segments, parallel corpus scans,
and daily-occurrence smoothing.

Tiles are grayscale-normalized with the same routine the training export
uses, scaled to [0, 1], and batched through the classifier in evaluation
mode.  Corpus scans parallelize over files with a spawned process pool whose
workers run single-threaded BLAS; results are gathered by input order, so
the output is independent of worker count and scheduling.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .net import Model, load_checkpoint, predict_proba
from .store import DasSegment, read_segment, tile_grid_shape, tile_segment, tile_to_gray, write_pgm


@dataclass
class ProbabilityMap:
    """Grid of waves probabilities aligned with the tile grid
    (rows = channel blocks, columns = sample blocks)."""

    probs: np.ndarray
    tile_size: int
    stride: int
    source: str = ""

    def __post_init__(self):
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return float(self.probs.mean())

    def save_csv(self, path) -> None:
        lines = ["tile_row,tile_col,p_waves"]
        for i in range(self.probs.shape[0]):
            for j in range(self.probs.shape[1]):
                lines.append(f"{i},{j},{self.probs[i, j]:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")

    def save_heatmap_pgm(self, path) -> None:
        write_pgm(np.rint(self.probs * 255.0).astype(np.uint8), path)


@dataclass
class ScanRow:
    path: str
    mean_p: float
    n_tiles: int
    error: str | None = None


@dataclass
class DailyCurve:
    """Per-file mean probabilities with a downsampled, smoothed overlay."""

    raw: np.ndarray
    factor: int
    kernel_sigma: float
    smoothed: np.ndarray

    def save_csv(self, path) -> None:
        lines = ["index,raw_mean,smoothed"]
        for i, value in enumerate(self.raw):
            block = i // self.factor
            sm = self.smoothed[block] if block < len(self.smoothed) else self.smoothed[-1]
            lines.append(f"{i},{value:.6f},{sm:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


def tiles_to_batch(tiles) -> np.ndarray:
    """Grayscale-normalize tiles into a [N, 1, T, T] float batch in [0, 1].

    Identical to reading back an exported training image: uint8 pixels
    divided by 255.
    """
    grays = [tile_to_gray(t).pixels for t in tiles]
    batch = np.stack(grays).astype(np.float32) / 255.0
    return batch[:, None, :, :]


def infer_segment(model: Model, segment: DasSegment, tile_size: int,
                  stride: int | None = None) -> ProbabilityMap:
    """Probability map over a segment at the given tiling."""
    if stride is None:
        stride = tile_size
    if model.config.input_size != tile_size:
        raise ValueError(
            f"model input size {model.config.input_size} != tile size {tile_size}"
        )
    tiles = tile_segment(segment, tile_size, stride)
    n_rows, n_cols = tile_grid_shape(segment.n_channels, segment.n_samples,
                                     tile_size, stride)
    probs = predict_proba(model, tiles_to_batch(tiles))
    return ProbabilityMap(
        probs=probs.reshape(n_rows, n_cols).astype(np.float64),
        tile_size=tile_size, stride=stride,
    )


def infer_overlapping(model: Model, segment: DasSegment, stride: int) -> ProbabilityMap:
    """Dense map from overlapping windows at the model's input size."""
    tile_size = model.config.input_size
    if not 1 <= stride <= tile_size:
        raise ValueError(f"stride must lie in [1, {tile_size}], got {stride}")
    return infer_segment(model, segment, tile_size, stride)


def _scan_one(model: Model, path, tile_size: int, stride: int) -> ScanRow:
    try:
        segment = read_segment(path)
        pmap = infer_segment(model, segment, tile_size, stride)
        return ScanRow(path=str(path), mean_p=pmap.mean, n_tiles=pmap.probs.size)
    except Exception as exc:  # fault isolation: record and continue
        return ScanRow(path=str(path), mean_p=float("nan"), n_tiles=0, error=str(exc))


_WORKER_MODEL = None
_WORKER_ARGS = None


def _worker_init(checkpoint_path, tile_size, stride):
    global _WORKER_MODEL, _WORKER_ARGS
    _WORKER_MODEL = load_checkpoint(checkpoint_path)
    _WORKER_ARGS = (tile_size, stride)


def _worker_scan(path) -> ScanRow:
    return _scan_one(_WORKER_MODEL, path, *_WORKER_ARGS)


@contextmanager
def _single_thread_blas_env():
    """Make spawned children single-threaded (they inherit os.environ)."""
    keys = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
    saved = {k: os.environ.get(k) for k in keys}
    for k in keys:
        os.environ[k] = "1"
    try:
        yield
    finally:
        for k, v in saved.items():
            if v is None:
                del os.environ[k]
            else:
                os.environ[k] = v


def scan_corpus(checkpoint_path, paths, n_workers: int = 1,
                tile_size: int | None = None, stride: int | None = None) -> list:
    """Mean waves probability for every file, in input order.

    Workers each load the checkpoint and scan whole files; a file that fails
    to read yields an error row without stopping the scan.  One worker runs
    in-process; results are bit-identical for any worker count.
    """
    paths = [str(p) for p in paths]
    model = load_checkpoint(checkpoint_path)
    if tile_size is None:
        tile_size = model.config.input_size
    if stride is None:
        stride = tile_size
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    if n_workers == 1:
        with threadpool_limits(limits=1):
            return [_scan_one(model, p, tile_size, stride) for p in paths]
    ctx = get_context("spawn")
    with _single_thread_blas_env():
        pool = ctx.Pool(
            processes=n_workers,
            initializer=_worker_init,
            initargs=(str(checkpoint_path), tile_size, stride),
        )
    with pool:
        return pool.map(_worker_scan, paths, chunksize=1)


def scan_rows_to_csv(rows, path) -> None:
    lines = ["path,mean_p,n_tiles,error"]
    for row in rows:
        err = row.error or ""
        mean = "" if np.isnan(row.mean_p) else f"{row.mean_p:.6f}"
        lines.append(f"{row.path},{mean},{row.n_tiles},{err}")
    Path(path).write_text("\n".join(lines) + "\n")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete Gaussian truncated at 4 sigma, renormalized to unit mass."""
    if sigma <= 0:
        raise ValueError("kernel sigma must be positive")
    radius = int(np.ceil(4.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    return kernel / kernel.sum()


def daily_curve(values, factor: int = 10, kernel_sigma: float = 6.0) -> DailyCurve:
    """Block-mean downsample by `factor`, then smooth with a Gaussian kernel.

    The kernel is truncated at 4 sigma and renormalized; boundaries are
    reflect-padded, so a constant series is reproduced to within kernel
    normalization error.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("empty series")
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    n_blocks = -(-values.size // factor)  # ceil
    down = np.empty(n_blocks, dtype=np.float64)
    for b in range(n_blocks):
        down[b] = values[b * factor : (b + 1) * factor].mean()
    kernel = gaussian_kernel(kernel_sigma)
    radius = (kernel.size - 1) // 2
    if down.size == 1:
        smoothed = down.copy()
    else:
        padded = np.pad(down, radius, mode="reflect")
        smoothed = np.convolve(padded, kernel, mode="valid")
    return DailyCurve(raw=values, factor=factor, kernel_sigma=kernel_sigma,
                      smoothed=smoothed)
