"""Exploratory statistics for DAS regions: amplitude histograms, single and
double Gaussian fits with reduced chi-square, per-channel amplitude spectra
and their cross-channel average.

Conventions fixed here so results are bit-stable:
  * DFT is the unnormalized forward transform; amplitude_k = |sum_n x_n e^{-2pi i k n / N}|.
  * Spectra cover positive-frequency bins k = 1..N//2, i.e. from
    sample_rate/N up to the Nyquist frequency.
  * Reduced chi-square uses unweighted residuals: (1/df) * sum (y_i - f_i)^2
    with df = n_points - n_params.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Histogram:
    """Equal-width histogram with counts and unit-area density."""

    bin_edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts)
        self.density = np.asarray(self.density, dtype=np.float64)
        if len(self.counts) != len(self.bin_edges) - 1:
            raise ValueError("counts length must be len(bin_edges) - 1")
        if len(self.density) != len(self.counts):
            raise ValueError("density length must match counts")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly ascending")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        area = float(np.sum(self.density * np.diff(self.bin_edges)))
        if abs(area - 1.0) > 1e-9:
            raise ValueError(f"density must integrate to 1, got {area}")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def n_bins(self) -> int:
        return len(self.counts)


def histogram(region: np.ndarray, n_bins: int) -> Histogram:
    """Equal-width histogram spanning [min, max] of the region's values."""
    values = np.asarray(region, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("region is empty")
    if not np.isfinite(values).all():
        raise ValueError("non-finite values in region")
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        raise ValueError("region is constant; histogram range is zero")
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    width = np.diff(edges)
    density = counts / (values.size * width)
    return Histogram(bin_edges=edges, counts=counts, density=density)


def reduced_chi_square(y, f, n_params: int) -> float:
    """(1/df) * sum((y_i - f_i)^2), df = len(y) - n_params, unweighted."""
    y = np.asarray(y, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if y.shape != f.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {f.shape}")
    df = y.size - n_params
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    r = y - f
    return float(np.dot(r, r) / df)


@dataclass
class GaussianComponent:
    amplitude: float
    mean: float
    sigma: float


@dataclass
class GaussianFitReport:
    """Result of a 1- or 2-component Gaussian least-squares fit."""

    components: list
    chi2_red: float
    df: int
    converged: bool
    n_iter: int

    def model(self, x: np.ndarray) -> np.ndarray:
        p = np.concatenate([[c.amplitude, c.mean, c.sigma] for c in self.components])
        return gaussian_mixture(np.asarray(x, dtype=np.float64), p)


def gaussian_mixture(x: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Sum of Gaussians a_i * exp(-(x-mu_i)^2 / (2 sigma_i^2))."""
    params = np.asarray(params, dtype=np.float64)
    out = np.zeros_like(x, dtype=np.float64)
    for a, mu, sig in params.reshape(-1, 3):
        z = (x - mu) / sig
        out += a * np.exp(-0.5 * z * z)
    return out


def _mixture_jacobian(x: np.ndarray, params: np.ndarray) -> np.ndarray:
    n = params.size // 3
    jac = np.empty((x.size, 3 * n), dtype=np.float64)
    for i in range(n):
        a, mu, sig = params[3 * i : 3 * i + 3]
        z = (x - mu) / sig
        e = np.exp(-0.5 * z * z)
        jac[:, 3 * i] = e
        jac[:, 3 * i + 1] = a * e * z / sig
        jac[:, 3 * i + 2] = a * e * z * z / sig
    return jac


def _default_init(hist: Histogram, n_components: int) -> np.ndarray:
    """Moment-based start: narrow component from the central 50% of mass,
    a second component (if any) 4x broader at 10% amplitude, same mean."""
    centers = hist.centers
    width = np.diff(hist.bin_edges)
    mass = hist.density * width
    csum = np.cumsum(mass)
    csum /= csum[-1]
    core = (csum >= 0.25) & (csum <= 0.75)
    if not core.any():
        core = np.ones_like(core)
    w = mass[core] / mass[core].sum()
    mu = float(np.sum(w * centers[core]))
    var = float(np.sum(w * (centers[core] - mu) ** 2))
    sigma = max(np.sqrt(var), 1e-3 * (hist.bin_edges[-1] - hist.bin_edges[0]))
    amp = float(hist.density.max())
    if n_components == 1:
        return np.array([amp, mu, sigma])
    return np.array([amp, mu, sigma, 0.1 * amp, mu, 4.0 * sigma])


def fit_gaussians(hist: Histogram, n_components: int, init=None,
                  max_iter: int = 200) -> GaussianFitReport:
    """Levenberg-Marquardt fit of the histogram density by 1 or 2 Gaussians.

    Damped Gauss-Newton with the analytic Jacobian of the Gaussian model.
    Components in the report are ordered by ascending sigma.  When the
    damping or iteration budget runs out, `converged` is False and the
    best parameters so far are returned.
    """
    if n_components not in (1, 2):
        raise ValueError(f"n_components must be 1 or 2, got {n_components}")
    df = hist.n_bins - 3 * n_components
    if df <= 0:
        raise ValueError(f"too few bins ({hist.n_bins}) for {n_components} components")

    x = hist.centers
    y = hist.density
    if init is None:
        params = _default_init(hist, n_components)
    else:
        params = np.asarray(init, dtype=np.float64).ravel().copy()
        if params.size != 3 * n_components:
            raise ValueError(f"init must have {3 * n_components} entries")
        if np.any(params[2::3] <= 0):
            raise ValueError("init sigmas must be positive")

    resid = y - gaussian_mixture(x, params)
    ssr = float(resid @ resid)
    lam = 1e-3
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        jac = _mixture_jacobian(x, params)
        jtj = jac.T @ jac
        grad = jac.T @ resid
        if np.max(np.abs(grad)) < 1e-14 * max(1.0, ssr):
            converged = True
            break
        stepped = False
        while lam <= 1e12:
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-30))
            try:
                delta = np.linalg.solve(damped, grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = params + delta
            trial[2::3] = np.abs(trial[2::3])  # Gaussian is even in sigma
            if np.any(trial[2::3] == 0):
                lam *= 10.0
                continue
            trial_resid = y - gaussian_mixture(x, trial)
            trial_ssr = float(trial_resid @ trial_resid)
            if trial_ssr <= ssr:
                improvement = ssr - trial_ssr
                params, resid, ssr = trial, trial_resid, trial_ssr
                lam = max(lam * 0.1, 1e-14)
                stepped = True
                if improvement <= 1e-12 * ssr + 1e-300:
                    converged = True
                break
            lam *= 10.0
        if not stepped:
            # damping exhausted: at the optimum if the gradient is tiny
            converged = np.max(np.abs(grad)) < 1e-8
            break
        if converged:
            break

    order = np.argsort(params[2::3])
    components = [
        GaussianComponent(*params[3 * i : 3 * i + 3]) for i in order
    ]
    chi2 = reduced_chi_square(y, gaussian_mixture(x, params), 3 * n_components)
    return GaussianFitReport(
        components=components, chi2_red=chi2, df=df,
        converged=converged, n_iter=n_iter,
    )


@dataclass
class ChannelSpectra:
    """Per-channel amplitude spectra at positive-frequency bins."""

    freqs: np.ndarray          # (n_bins,) in Hz, from fs/N to fs/2
    amplitudes: np.ndarray     # (n_channels, n_bins)
    n_samples: int
    sample_rate_hz: float


@dataclass
class SpectralSummary:
    """Cross-channel average spectral amplitude per frequency bin."""

    freqs: np.ndarray
    avg_amplitude: np.ndarray
    n_channels: int
    n_samples: int

    def __post_init__(self):
        if np.any(self.avg_amplitude < 0):
            raise ValueError("average spectral amplitude must be non-negative")


def channel_spectra(region: np.ndarray, sample_rate: float) -> ChannelSpectra:
    """Amplitude of the DFT of every channel at bins k = 1..N//2."""
    values = np.atleast_2d(np.asarray(region, dtype=np.float64))
    n_samples = values.shape[1]
    if n_samples < 2:
        raise ValueError("need at least 2 samples per channel")
    spec = np.fft.rfft(values, axis=1)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate)
    return ChannelSpectra(
        freqs=freqs[1:],
        amplitudes=np.abs(spec[:, 1:]),
        n_samples=n_samples,
        sample_rate_hz=sample_rate,
    )


def average_spectral_amplitude(spectra: ChannelSpectra) -> SpectralSummary:
    """Arithmetic mean of the channel amplitude spectra, per bin."""
    if spectra.amplitudes.shape[0] < 1:
        raise ValueError("need at least one channel")
    return SpectralSummary(
        freqs=spectra.freqs,
        avg_amplitude=spectra.amplitudes.mean(axis=0),
        n_channels=spectra.amplitudes.shape[0],
        n_samples=spectra.n_samples,
    )


def region_sigma(region: np.ndarray) -> float:
    """Population standard deviation of all values in the region."""
    values = np.asarray(region, dtype=np.float64)
    if values.size == 0:
        raise ValueError("region is empty")
    return float(values.std())
