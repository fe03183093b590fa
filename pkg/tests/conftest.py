"""Shared scene factories for the test suite."""

import numpy as np
import pytest

from das.synth import SceneConfig, WaveEvent


def make_wave_scene(seed, n_channels=200, n_samples=3000, n_events=4,
                    amplitude=4000.0, noise_sigma=150.0) -> SceneConfig:
    """A scene with several well-separated coherent events over shaped noise."""
    rng = np.random.default_rng(seed + 5000)
    events = [
        WaveEvent(
            apex_channel=int(rng.integers(10, n_channels - 10)),
            apex_time_s=float(rng.uniform(0.5, n_samples / 500.0 - 0.5)),
            apparent_velocity_mps=float(rng.uniform(80.0, 300.0)),
            peak_frequency_hz=float(rng.uniform(8.0, 30.0)),
            amplitude=amplitude * float(rng.uniform(0.7, 1.3)),
            decay_per_m=0.004,
        )
        for _ in range(n_events)
    ]
    return SceneConfig(n_channels=n_channels, n_samples=n_samples,
                       noise_sigma=noise_sigma, events=events, seed=seed)


def make_noise_scene(seed, n_channels=200, n_samples=3000) -> SceneConfig:
    return SceneConfig(n_channels=n_channels, n_samples=n_samples, seed=seed)


def make_saturated_scene(seed, n_channels=200, n_samples=3000) -> SceneConfig:
    """A very loud slow event clipped hard enough that the apex tiles carry
    region sigma above the saturation threshold."""
    return SceneConfig(
        n_channels=n_channels, n_samples=n_samples, seed=seed,
        events=[WaveEvent(
            apex_channel=n_channels // 2,
            apex_time_s=n_samples / 1000.0,
            apparent_velocity_mps=60.0,
            peak_frequency_hz=6.0,
            amplitude=80000.0,
            decay_per_m=0.001,
        )],
        saturation_clip=8000.0,
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
