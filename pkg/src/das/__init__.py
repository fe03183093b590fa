"""DAS surface-wave pipeline: synthetic scenes, exploratory metrics,
rule-based labeling, a from-scratch residual CNN classifier, data-parallel
training, and tiled probability mapping."""

__version__ = "0.1.0"

from . import infer, label, metrics, net, store, synth, train  # noqa: F401
