"""Probabilistic end-to-end stereo matching with aleatoric and epistemic uncertainty."""

__version__ = "0.1.0"

from .data_io import StereoSample, SynthParams, synth_stereogram
from .inference import UncertainDisparity, mc_predict, uncertainty_stddev_maps
from .network import NetworkConfig, ProbGCNet
from .objective import total_loss

__all__ = [
    "NetworkConfig",
    "ProbGCNet",
    "StereoSample",
    "SynthParams",
    "UncertainDisparity",
    "mc_predict",
    "synth_stereogram",
    "total_loss",
    "uncertainty_stddev_maps",
]
