"""Single-image dehazing with a point-wise convolutional K-map network, in numpy."""

from .haze import HazeParams, k_from_scene, recover_radiance, synthesize_hazy, transmission_from_depth
from .network import NetConfig, build_network, count_flops, count_parameters, dehaze_image, receptive_field
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "HazeParams",
    "NetConfig",
    "TrainConfig",
    "build_network",
    "count_flops",
    "count_parameters",
    "dehaze_image",
    "k_from_scene",
    "receptive_field",
    "recover_radiance",
    "synthesize_hazy",
    "train",
    "transmission_from_depth",
]
