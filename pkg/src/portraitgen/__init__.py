"""Prior-guided neural portrait generation with a synthetic toy-face test world.

A coordinate-conditioned MLP + CNN-decoder generator is trained in two
stages: personalized reconstruction on a single performing video, then
scalable training that widens the face-parameter space with auxiliary
parameter sets, a patch discriminator, and consistency/perceptual losses.
"""

__version__ = "0.1.0"

from .core import (
    EncodingConfig,
    FaceParams,
    Frame,
    LatentTable,
    Mode,
    ParamSpace,
    VideoDataset,
    build_conditioning_vector,
    conditioning_dim,
    make_coordinate_grid,
    param_distance,
    positional_encode,
)

__all__ = [
    "EncodingConfig",
    "FaceParams",
    "Frame",
    "LatentTable",
    "Mode",
    "ParamSpace",
    "VideoDataset",
    "build_conditioning_vector",
    "conditioning_dim",
    "make_coordinate_grid",
    "param_distance",
    "positional_encode",
]
