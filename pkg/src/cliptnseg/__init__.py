"""Text-prompted dual-branch segmentation of thyroid nodules in ultrasound images.

A frozen CLIP backbone conditioned by FiLM feeds a small transformer decoder
(coarse branch); a residual U-Net works on the raw pixels (fine branch); a
convolutional head fuses both into a pixel-wise nodule probability map.
"""

from cliptnseg.errors import (
    ConfigError,
    InputError,
    SegShapeError,
    StateError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "InputError",
    "SegShapeError",
    "StateError",
    "TrainingError",
    "__version__",
]
