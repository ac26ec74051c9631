"""Prediction head fusing the two branch feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from cliptnseg.errors import ConfigError, SegShapeError


class PredictionHead(nn.Module):
    """Concatenate coarse and fine maps, then 3x3 conv, ReLU, 3x3 conv, ReLU, 1x1 conv to logits.

    Replicate padding keeps a spatially constant input constant at the output,
    so a model with both branches zeroed predicts one value everywhere.
    """

    def __init__(self, coarse_channels: int = 64, fine_channels: int = 64, hidden: int = 64):
        super().__init__()
        self.coarse_channels = coarse_channels
        self.fine_channels = fine_channels
        self.net = nn.Sequential(
            nn.Conv2d(coarse_channels + fine_channels, hidden, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(),
            nn.Conv2d(hidden, 1, 1),
        )

    def forward(self, coarse: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
        if coarse.shape[-2:] != fine.shape[-2:] or coarse.shape[0] != fine.shape[0]:
            raise SegShapeError(
                f"branch maps disagree: coarse {tuple(coarse.shape)} vs fine {tuple(fine.shape)}"
            )
        if coarse.shape[1] != self.coarse_channels or fine.shape[1] != self.fine_channels:
            raise SegShapeError(
                f"expected {self.coarse_channels}+{self.fine_channels} channels, "
                f"got {coarse.shape[1]}+{fine.shape[1]}"
            )
        return self.net(torch.cat([coarse, fine], dim=1))


@dataclass
class SegmentationMap:
    logits: np.ndarray  # (R, R)
    threshold: float = 0.5

    @property
    def prob(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.astype(np.float64)))

    @property
    def mask(self) -> np.ndarray:
        return binarize(self.prob, self.threshold)


def binarize(prob, threshold: float = 0.5):
    """Hard mask with ``prob >= threshold`` (ties count as foreground).

    Works on numpy arrays and torch tensors; returns ``uint8`` / ``torch.uint8``.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(prob, torch.Tensor):
        return (prob >= threshold).to(torch.uint8)
    return (np.asarray(prob) >= threshold).astype(np.uint8)
