"""Fine-grained branch: a residual U-Net on raw pixels."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from cliptnseg.errors import ConfigError, SegShapeError


class ResidualBlock(nn.Module):
    """Pre-activation residual block: ``transform(x) + shortcut(x)``.

    The shortcut is the identity when channel counts match, otherwise a
    1x1 convolution. There is no activation after the addition, so zeroing
    the transform makes the block an exact identity.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.transform = nn.Sequential(
            nn.BatchNorm2d(in_ch),
            nn.ReLU(),
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
        )
        self.shortcut = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.transform(x) + self.shortcut(x)

    @torch.no_grad()
    def zero_transform(self) -> None:
        for p in self.transform.parameters():
            p.zero_()


def _res_stack(in_ch: int, out_ch: int, n: int) -> nn.Sequential:
    return nn.Sequential(*(ResidualBlock(in_ch if k == 0 else out_ch, out_ch) for k in range(n)))


@dataclass(frozen=True)
class ResidualStage:
    name: str
    in_channels: int
    out_channels: int
    n_blocks: int
    resolution_change: str  # "down2", "up2" or "none"
    scale: int  # resolution divisor after the stage


def stage_table(channels: list[int] | tuple[int, ...], n_blocks: int = 2) -> list[ResidualStage]:
    """Encoder and decoder stages, shallow to deep then back."""
    channels = list(channels)
    depth = len(channels)
    stem = channels[0]
    table = [ResidualStage("enc0", 3, stem, n_blocks, "none", 1)]
    prev = stem
    for k, ch in enumerate(channels, start=1):
        table.append(ResidualStage(f"enc{k}", prev, ch, n_blocks, "down2", 2**k))
        prev = ch
    skip_widths = [stem, *channels[:-1]]
    for j in range(1, depth + 1):
        out = skip_widths[depth - j]
        table.append(ResidualStage(f"dec{j}", prev, out, n_blocks, "up2", 2 ** (depth - j)))
        prev = out
    return table


class FineBranch(nn.Module):
    """Residual encoder/decoder with concatenating skip connections.

    The stem keeps full resolution; each of the ``len(channels)`` encoder
    stages halves it with a strided convolution. Decoder stage ``j`` doubles
    the resolution with a transposed convolution, concatenates the encoder
    output at that resolution, mixes with a 1x1 convolution and applies
    residual blocks. A 1x1 head maps to ``out_channels``.
    """

    def __init__(
        self,
        channels: list[int] | tuple[int, ...] = (32, 64, 128, 256),
        n_blocks: int = 2,
        out_channels: int = 64,
        in_channels: int = 3,
    ):
        super().__init__()
        if not channels:
            raise ConfigError("fine branch needs at least one stage")
        if n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        self.channels = list(channels)
        self.depth = len(self.channels)
        self.table = stage_table(self.channels, n_blocks)
        stem = self.channels[0]
        self.stem = nn.Sequential(nn.Conv2d(in_channels, stem, 3, padding=1), _res_stack(stem, stem, n_blocks))
        self.down = nn.ModuleList()
        prev = stem
        for ch in self.channels:
            self.down.append(
                nn.Sequential(nn.Conv2d(prev, ch, 3, stride=2, padding=1), _res_stack(ch, ch, n_blocks))
            )
            prev = ch
        skip_widths = [stem, *self.channels[:-1]]
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        self.dec = nn.ModuleList()
        for j in range(1, self.depth + 1):
            out = skip_widths[self.depth - j]
            self.up.append(nn.ConvTranspose2d(prev, out, 2, stride=2))
            self.merge.append(nn.Conv2d(2 * out, out, 1))
            self.dec.append(_res_stack(out, out, n_blocks))
            prev = out
        self.head = nn.Conv2d(prev, out_channels, 1)
        self.out_channels = out_channels
        # decoder stages whose skip input is replaced by zeros (for experiments)
        self.disabled_skips: set[int] = set()

    def check_resolution(self, res: int) -> None:
        if res % (2**self.depth):
            raise ConfigError(
                f"resolution {res} is not divisible by 2**{self.depth} (fine branch depth)"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != x.shape[-2]:
            raise SegShapeError(f"expected (B, C, R, R) input, got {tuple(x.shape)}")
        self.check_resolution(x.shape[-1])
        h = self.stem(x)
        skips = [h]
        for stage in self.down:
            h = stage(h)
            skips.append(h)
        skips.pop()  # deepest output feeds the decoder directly
        for j, (up, merge, dec) in enumerate(zip(self.up, self.merge, self.dec), start=1):
            h = up(h)
            skip = skips[self.depth - j]
            if j in self.disabled_skips:
                skip = torch.zeros_like(skip)
            h = dec(merge(torch.cat([h, skip], dim=1)))
        return self.head(h)
