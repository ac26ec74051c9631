"""Coarse-grained branch.

Activations from a few layers of the frozen CLIP image encoder are projected
to a small width, the deepest one is modulated by the text vector (FiLM), and
a stack of transformer blocks walks back through the shallower activations.
The resulting patch tokens are upsampled to a full-resolution feature map.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from cliptnseg.backbone import FrozenCLIP
from cliptnseg.errors import ConfigError, SegShapeError


def film_fuse(a_last: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """``gamma[d] * a_last[t, d] + beta[d]`` for every token ``t``.

    ``a_last`` is ``(..., N, D)``; ``gamma`` and ``beta`` are ``(..., D)`` and
    broadcast over the token axis.
    """
    d = a_last.shape[-1]
    if gamma.shape[-1] != d or beta.shape[-1] != d:
        raise SegShapeError(
            f"FiLM parameters of width {gamma.shape[-1]}/{beta.shape[-1]} "
            f"do not match feature width {d}"
        )
    if gamma.shape != beta.shape:
        raise SegShapeError("gamma and beta shapes differ")
    return gamma.unsqueeze(-2) * a_last + beta.unsqueeze(-2)


class FilmHead(nn.Module):
    """Affine map from the conditioning vector to ``(gamma, beta)``.

    Initialised to the identity modulation (gamma = 1, beta = 0).
    """

    def __init__(self, cond_dim: int, feat_dim: int):
        super().__init__()
        self.feat_dim = feat_dim
        self.linear = nn.Linear(cond_dim, 2 * feat_dim)
        nn.init.zeros_(self.linear.weight)
        with torch.no_grad():
            self.linear.bias[:feat_dim].fill_(1.0)
            self.linear.bias[feat_dim:].zero_()

    def forward(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        gamma, beta = self.linear(cond).split(self.feat_dim, dim=-1)
        return gamma, beta


class DecoderBlock(nn.Module):
    """Pre-norm transformer block: self-attention then MLP, both residual."""

    def __init__(self, dim: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))

    @torch.no_grad()
    def make_identity(self) -> None:
        """Zero both residual branches so the block returns its input."""
        nn.init.zeros_(self.attn.out_proj.weight)
        nn.init.zeros_(self.attn.out_proj.bias)
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)


def _split_factor(p: int) -> tuple[int, int]:
    f1 = max(d for d in range(1, math.isqrt(p) + 1) if p % d == 0)
    return p // f1, f1


class TokenUpsampler(nn.Module):
    """Patch grid (R/P) -> pixel grid (R) by two transposed convolutions."""

    def __init__(self, dim: int, patch_size: int):
        super().__init__()
        s1, s2 = _split_factor(patch_size)
        self.net = nn.Sequential(
            nn.ConvTranspose2d(dim, dim, kernel_size=s1, stride=s1),
            nn.ReLU(),
            nn.ConvTranspose2d(dim, dim, kernel_size=s2, stride=s2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class CoarseBranch(nn.Module):
    def __init__(
        self,
        backbone: FrozenCLIP,
        layers: list[int] | tuple[int, ...] = (3, 7, 9),
        proj_dim: int = 64,
        heads: int = 4,
        mlp_ratio: int = 4,
        n_blocks: int | None = None,
    ):
        super().__init__()
        layers = list(layers)
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigError(f"layer indices must be strictly increasing, got {layers}")
        if layers[-1] >= backbone.depth or layers[0] < 0:
            raise ConfigError(
                f"layer indices {layers} out of range for a {backbone.depth}-layer encoder"
            )
        n_blocks = len(layers) if n_blocks is None else n_blocks
        if n_blocks != len(layers):
            raise ConfigError(
                f"decoder has {n_blocks} blocks but {len(layers)} layers are extracted"
            )
        self.backbone = backbone
        self.layers = layers
        self.proj_dim = proj_dim
        self.projections = nn.ModuleDict(
            {str(i): nn.Linear(backbone.native_width, proj_dim) for i in layers}
        )
        self.film = FilmHead(backbone.embed_dim, proj_dim)
        self.blocks = nn.ModuleList(
            DecoderBlock(proj_dim, heads, mlp_ratio) for _ in range(n_blocks)
        )
        self.upsample = TokenUpsampler(proj_dim, backbone.patch_size)
        # activations added before blocks 2..n, deepest first
        self.injection_order = list(reversed(layers[:-1]))

    def extract_activations(self, pixels: torch.Tensor) -> dict[int, torch.Tensor]:
        """Projected token maps ``{i: (B, N_t, D)}``, class token included."""
        hidden = self.backbone.hidden_states(pixels, self.layers)
        return {i: self.projections[str(i)](hidden[i]) for i in self.layers}

    def decode_tokens(self, acts: dict[int, torch.Tensor], fused: torch.Tensor) -> torch.Tensor:
        """Run the decoder stack; returns final tokens before reshaping."""
        if len(self.blocks) != len(self.injection_order) + 1:
            raise ConfigError("decoder block count does not match the extracted layer count")
        missing = [i for i in self.injection_order if i not in acts]
        if missing:
            raise ConfigError(f"activations for layers {missing} are missing")
        x = self.blocks[0](fused)
        for block, layer in zip(self.blocks[1:], self.injection_order):
            x = block(x + acts[layer])
        return x

    def tokens_to_grid(self, tokens: torch.Tensor) -> torch.Tensor:
        """Drop the class token, reshape patches to a grid, upsample to ``(B, D, R, R)``."""
        patches = tokens[:, 1:, :]
        side = math.isqrt(patches.shape[1])
        if side * side != patches.shape[1]:
            raise SegShapeError(f"{patches.shape[1]} patch tokens do not form a square grid")
        grid = patches.transpose(1, 2).reshape(tokens.shape[0], self.proj_dim, side, side)
        return self.upsample(grid)

    def decode(self, acts: dict[int, torch.Tensor], fused: torch.Tensor) -> torch.Tensor:
        return self.tokens_to_grid(self.decode_tokens(acts, fused))

    def forward(self, pixels: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Normalized pixels ``(B, 3, R, R)`` and text vectors ``(B, E)`` -> ``(B, D, R, R)``."""
        acts = self.extract_activations(pixels)
        gamma, beta = self.film(cond)
        fused = film_fuse(acts[self.layers[-1]], gamma, beta)
        return self.decode(acts, fused)
