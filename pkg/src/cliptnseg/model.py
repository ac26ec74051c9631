"""Full model: coarse branch + fine branch + prediction head."""

from __future__ import annotations

import torch
from torch import nn

from cliptnseg.backbone import FrozenCLIP, build_backbone
from cliptnseg.cgb import CoarseBranch
from cliptnseg.config import ModelConfig
from cliptnseg.errors import ConfigError, SegShapeError
from cliptnseg.fgb import FineBranch
from cliptnseg.ph import PredictionHead

BRANCHES = ("cgb", "fgb")


class CLIPTNSeg(nn.Module):
    def __init__(self, backbone: FrozenCLIP, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.resolution = cfg.resolution
        self.cgb = CoarseBranch(
            backbone,
            cfg.extract_layers,
            proj_dim=cfg.proj_dim,
            heads=cfg.decoder_heads,
            mlp_ratio=cfg.decoder_mlp_ratio,
        )
        self.fgb = FineBranch(cfg.fgb_channels, cfg.fgb_blocks, cfg.fgb_out)
        self.fgb.check_resolution(cfg.resolution)
        self.ph = PredictionHead(cfg.proj_dim, cfg.fgb_out, cfg.head_channels)

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> CLIPTNSeg:
        return cls(build_backbone(cfg), cfg)

    @property
    def backbone(self) -> FrozenCLIP:
        return self.cgb.backbone

    def branch_features(
        self, images: torch.Tensor, prompts: list[str], zeroed: frozenset[str] | set[str] = frozenset()
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Coarse and fine feature maps; a zeroed branch yields an all-zero map and is not run."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise SegShapeError(f"expected (B, 3, R, R) images, got {tuple(images.shape)}")
        if images.shape[-1] != self.resolution or images.shape[-2] != self.resolution:
            raise SegShapeError(
                f"expected {self.resolution}x{self.resolution} images, got {tuple(images.shape[-2:])}"
            )
        if len(prompts) != images.shape[0]:
            raise SegShapeError("one prompt per image is required")
        b, r = images.shape[0], self.resolution
        pixels = self.backbone.normalize(images)
        if "cgb" in zeroed:
            coarse = pixels.new_zeros((b, self.cgb.proj_dim, r, r))
        else:
            cond = self.backbone.encode_text(list(prompts)).to(pixels.device)
            coarse = self.cgb(pixels, cond)
        if "fgb" in zeroed:
            fine = pixels.new_zeros((b, self.fgb.out_channels, r, r))
        else:
            fine = self.fgb(pixels)
        return coarse, fine

    def forward(
        self, images: torch.Tensor, prompts: list[str], zeroed: frozenset[str] | set[str] = frozenset()
    ) -> torch.Tensor:
        """Images in ``[0, 1]`` of shape ``(B, 3, R, R)`` -> logits ``(B, 1, R, R)``."""
        coarse, fine = self.branch_features(images, prompts, zeroed)
        return self.ph(coarse, fine)

    def trainable_state_dict(self) -> dict[str, torch.Tensor]:
        """Every weight except the frozen backbone."""
        return {k: v for k, v in self.state_dict().items() if not k.startswith("cgb.backbone.")}

    def load_trainable_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        missing, unexpected = self.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("cgb.backbone.")]
        if missing or unexpected:
            raise ConfigError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("cgb.backbone.") and p.requires_grad]


class AblatedModel(nn.Module):
    """View of a model whose named branches output zero tensors at predict time.

    Shares weights with the wrapped model and never modifies it.
    """

    def __init__(self, base: CLIPTNSeg, zeroed: frozenset[str]):
        super().__init__()
        self.base = base
        self.zeroed = frozenset(zeroed)

    @property
    def resolution(self) -> int:
        return self.base.resolution

    def forward(self, images: torch.Tensor, prompts: list[str]) -> torch.Tensor:
        return self.base(images, prompts, zeroed=self.zeroed)


def ablate_branch(model: CLIPTNSeg | AblatedModel, branch: str) -> AblatedModel:
    """Variant of ``model`` with ``branch`` ("cgb" or "fgb") replaced by zeros."""
    if branch not in BRANCHES:
        raise ConfigError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
    if isinstance(model, AblatedModel):
        return AblatedModel(model.base, model.zeroed | {branch})
    return AblatedModel(model, frozenset({branch}))
