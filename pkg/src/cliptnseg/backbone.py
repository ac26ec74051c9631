"""Frozen CLIP backbone: visual activations and text conditioning vectors."""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path

import torch
from torch import nn
from transformers import CLIPConfig, CLIPModel

from cliptnseg.errors import ConfigError, InputError, SegShapeError, StateError

logger = logging.getLogger(__name__)

# Published CLIP preprocessing statistics.
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ByteTokenizer:
    """UTF-8 byte tokenizer for backbones built without a vocabulary file.

    Ids 0..255 are bytes, then begin/end/pad markers. Sequences are
    ``[bos] + bytes + [eos]`` right-padded to ``max_length``.
    """

    vocab_size = 259
    bos_token_id = 256
    eos_token_id = 257
    pad_token_id = 258

    def __init__(self, max_length: int = 77):
        self.max_length = max_length

    def __call__(self, prompts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = torch.full((len(prompts), self.max_length), self.pad_token_id, dtype=torch.long)
        mask = torch.zeros((len(prompts), self.max_length), dtype=torch.long)
        for row, text in enumerate(prompts):
            body = list(text.encode("utf-8"))
            if len(body) > self.max_length - 2:
                logger.warning(
                    "prompt truncated from %d to %d bytes", len(body), self.max_length - 2
                )
                body = body[: self.max_length - 2]
            seq = [self.bos_token_id, *body, self.eos_token_id]
            ids[row, : len(seq)] = torch.tensor(seq)
            mask[row, : len(seq)] = 1
        return ids, mask


class _HFTokenizer:
    def __init__(self, tokenizer):
        self.tok = tokenizer
        self.max_length = tokenizer.model_max_length

    def __call__(self, prompts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        lengths = [len(self.tok(p)["input_ids"]) for p in prompts]
        if max(lengths) > self.max_length:
            logger.warning("prompt longer than %d tokens truncated", self.max_length)
        enc = self.tok(
            prompts,
            padding="max_length",
            truncation=True,
            max_length=self.max_length,
            return_tensors="pt",
        )
        return enc["input_ids"], enc["attention_mask"]


def tiny_clip_config(
    image_size: int = 352,
    patch_size: int = 16,
    width: int = 64,
    depth: int = 12,
    heads: int = 4,
    text_width: int = 64,
    text_depth: int = 2,
    embed_dim: int = 64,
) -> CLIPConfig:
    """A small CLIP configuration usable with :class:`ByteTokenizer`."""
    tok = ByteTokenizer
    text = dict(
        vocab_size=tok.vocab_size,
        hidden_size=text_width,
        intermediate_size=4 * text_width,
        num_hidden_layers=text_depth,
        num_attention_heads=max(1, text_width // 32),
        max_position_embeddings=77,
        bos_token_id=tok.bos_token_id,
        eos_token_id=tok.eos_token_id,
        pad_token_id=tok.pad_token_id,
    )
    vision = dict(
        hidden_size=width,
        intermediate_size=4 * width,
        num_hidden_layers=depth,
        num_attention_heads=heads,
        image_size=image_size,
        patch_size=patch_size,
    )
    return CLIPConfig(text_config=text, vision_config=vision, projection_dim=embed_dim)


class FrozenCLIP(nn.Module):
    """CLIP visual and text encoders with every parameter frozen.

    The module ignores ``train()``: it always stays in inference mode, and
    all of its forward computations run under ``torch.no_grad``.
    """

    def __init__(self, clip: CLIPModel, tokenizer):
        super().__init__()
        self.clip = clip
        self.tokenizer = tokenizer
        for p in self.clip.parameters():
            p.requires_grad_(False)
        self.clip.eval()
        self.register_buffer("pixel_mean", torch.tensor(CLIP_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(CLIP_STD).view(1, 3, 1, 1), persistent=False)
        self._text_cache: dict[str, torch.Tensor] = {}
        self.loaded = True

    @classmethod
    def tiny(cls, seed: int = 0, **kwargs) -> FrozenCLIP:
        """Randomly initialised small backbone; identical for identical seed and sizes."""
        cfg = tiny_clip_config(**kwargs)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            clip = CLIPModel(cfg)
        return cls(clip, ByteTokenizer(cfg.text_config.max_position_embeddings))

    @classmethod
    def from_pretrained(cls, name_or_path: str) -> FrozenCLIP:
        """Load weights from a local directory or a model-hub identifier."""
        local = Path(name_or_path).exists()
        try:
            clip = CLIPModel.from_pretrained(name_or_path, local_files_only=local)
        except OSError as exc:
            raise ConfigError(f"cannot load backbone {name_or_path!r}: {exc}") from exc
        max_len = clip.config.text_config.max_position_embeddings
        has_vocab = not local or any(
            (Path(name_or_path) / f).exists() for f in ("tokenizer.json", "vocab.json")
        )
        if has_vocab:
            from transformers import AutoTokenizer

            try:
                hf_tok = AutoTokenizer.from_pretrained(name_or_path, local_files_only=local)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load tokenizer for {name_or_path!r}: {exc}") from exc
            hf_tok.model_max_length = min(hf_tok.model_max_length, max_len)
            tok = _HFTokenizer(hf_tok)
        elif clip.config.text_config.vocab_size == ByteTokenizer.vocab_size:
            tok = ByteTokenizer(max_len)
        else:
            raise ConfigError(f"no tokenizer found for backbone {name_or_path!r}")
        return cls(clip, tok)

    def train(self, mode: bool = True) -> FrozenCLIP:
        return super().train(False)

    def unload(self) -> None:
        self.loaded = False

    @property
    def depth(self) -> int:
        return self.clip.config.vision_config.num_hidden_layers

    @property
    def patch_size(self) -> int:
        return self.clip.config.vision_config.patch_size

    @property
    def native_width(self) -> int:
        return self.clip.config.vision_config.hidden_size

    @property
    def embed_dim(self) -> int:
        """Length of the text conditioning vector."""
        return self.clip.config.projection_dim

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        """Map ``[0, 1]`` RGB tensors to the backbone's input statistics."""
        return (images - self.pixel_mean) / self.pixel_std

    @torch.no_grad()
    def hidden_states(self, pixels: torch.Tensor, layers: list[int]) -> dict[int, torch.Tensor]:
        """Token maps after encoder layers ``layers`` (0-based) for normalized pixels.

        Returns ``{i: (B, 1 + (R/P)**2, native_width)}``; the class token is kept.
        """
        self._check_loaded()
        if pixels.ndim != 4 or pixels.shape[1] != 3 or pixels.shape[2] != pixels.shape[3]:
            raise SegShapeError(f"expected (B, 3, R, R) pixels, got {tuple(pixels.shape)}")
        res = pixels.shape[-1]
        if res % self.patch_size:
            raise SegShapeError(f"resolution {res} not divisible by patch size {self.patch_size}")
        bad = [i for i in layers if not 0 <= i < self.depth]
        if bad:
            raise ConfigError(f"layer indices {bad} out of range for a {self.depth}-layer encoder")
        vm = self.clip.vision_model
        interp = res != vm.config.image_size
        h = vm.embeddings(pixels.to(vm.embeddings.patch_embedding.weight.dtype), interpolate_pos_encoding=interp)
        h = vm.pre_layrnorm(h)
        wanted = set(layers)
        out = {}
        for i, layer in enumerate(vm.encoder.layers[: max(layers) + 1]):
            h = layer(h, None)
            if i in wanted:
                out[i] = h
        return out

    @torch.no_grad()
    def encode_text(self, prompts: list[str]) -> torch.Tensor:
        """Conditioning vectors ``(B, embed_dim)`` for a batch of prompts."""
        self._check_loaded()
        for p in prompts:
            if not isinstance(p, str) or not p.strip():
                raise InputError("prompt is empty")
        missing = [p for p in dict.fromkeys(prompts) if p not in self._text_cache]
        if missing:
            ids, mask = self.tokenizer(missing)
            device = self.pixel_mean.device
            tm = self.clip.text_model
            # cached vectors must not depend on an enclosing autocast region
            with torch.autocast(device.type, enabled=False):
                pooled = tm(input_ids=ids.to(device), attention_mask=mask.to(device)).pooler_output
                vecs = self.clip.text_projection(pooled)
            for p, v in zip(missing, vecs):
                self._text_cache[p] = v.float()
        return torch.stack([self._text_cache[p] for p in prompts])

    def _apply(self, fn, *args, **kwargs):
        self._text_cache = {}
        return super()._apply(fn, *args, **kwargs)

    def _check_loaded(self) -> None:
        if not self.loaded:
            raise StateError("backbone is unloaded")

    def checksum(self) -> str:
        """SHA-256 over every backbone parameter and buffer."""
        digest = hashlib.sha256()
        for name, tensor in sorted(self.clip.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def build_backbone(model_cfg) -> FrozenCLIP:
    """Backbone described by a :class:`~cliptnseg.config.ModelConfig`."""
    if model_cfg.backbone == "tiny-random":
        return FrozenCLIP.tiny(
            seed=model_cfg.backbone_seed,
            image_size=model_cfg.resolution,
            patch_size=model_cfg.patch_size,
            width=model_cfg.tiny_width,
            depth=model_cfg.tiny_depth,
            heads=model_cfg.tiny_heads,
            text_width=model_cfg.tiny_text_width,
            text_depth=model_cfg.tiny_text_depth,
            embed_dim=model_cfg.tiny_embed_dim,
        )
    backbone = FrozenCLIP.from_pretrained(model_cfg.backbone)
    if backbone.patch_size != model_cfg.patch_size:
        raise ConfigError(
            f"backbone patch size {backbone.patch_size} != configured {model_cfg.patch_size}"
        )
    if max(model_cfg.extract_layers) >= backbone.depth:
        raise ConfigError(
            f"layer index {max(model_cfg.extract_layers)} out of range for a "
            f"{backbone.depth}-layer encoder"
        )
    return backbone
