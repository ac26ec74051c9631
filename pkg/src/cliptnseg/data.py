"""Dataset ingestion, object-aware cropping, augmentation and prompts.

Manifest format: a CSV file whose header includes ``sample_id, image_path,
mask_path, split, source``; optional columns ``echogenicity``, ``margin``,
``composition`` feed the prompt template, and an optional ``prompt`` column
overrides it. Paths are relative to the dataset root.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from cliptnseg.config import DEFAULT_PROMPT, DataConfig
from cliptnseg.errors import InputError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("sample_id", "image_path", "mask_path", "split", "source")
ATTRIBUTE_COLUMNS = ("echogenicity", "margin", "composition")
SPLITS = ("train", "val", "test")


@dataclass
class ImageSample:
    image: np.ndarray  # (h, w, 3) uint8
    mask: np.ndarray  # (h, w) uint8 in {0, 1}
    prompt: str = DEFAULT_PROMPT
    sample_id: str = ""
    split: str = "train"
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise InputError(f"{self.sample_id}: image must be (h, w, 3), got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise InputError(
                f"{self.sample_id}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}"
            )

    def replace(self, **changes) -> ImageSample:
        return dataclasses.replace(self, **changes)


@dataclass
class LoadReport:
    errors: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.errors)


def build_prompt(row: dict, base: str = DEFAULT_PROMPT) -> str:
    """Base phrase followed by the available attributes, comma separated."""
    parts = [base]
    for attr in ATTRIBUTE_COLUMNS:
        value = (row.get(attr) or "").strip()
        if value:
            parts.append(f"{value} {attr}")
    return ", ".join(parts)


def load_mask(path: Path) -> np.ndarray:
    """Single-channel mask binarized at 127 (values above become 1)."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    return (gray > 127).astype(np.uint8)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def load_dataset(
    root: str | Path | None,
    manifest: str | Path,
    split: str | None = None,
    base_prompt: str = DEFAULT_PROMPT,
) -> tuple[list[ImageSample], LoadReport]:
    """Read every valid manifest row, sorted by ``sample_id``.

    Broken rows are skipped and described in the returned report. Raises
    :class:`InputError` if nothing could be loaded.
    """
    manifest = Path(manifest)
    root = Path(root) if root else manifest.parent
    report = LoadReport()
    try:
        fh = manifest.open(newline="")
    except OSError as exc:
        raise InputError(f"cannot read manifest {manifest}: {exc}") from exc
    samples = []
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        absent = [c for c in REQUIRED_COLUMNS if c not in header]
        if absent:
            raise InputError(f"manifest {manifest} lacks columns {absent}")
        for lineno, row in enumerate(reader, start=2):
            sid = (row.get("sample_id") or "").strip()
            if split is not None and row["split"].strip() != split:
                continue
            try:
                samples.append(_load_row(root, row, base_prompt))
            except (OSError, InputError) as exc:
                report.errors.append(f"line {lineno} ({sid or '?'}): {exc}")
    for err in report.errors:
        logger.warning("skipped manifest row: %s", err)
    if not samples:
        where = f" for split {split!r}" if split else ""
        raise InputError(f"no samples loaded from {manifest}{where}")
    samples.sort(key=lambda s: s.sample_id)
    return samples, report


def _load_row(root: Path, row: dict, base_prompt: str) -> ImageSample:
    sid = (row["sample_id"] or "").strip()
    if not sid:
        raise InputError("empty sample_id")
    split = row["split"].strip()
    if split not in SPLITS:
        raise InputError(f"unknown split {split!r}")
    image_path = root / row["image_path"].strip()
    mask_path = root / row["mask_path"].strip()
    for p in (image_path, mask_path):
        if not p.is_file():
            raise InputError(f"missing file {p}")
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if mask.shape != image.shape[:2]:
        raise InputError(f"mask size {mask.shape} does not match image size {image.shape[:2]}")
    prompt = (row.get("prompt") or "").strip() or build_prompt(row, base_prompt)
    return ImageSample(image, mask, prompt, sid, split, (row.get("source") or "").strip())


def sample_rng(seed: int, sample_id: str, step: int = 0) -> np.random.Generator:
    """Independent stream per (seed, sample, step)."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), step])


def pad_to(sample: ImageSample, size: int) -> ImageSample:
    """Zero-pad symmetrically so both sides are at least ``size``."""
    h, w = sample.mask.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if not ph and not pw:
        return sample
    pads = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    image = np.pad(sample.image, (*pads, (0, 0)))
    mask = np.pad(sample.mask, pads)
    return sample.replace(image=image, mask=mask)


def _window_counts(mask: np.ndarray, size: int) -> np.ndarray:
    """Foreground pixel count of every ``size`` x ``size`` window, indexed by top-left corner."""
    integral = np.pad(mask.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    return (
        integral[size:, size:]
        - integral[:-size, size:]
        - integral[size:, :-size]
        + integral[:-size, :-size]
    )


def crop_with_object(sample: ImageSample, crop_size: int, rng: np.random.Generator) -> ImageSample:
    """Random ``crop_size`` square that keeps part of the object visible.

    The window is drawn uniformly among all windows containing at least one
    foreground pixel. Samples without foreground get a center crop.
    """
    sample = pad_to(sample, crop_size)
    h, w = sample.mask.shape
    if sample.mask.any():
        ys, xs = np.nonzero(_window_counts(sample.mask, crop_size))
        k = int(rng.integers(len(ys)))
        y0, x0 = int(ys[k]), int(xs[k])
    else:
        y0, x0 = (h - crop_size) // 2, (w - crop_size) // 2
    sl = (slice(y0, y0 + crop_size), slice(x0, x0 + crop_size))
    meta = {**sample.meta, "crop_origin": (y0, x0)}
    return sample.replace(image=sample.image[sl].copy(), mask=sample.mask[sl].copy(), meta=meta)


@dataclass(frozen=True)
class AugmentParams:
    scale: float
    rotation_deg: float
    translation: tuple[float, float]  # multiplicative factors on the (row, col) center


def sample_augment_params(cfg: DataConfig, rng: np.random.Generator) -> AugmentParams:
    scale = float(rng.uniform(1.0 / cfg.scale_factor, cfg.scale_factor))
    rot = float(rng.uniform(cfg.rotation_min, cfg.rotation_max))
    ty, tx = rng.uniform(cfg.translation_min, cfg.translation_max, size=2)
    return AugmentParams(scale, rot, (float(ty), float(tx)))


def apply_affine(sample: ImageSample, params: AugmentParams) -> ImageSample:
    """Scale and rotate about the image center, then shift the center by the translation factors.

    Images are interpolated bilinearly, masks by nearest neighbour.
    """
    h, w = sample.mask.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = math.radians(params.rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    forward = params.scale * np.array([[cos, -sin], [sin, cos]])
    shift = center * (np.asarray(params.translation) - 1.0)
    # output o <- input i with o = F (i - c) + c + shift, so i = F^-1 (o - c - shift) + c
    inverse = np.linalg.inv(forward)
    offset = center - inverse @ (center + shift)
    image = np.stack(
        [
            ndimage.affine_transform(
                sample.image[..., ch].astype(np.float64), inverse, offset, order=1, mode="constant"
            )
            for ch in range(3)
        ],
        axis=-1,
    )
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    mask = ndimage.affine_transform(sample.mask, inverse, offset, order=0, mode="constant")
    meta = {**sample.meta, "augment": dataclasses.asdict(params)}
    return sample.replace(image=image, mask=(mask > 0).astype(np.uint8), meta=meta)


def augment(sample: ImageSample, cfg: DataConfig, rng: np.random.Generator) -> ImageSample:
    """Random scale, rotation and translation drawn from ``cfg``'s ranges."""
    return apply_affine(sample, sample_augment_params(cfg, rng))


def to_tensors(samples: list[ImageSample]):
    """Batch of samples -> ``(images (B, 3, R, R) float in [0, 1], masks (B, R, R) float, prompts)``."""
    import torch

    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).float() / 255.0
    masks = torch.from_numpy(np.stack([s.mask for s in samples])).float()
    return images, masks, [s.prompt for s in samples]


def eval_view(samples: list[ImageSample], crop_size: int, seed: int = 0) -> list[ImageSample]:
    """Deterministic evaluation crops (one fixed crop per sample id)."""
    return [crop_with_object(s, crop_size, sample_rng(seed, s.sample_id)) for s in samples]


class BatchStream:
    """Endless stream of augmented training batches.

    Samples are visited in seeded random order, epoch by epoch. Each
    sample's crop and augmentation use a stream derived from
    ``(seed, sample_id, step)``, so identical seeds give identical batches.
    """

    def __init__(
        self,
        samples: list[ImageSample],
        batch_size: int,
        crop_size: int,
        cfg: DataConfig,
        seed: int = 0,
    ):
        if not samples:
            raise InputError("training set is empty")
        self.samples = samples
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.cfg = cfg
        self.seed = seed
        self._order_rng = np.random.default_rng(seed)
        self._order: list[int] = []
        self.step = 0

    def _next_index(self) -> int:
        if not self._order:
            self._order = list(self._order_rng.permutation(len(self.samples)))
        return int(self._order.pop(0))

    def next_batch(self) -> list[ImageSample]:
        self.step += 1
        batch = []
        for _ in range(self.batch_size):
            s = self.samples[self._next_index()]
            rng = sample_rng(self.seed, s.sample_id, self.step)
            s = crop_with_object(s, self.crop_size, rng)
            if self.cfg.augment:
                s = augment(s, self.cfg, rng)
            batch.append(s)
        return batch
