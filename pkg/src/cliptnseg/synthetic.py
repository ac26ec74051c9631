"""Procedural ultrasound-like images with elliptical nodules, for smoke tests and demos."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from cliptnseg.config import DEFAULT_PROMPT
from cliptnseg.data import ImageSample


def ellipse_sample(size: int, rng: np.random.Generator, sample_id: str = "", split: str = "train") -> ImageSample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    ay, ax = rng.uniform(0.1, 0.22, size=2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    mask = ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.uint8)

    # speckled tissue background, darker (hypoechoic) nodule with a bright rim
    tissue = 0.55 + 0.15 * ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 16)
    rim = ndimage.binary_dilation(mask, iterations=2) & ~mask.astype(bool)
    intensity = np.where(mask > 0, 0.22, tissue) + 0.25 * rim
    speckle = rng.gamma(shape=4.0, scale=0.25, size=(size, size))
    img = ndimage.gaussian_filter(intensity * speckle, 0.8)
    gray = np.clip(img * 255, 0, 255).astype(np.uint8)
    image = np.repeat(gray[..., None], 3, axis=-1)
    return ImageSample(image, mask, DEFAULT_PROMPT, sample_id, split, "synthetic")


def ellipse_dataset(n: int, size: int = 160, seed: int = 0, split: str = "train") -> list[ImageSample]:
    rng = np.random.default_rng(seed)
    return [ellipse_sample(size, rng, f"{split}_{k:04d}", split) for k in range(n)]


def write_dataset(out_dir: str | Path, samples: list[ImageSample], attributes: dict | None = None) -> Path:
    """Write PNG images, 0/255 masks and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    attributes = attributes or {}
    cols = ["sample_id", "image_path", "mask_path", "split", "source", "echogenicity", "margin", "composition"]
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for s in samples:
            img_rel = f"images/{s.sample_id}.png"
            mask_rel = f"masks/{s.sample_id}.png"
            Image.fromarray(s.image).save(out / img_rel)
            Image.fromarray(s.mask * 255).save(out / mask_rel)
            row = {"sample_id": s.sample_id, "image_path": img_rel, "mask_path": mask_rel,
                   "split": s.split, "source": s.source}
            row.update(attributes.get(s.sample_id, {}))
            writer.writerow(row)
    return manifest
