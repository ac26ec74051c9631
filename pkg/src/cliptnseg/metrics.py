"""Segmentation metrics, metric reports, and the zero-branch ablation harness."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from cliptnseg.data import ImageSample, to_tensors
from cliptnseg.errors import InputError, SegShapeError
from cliptnseg.model import ablate_branch  # noqa: F401  (re-exported)
from cliptnseg.ph import binarize

REPORT_FORMAT = 1


def _class_masks(pred, gt, positive_class: str) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise SegShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for m in (pred, gt):
        if not np.isin(m, (0, 1)).all():
            raise InputError("masks must be binary (0/1)")
    if positive_class == "fg":
        return pred == 1, gt == 1
    if positive_class == "bg":
        return pred == 0, gt == 0
    raise ValueError(f"positive_class must be 'fg' or 'bg', got {positive_class!r}")


def iou(pred, gt, positive_class: str = "fg") -> float:
    """Intersection over union for one class; 1.0 when both masks lack the class."""
    p, g = _class_masks(pred, gt, positive_class)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def dice(pred, gt, positive_class: str = "fg") -> float:
    """Dice coefficient for one class; 1.0 when both masks lack the class."""
    p, g = _class_masks(pred, gt, positive_class)
    total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
    if total == 0:
        return 1.0
    return 2 * int(np.count_nonzero(p & g)) / total


@dataclass
class SampleScore:
    sample_id: str
    iou_fg: float
    iou_bg: float
    iou_mean: float
    dice_fg: float
    dice_bg: float
    dice_mean: float


def score_sample(sample_id: str, pred, gt) -> SampleScore:
    i_fg, i_bg = iou(pred, gt, "fg"), iou(pred, gt, "bg")
    d_fg, d_bg = dice(pred, gt, "fg"), dice(pred, gt, "bg")
    return SampleScore(sample_id, i_fg, i_bg, (i_fg + i_bg) / 2, d_fg, d_bg, (d_fg + d_bg) / 2)


@dataclass
class MetricReport:
    per_sample: list[SampleScore]
    mIoU: float
    mDice: float
    IoU_FG: float
    n_samples: int
    run_metadata: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, scores: list[SampleScore], metadata: dict | None = None) -> MetricReport:
        if not scores:
            raise InputError("cannot aggregate an empty score list")
        n = len(scores)
        # fixed summation order keeps aggregates reproducible
        return cls(
            per_sample=list(scores),
            mIoU=sum(s.iou_mean for s in scores) / n,
            mDice=sum(s.dice_mean for s in scores) / n,
            IoU_FG=sum(s.iou_fg for s in scores) / n,
            n_samples=n,
            run_metadata=dict(metadata or {}),
        )

    @property
    def dice_fg(self) -> float:
        """Mean foreground Dice (not part of the headline triple)."""
        return sum(s.dice_fg for s in self.per_sample) / self.n_samples

    def headline(self) -> str:
        return format_headline(self.mIoU, self.mDice, self.IoU_FG)

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT,
            "summary": {"mIoU": self.mIoU, "mDice": self.mDice, "IoU_FG": self.IoU_FG},
            "summary_percent": {
                "mIoU": f"{100 * self.mIoU:.2f}",
                "mDice": f"{100 * self.mDice:.2f}",
                "IoU_FG": f"{100 * self.IoU_FG:.2f}",
            },
            "n_samples": self.n_samples,
            "run_metadata": self.run_metadata,
            "per_sample": [asdict(s) for s in self.per_sample],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        return cls(
            per_sample=[SampleScore(**s) for s in d["per_sample"]],
            mIoU=d["summary"]["mIoU"],
            mDice=d["summary"]["mDice"],
            IoU_FG=d["summary"]["IoU_FG"],
            n_samples=d["n_samples"],
            run_metadata=d.get("run_metadata", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> MetricReport:
        return cls.from_dict(json.loads(Path(path).read_text()))


def format_headline(miou: float, mdice: float, iou_fg: float) -> str:
    return f"mIoU {100 * miou:.2f} mDice {100 * mdice:.2f} IoU_FG {100 * iou_fg:.2f}"


@torch.no_grad()
def predict_masks(model, samples: list[ImageSample], threshold: float = 0.5, batch_size: int = 8) -> list[np.ndarray]:
    """Binary masks for already-cropped samples, in input order."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        device = _model_device(model)
        masks = []
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            images, _, prompts = to_tensors(chunk)
            logits = model(images.to(device), prompts)
            prob = torch.sigmoid(logits.float())[:, 0]
            masks.extend(binarize(prob, threshold).cpu().numpy())
        return masks
    finally:
        if was_training:
            model.train()


def evaluate(
    model,
    samples: list[ImageSample],
    threshold: float = 0.5,
    batch_size: int = 8,
    metadata: dict | None = None,
) -> MetricReport:
    """Score ``model`` on evaluation-sized samples.

    ``model`` is any callable ``(images (B, 3, R, R), prompts) -> logits
    (B, 1, R, R)``; samples must already be at the model resolution (see
    :func:`cliptnseg.data.eval_view`).
    """
    if not samples:
        raise InputError("evaluation set is empty")
    preds = predict_masks(model, samples, threshold, batch_size)
    scores = [score_sample(s.sample_id, p, s.mask) for s, p in zip(samples, preds)]
    meta = {"threshold": threshold, "eval_resolution": int(samples[0].mask.shape[0])}
    meta.update(metadata or {})
    return MetricReport.from_scores(scores, meta)


def _model_device(model) -> torch.device:
    try:
        return next(model.parameters()).device
    except (AttributeError, StopIteration):
        return torch.device("cpu")


ABLATION_ROWS = (
    ("cgb", {"CGB": True, "FGB": False, "PH": True}, frozenset({"fgb"})),
    ("fgb", {"CGB": False, "FGB": True, "PH": True}, frozenset({"cgb"})),
    ("full", {"CGB": True, "FGB": True, "PH": True}, frozenset()),
)


def ablation_table(model, samples: list[ImageSample], threshold: float = 0.5, metadata: dict | None = None) -> list[dict]:
    """Rows for coarse-only, fine-only and the full model, each with the three headline metrics."""
    rows = []
    for name, flags, zeroed in ABLATION_ROWS:
        variant = model
        for branch in sorted(zeroed):
            variant = ablate_branch(variant, branch)
        rep = evaluate(variant, samples, threshold, metadata=metadata)
        rows.append({"row": name, **flags, "mIoU": rep.mIoU, "mDice": rep.mDice, "IoU_FG": rep.IoU_FG})
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    mark = {True: "x", False: "-"}
    lines = ["CGB FGB PH | mIoU(%) mDice(%) IoU_FG(%)"]
    for r in rows:
        lines.append(
            f" {mark[r['CGB']]}   {mark[r['FGB']]}   {mark[r['PH']]} | "
            f"{100 * r['mIoU']:.2f} {100 * r['mDice']:.2f} {100 * r['IoU_FG']:.2f}"
        )
    return "\n".join(lines)
