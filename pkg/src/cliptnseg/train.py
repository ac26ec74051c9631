"""Training: Dice loss, Adam with cosine-annealed learning rate, periodic validation, checkpoints."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from cliptnseg.config import RunConfig, TrainConfig
from cliptnseg.data import BatchStream, ImageSample, eval_view, to_tensors
from cliptnseg.errors import ConfigError, InputError, TrainingError
from cliptnseg.metrics import MetricReport, evaluate
from cliptnseg.model import CLIPTNSeg

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
DEVICE_ENV = "CLIPTNSEG_DEVICE"


def default_device() -> torch.device:
    name = os.environ.get(DEVICE_ENV)
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def dice_loss(prob: torch.Tensor, gt: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice loss per sample, averaged over the batch.

    ``1 - (2 * sum(prob * gt) + eps) / (sum(prob) + sum(gt) + eps)``
    """
    if prob.shape != gt.shape:
        raise ValueError(f"prob shape {tuple(prob.shape)} != target shape {tuple(gt.shape)}")
    dims = tuple(range(1, prob.ndim))
    inter = (prob * gt).sum(dim=dims)
    denom = prob.sum(dim=dims) + gt.sum(dim=dims)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr_max`` at 0 to ``lr_min`` at ``max_iters``."""
    if not 0 <= it <= cfg.max_iters:
        logger.warning("iteration %d outside [0, %d]; clamped", it, cfg.max_iters)
        it = min(max(it, 0), cfg.max_iters)
    # endpoints exactly, free of rounding
    if it == 0:
        return cfg.lr_max
    if it == cfg.max_iters:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * it / cfg.max_iters))


def select_best(history: list[float]) -> int:
    """Index of the highest validation mIoU; earliest wins ties."""
    if not history:
        raise ValueError("empty validation history")
    return int(np.argmax(history))


@dataclass
class Checkpoint:
    path: Path
    iteration: int
    best_val_mIoU: float
    config_hash: str


@dataclass
class TrainResult:
    latest: Checkpoint
    best: Checkpoint
    final_loss: float
    losses: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    backbone_checksum: str = ""


def validate(model, val_samples: list[ImageSample], threshold: float = 0.5, metadata: dict | None = None) -> MetricReport:
    """Evaluate without touching weights; restores the previous train/eval mode."""
    with torch.no_grad():
        return evaluate(model, val_samples, threshold, metadata=metadata)


def _autocast(device: torch.device, enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    dtype = torch.float16 if device.type == "cuda" else torch.bfloat16
    return torch.autocast(device.type, dtype=dtype)


def save_checkpoint(
    path: Path,
    model: CLIPTNSeg,
    optimizer: torch.optim.Optimizer | None,
    iteration: int,
    best_val_miou: float,
    cfg: RunConfig,
) -> Checkpoint:
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "trainable_weights": {k: v.detach().cpu() for k, v in model.trainable_state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": iteration,
        "best_val_mIoU": best_val_miou,
        "config": cfg.to_flat(),
        "config_hash": cfg.config_hash(),
        "backbone_checksum": model.backbone.checksum(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise TrainingError(f"failed to write checkpoint {path}: {exc}") from exc
    return Checkpoint(path, iteration, best_val_miou, payload["config_hash"])


def load_checkpoint(path: str | Path, device: torch.device | None = None) -> tuple[CLIPTNSeg, dict]:
    """Rebuild a model (backbone included) from a checkpoint file."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {version}")
    cfg = RunConfig.from_flat(payload["config"]).validate()
    model = CLIPTNSeg.from_config(cfg.model)
    if model.backbone.checksum() != payload["backbone_checksum"]:
        raise ConfigError("backbone weights differ from the ones the checkpoint was trained with")
    model.load_trainable_state_dict(payload["trainable_weights"])
    model.to(device or torch.device("cpu"))
    model.eval()
    payload["run_config"] = cfg
    return model, payload


class RunLog:
    """Append-only JSON-lines run log."""

    def __init__(self, path: Path):
        self.path = path

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def train_loop(
    model: CLIPTNSeg,
    train_samples: list[ImageSample],
    val_samples: list[ImageSample],
    cfg: RunConfig,
    device: torch.device | None = None,
) -> TrainResult:
    """Run exactly ``max_iters`` optimizer steps; validate every ``val_every``.

    Keeps ``latest.pt`` and ``best.pt`` (by validation mIoU) in
    ``checkpoint_dir`` and appends to ``train_log.jsonl`` there.
    """
    tc = cfg.train
    if not train_samples:
        raise InputError("training split is empty")
    if not val_samples:
        raise InputError("validation split is empty")
    device = device or default_device()
    out_dir = Path(tc.checkpoint_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TrainingError(f"cannot create checkpoint directory {out_dir}: {exc}") from exc
    log = RunLog(out_dir / "train_log.jsonl")

    torch.manual_seed(tc.seed)
    model.to(device)
    frozen_before = model.backbone.checksum()
    params = model.trainable_parameters()
    optimizer = torch.optim.Adam(params, lr=tc.lr_max, betas=(0.9, 0.999), weight_decay=0.0)
    scaler = torch.amp.GradScaler("cuda") if (tc.mixed_precision and device.type == "cuda") else None

    res = cfg.model.resolution
    stream = BatchStream(train_samples, tc.batch_size, res, cfg.data, tc.seed)
    val_view = eval_view(val_samples, res, tc.seed)
    meta = {"config_hash": cfg.config_hash(), "dataset": cfg.data.manifest or "in-memory"}

    log.write({"event": "start", "config_hash": meta["config_hash"], "max_iters": tc.max_iters,
               "n_train": len(train_samples), "n_val": len(val_samples)})
    losses: list[float] = []
    history: list[dict] = []
    best_miou = -1.0
    latest = best = None
    t0 = time.time()
    model.train()
    for it in range(tc.max_iters):
        lr = lr_schedule(it, tc)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batch = stream.next_batch()
        images, masks, prompts = to_tensors(batch)
        images, masks = images.to(device), masks.to(device)
        with _autocast(device, tc.mixed_precision):
            logits = model(images, prompts)
        prob = torch.sigmoid(logits.float())[:, 0]
        loss = dice_loss(prob, masks)
        if not torch.isfinite(loss):
            diag = {"iter": it + 1, "lr": lr, "loss": loss.item(), "samples": [s.sample_id for s in batch]}
            (out_dir / "diagnostic.json").write_text(json.dumps(diag, indent=2))
            raise TrainingError(f"non-finite loss at iteration {it + 1}; snapshot in {out_dir / 'diagnostic.json'}")
        optimizer.zero_grad(set_to_none=True)
        if scaler is not None:
            scaler.scale(loss).backward()
            if tc.clip_norm:
                scaler.unscale_(optimizer)
                torch.nn.utils.clip_grad_norm_(params, tc.clip_norm)
            scaler.step(optimizer)
            scaler.update()
        else:
            loss.backward()
            if tc.clip_norm:
                torch.nn.utils.clip_grad_norm_(params, tc.clip_norm)
            optimizer.step()
        step = it + 1
        loss_value = loss.item()
        losses.append(loss_value)
        log.write({"event": "step", "iter": step, "lr": lr, "loss": loss_value})

        if step % tc.val_every == 0:
            rep = validate(model, val_view, tc.threshold, metadata=meta)
            model.train()
            record = {"event": "val", "iter": step, "mIoU": rep.mIoU, "mDice": rep.mDice, "IoU_FG": rep.IoU_FG}
            history.append(record)
            log.write(record)
            logger.info("iter %d loss %.4f val %s (%.0fs)", step, loss_value, rep.headline(), time.time() - t0)
            if rep.mIoU > best_miou:
                best_miou = rep.mIoU
                best = save_checkpoint(out_dir / "best.pt", model, optimizer, step, best_miou, cfg)
            latest = save_checkpoint(out_dir / "latest.pt", model, optimizer, step, best_miou, cfg)

    if latest is None or latest.iteration != tc.max_iters:
        latest = save_checkpoint(out_dir / "latest.pt", model, optimizer, tc.max_iters, best_miou, cfg)
    if best is None:
        best = latest
    frozen_after = model.backbone.checksum()
    if frozen_after != frozen_before:
        raise TrainingError("frozen backbone weights changed during training")
    log.write({"event": "end", "iter": tc.max_iters, "final_loss": losses[-1], "best_val_mIoU": best_miou})
    model.eval()
    return TrainResult(latest, best, losses[-1], losses, history, frozen_after)
