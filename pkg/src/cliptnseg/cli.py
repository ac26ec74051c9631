"""Command-line interface: ``cliptnseg {train,eval,ablate,predict,bench,visualize}``.

Exit status: 0 when the command's artifact was fully written, 2 for bad
configuration or inputs (nothing is run), 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

from cliptnseg.config import DEFAULT_PROMPT, load_config
from cliptnseg.data import eval_view, load_dataset
from cliptnseg.errors import ConfigError, InputError, SegShapeError, TrainingError
from cliptnseg.metrics import (
    ablation_table,
    evaluate,
    format_ablation_table,
    predict_masks,
)
from cliptnseg.model import CLIPTNSeg
from cliptnseg.train import default_device, load_checkpoint, train_loop

logger = logging.getLogger("cliptnseg")


class UsageError(Exception):
    pass


def _load_eval_inputs(args):
    try:
        model, payload = load_checkpoint(args.checkpoint, default_device())
    except (InputError, ConfigError) as exc:
        raise UsageError(str(exc)) from exc
    cfg = payload["run_config"]
    try:
        samples, report = load_dataset(None, args.dataset, split=args.split, base_prompt=cfg.data.default_prompt)
    except InputError as exc:
        raise UsageError(str(exc)) from exc
    view = eval_view(samples, cfg.model.resolution, cfg.train.seed)
    meta = {
        "config_hash": payload["config_hash"],
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "checkpoint_iteration": payload["iteration"],
        "dataset": str(Path(args.dataset).resolve()),
        "split": args.split,
        "skipped_rows": len(report.errors),
    }
    return model, view, meta


def _threshold(args, default: float = 0.5) -> float:
    t = default if args.threshold is None else args.threshold
    if not 0.0 < t < 1.0:
        raise UsageError(f"threshold must lie in (0, 1), got {t}")
    return t


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config, args.set)
        if not cfg.data.manifest:
            raise ConfigError("config key 'manifest' is required for training")
        root = cfg.data.data_root or None
        train, _ = load_dataset(root, cfg.data.manifest, cfg.data.train_split, cfg.data.default_prompt)
        val, _ = load_dataset(root, cfg.data.manifest, cfg.data.val_split, cfg.data.default_prompt)
        model = CLIPTNSeg.from_config(cfg.model)
    except (ConfigError, InputError) as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(cfg.train.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.yaml")
    result = train_loop(model, train, val, cfg)
    print(f"trained {cfg.train.max_iters} iterations; final loss {result.final_loss:.4f}")
    print(f"latest checkpoint: {result.latest.path}")
    print(f"best checkpoint:   {result.best.path} (val mIoU {100 * result.best.best_val_mIoU:.2f})")
    return 0


def cmd_eval(args) -> int:
    model, view, meta = _load_eval_inputs(args)
    report = evaluate(model, view, _threshold(args), metadata=meta)
    report.save(args.out)
    print(report.headline())
    return 0


def cmd_ablate(args) -> int:
    model, view, meta = _load_eval_inputs(args)
    rows = ablation_table(model, view, _threshold(args), metadata=meta)
    if args.branch == "cgb":
        rows = [r for r in rows if r["row"] in ("fgb", "full")]
    elif args.branch == "fgb":
        rows = [r for r in rows if r["row"] in ("cgb", "full")]
    Path(args.out).write_text(json.dumps({"rows": rows, "run_metadata": meta}, indent=2))
    print(format_ablation_table(rows))
    return 0


def _read_image(path: str, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im).copy()
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc


def overlay_contour(image: np.ndarray, mask: np.ndarray, color=(255, 0, 0)) -> np.ndarray:
    """Input image with the mask boundary drawn in ``color``."""
    edge = mask.astype(bool) & ~ndimage.binary_erosion(mask.astype(bool), border_value=0)
    out = image.copy()
    out[edge] = color
    return out


def cmd_predict(args) -> int:
    try:
        model, payload = load_checkpoint(args.checkpoint, default_device())
    except (InputError, ConfigError) as exc:
        raise UsageError(str(exc)) from exc
    cfg = payload["run_config"]
    res = cfg.model.resolution
    prompt = args.prompt if args.prompt is not None else DEFAULT_PROMPT
    if not prompt.strip():
        raise UsageError("prompt is empty")
    threshold = _threshold(args, cfg.train.threshold)
    image = _read_image(args.image, res)
    x = torch.from_numpy(image).permute(2, 0, 1)[None].float().div(255).to(default_device())
    model.eval()
    with torch.no_grad():
        prob = torch.sigmoid(model(x, [prompt]).float())[0, 0].cpu().numpy()
    mask = (prob >= threshold).astype(np.uint8)
    Image.fromarray(mask * 255).save(args.out)
    meta = {
        "prompt": prompt,
        "threshold": threshold,
        "resolution": res,
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "config_hash": payload["config_hash"],
        "image": str(Path(args.image).resolve()),
        "foreground_pixels": int(mask.sum()),
    }
    Path(str(args.out) + ".json").write_text(json.dumps(meta, indent=2))
    if args.overlay:
        Image.fromarray(overlay_contour(image, mask)).save(args.overlay)
    print(f"mask written to {args.out} ({mask.sum()} foreground pixels)")
    return 0


def cmd_visualize(args) -> int:
    model, view, _ = _load_eval_inputs(args)
    view = view[: args.limit]
    preds = predict_masks(model, view, _threshold(args))
    tiles = []
    for s, p in zip(view, preds):
        gt = np.repeat(s.mask[..., None] * 255, 3, axis=-1).astype(np.uint8)
        ours = overlay_contour(overlay_contour(s.image, s.mask, (0, 255, 0)), p, (255, 0, 0))
        tiles.append(np.concatenate([s.image, gt, ours], axis=1))
    grid = Image.fromarray(np.concatenate(tiles, axis=0))
    ImageDraw.Draw(grid).text((4, 4), "input | ground truth | prediction (red) vs truth (green)", fill=(255, 255, 0))
    grid.save(args.out)
    print(f"wrote {len(tiles)} rows to {args.out}")
    return 0


def _time_ms(fn, runs: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    start = time.perf_counter()
    for _ in range(runs):
        fn()
    return 1000 * (time.perf_counter() - start) / runs


def cmd_bench(args) -> int:
    if args.checkpoint:
        try:
            model, _ = load_checkpoint(args.checkpoint, default_device())
        except (InputError, ConfigError) as exc:
            raise UsageError(str(exc)) from exc
    else:
        try:
            cfg = load_config(args.config, args.set)
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
        model = CLIPTNSeg.from_config(cfg.model).to(default_device()).eval()
    if args.runs < 1 or args.warmup < 0:
        raise UsageError("--runs must be >= 1 and --warmup >= 0")
    res = model.resolution
    device = default_device()
    x = torch.rand(1, 3, res, res, device=device)
    prompts = [DEFAULT_PROMPT]
    with torch.no_grad():
        pixels = model.backbone.normalize(x)
        cond = model.backbone.encode_text(prompts).to(device)
        coarse = model.cgb(pixels, cond)
        fine = model.fgb(pixels)

        def sync(f):
            def g():
                f()
                if device.type == "cuda":
                    torch.cuda.synchronize()
            return g

        timings = {
            "cgb_ms": _time_ms(sync(lambda: model.cgb(pixels, cond)), args.runs, args.warmup),
            "fgb_ms": _time_ms(sync(lambda: model.fgb(pixels)), args.runs, args.warmup),
            "ph_ms": _time_ms(sync(lambda: model.ph(coarse, fine)), args.runs, args.warmup),
        }
    result = {**timings, "runs": args.runs, "warmup": args.warmup, "resolution": res,
              "device": str(device), "note": "hardware dependent, not a pass/fail target"}
    print(" ".join(f"{k} {v:.2f}" for k, v in timings.items()) + f"  ({device}, hardware dependent)")
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cliptnseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, required=True):
        p.add_argument("--config", required=required, help="flat key: value YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    def dataset_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True, help="manifest CSV")
        p.add_argument("--split", default="test")
        p.add_argument("--threshold", type=float, default=None)

    p = sub.add_parser("train", help="train a model")
    config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    dataset_args(p)
    p.add_argument("--out", required=True, help="metric report (JSON)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="zero-branch ablation table")
    dataset_args(p)
    p.add_argument("--branch", choices=("all", "cgb", "fgb"), default="all",
                   help="branch to ablate; 'all' gives the three-row table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True, help="mask PNG (0/255)")
    p.add_argument("--overlay", default=None, help="optional contour overlay PNG")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="per-branch forward latency")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("visualize", help="input / truth / prediction grid")
    dataset_args(p)
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, SegShapeError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
