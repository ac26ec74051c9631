import json
import math

import pytest
import torch

from conftest import toy_run_config
from cliptnseg.config import TrainConfig
from cliptnseg.errors import TrainingError
from cliptnseg.model import CLIPTNSeg
from cliptnseg.train import (
    dice_loss,
    load_checkpoint,
    lr_schedule,
    select_best,
    train_loop,
    validate,
)


def test_dice_loss_perfect_prediction():
    gt = torch.zeros(1, 4, 4)
    gt[0, :2, :2] = 1
    assert dice_loss(gt.clone(), gt).item() == pytest.approx(0.0, abs=1e-7)


def test_dice_loss_full_disagreement():
    gt = torch.zeros(1, 4, 4, dtype=torch.float64)
    gt[0, 1:3, 1:3] = 1
    eps = 1.0
    assert dice_loss(1 - gt, gt, eps).item() == pytest.approx(1 - eps / (16 + eps), abs=1e-15)


def test_dice_loss_batch_mean():
    a = torch.rand(3, 5, 5, dtype=torch.float64)
    g = (torch.rand(3, 5, 5) > 0.5).double()
    per = torch.stack([dice_loss(a[i : i + 1], g[i : i + 1]) for i in range(3)])
    torch.testing.assert_close(dice_loss(a, g), per.mean())


def test_dice_loss_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 2, 2), torch.zeros(1, 3, 3))


def test_dice_loss_gradient_finite_differences():
    g = torch.Generator().manual_seed(0)
    prob = torch.rand(1, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    gt = torch.tensor([[[1.0, 0.0], [1.0, 1.0]]], dtype=torch.float64)
    dice_loss(prob, gt).backward()
    h = 1e-4
    numeric = torch.empty(4, dtype=torch.float64)
    base = prob.detach().reshape(-1)
    for k in range(4):
        plus, minus = base.clone(), base.clone()
        plus[k] += h
        minus[k] -= h
        numeric[k] = (dice_loss(plus.reshape(1, 2, 2), gt) - dice_loss(minus.reshape(1, 2, 2), gt)) / (2 * h)
    rel = (prob.grad.reshape(-1) - numeric).abs().max() / numeric.abs().max()
    assert rel <= 1e-3


def test_dice_loss_bounded():
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        p = torch.rand(2, 6, 6, generator=g)
        t = (torch.rand(2, 6, 6, generator=g) > 0.7).float()
        assert 0.0 <= dice_loss(p, t).item() <= 1.0


def test_lr_schedule_points():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(20000, cfg) == 1e-6
    assert lr_schedule(10000, cfg) == pytest.approx(5.05e-5, rel=1e-12)


def test_lr_schedule_closed_form():
    cfg = TrainConfig(max_iters=100)
    for i in range(1, 100):
        expected = 1e-6 + 0.5 * (1e-4 - 1e-6) * (1 + math.cos(math.pi * i / 100))
        assert lr_schedule(i, cfg) == pytest.approx(expected, rel=1e-14)


def test_lr_schedule_clamps(caplog):
    cfg = TrainConfig(max_iters=10)
    assert lr_schedule(-5, cfg) == cfg.lr_max
    assert lr_schedule(50, cfg) == cfg.lr_min
    assert "clamped" in caplog.text


def test_select_best_replay():
    assert select_best([0.3, 0.7, 0.5]) == 1
    assert select_best([0.5, 0.5]) == 0


def test_validate_leaves_weights_unchanged(toy_model, toy_samples):
    before = {k: v.clone() for k, v in toy_model.trainable_state_dict().items()}
    rep = validate(toy_model, toy_samples)
    assert rep.n_samples == len(toy_samples)
    after = toy_model.trainable_state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_train_counts_validation_and_checkpoints(tmp_path, toy_model_cfg, toy_samples):
    cfg = toy_run_config(tmp_path)
    model = CLIPTNSeg.from_config(toy_model_cfg)
    result = train_loop(model, toy_samples, toy_samples, cfg)
    assert len(result.history) == 4
    assert [h["iter"] for h in result.history] == [5, 10, 15, 20]
    assert len(result.losses) == 20
    run = tmp_path / "run"
    assert (run / "latest.pt").is_file() and (run / "best.pt").is_file()
    lines = [json.loads(x) for x in (run / "train_log.jsonl").read_text().splitlines()]
    assert sum(r["event"] == "step" for r in lines) == 20
    assert sum(r["event"] == "val" for r in lines) == 4
    best = max(range(4), key=lambda i: (result.history[i]["mIoU"], -i))
    assert result.best.iteration == result.history[best]["iter"]


def test_checkpoint_reload_reproduces_predictions(tmp_path, toy_model_cfg, toy_samples):
    cfg = toy_run_config(tmp_path, max_iters=5, val_every=5)
    model = CLIPTNSeg.from_config(toy_model_cfg)
    result = train_loop(model, toy_samples, toy_samples, cfg)
    payload = torch.load(result.latest.path, weights_only=False)
    assert not any("backbone" in k for k in payload["trainable_weights"])
    assert payload["format_version"] == 1 and payload["iteration"] == 5
    reloaded, _ = load_checkpoint(result.latest.path)
    x = torch.rand(2, 3, 64, 64)
    model.eval()
    with torch.no_grad():
        assert torch.equal(model(x, ["a", "a"]), reloaded(x, ["a", "a"]))


def test_mixed_precision_run_is_finite(tmp_path, toy_model_cfg, toy_samples):
    cfg = toy_run_config(tmp_path, max_iters=6, val_every=3, mixed_precision=True)
    model = CLIPTNSeg.from_config(toy_model_cfg)
    result = train_loop(model, toy_samples, toy_samples, cfg)
    assert all(math.isfinite(v) for v in result.losses)


def test_non_finite_loss_aborts(tmp_path, toy_model_cfg, toy_samples):
    cfg = toy_run_config(tmp_path, max_iters=3, val_every=3)
    model = CLIPTNSeg.from_config(toy_model_cfg)
    with torch.no_grad():
        model.ph.net[-1].bias.fill_(float("nan"))
    with pytest.raises(TrainingError):
        train_loop(model, toy_samples, toy_samples, cfg)
    assert (tmp_path / "run" / "diagnostic.json").is_file()


def test_unwritable_checkpoint_dir_aborts(tmp_path, toy_model_cfg, toy_samples):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = toy_run_config(tmp_path, max_iters=2, val_every=2, checkpoint_dir=str(blocker / "sub"))
    with pytest.raises(TrainingError):
        train_loop(CLIPTNSeg.from_config(toy_model_cfg), toy_samples, toy_samples, cfg)
