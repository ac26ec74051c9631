import pytest
import torch

from cliptnseg.config import ModelConfig, RunConfig
from cliptnseg.model import CLIPTNSeg
from cliptnseg.synthetic import ellipse_dataset

# Small model used across the suite: 64 px input, 4x4 patch grid, 12-layer tiny backbone.
TOY_MODEL = dict(
    resolution=64,
    proj_dim=16,
    decoder_heads=2,
    fgb_channels=[4, 8],
    fgb_blocks=1,
    fgb_out=8,
    head_channels=8,
    tiny_width=32,
    tiny_heads=2,
    tiny_text_width=32,
    tiny_embed_dim=32,
)

# Reduced-resolution profile for the overfit and ablation acceptance runs.
OVERFIT_PROFILE = dict(
    resolution=160,
    proj_dim=16,
    decoder_heads=2,
    fgb_channels=[8, 16, 32, 64],
    fgb_blocks=1,
    fgb_out=16,
    head_channels=16,
    tiny_width=32,
    tiny_heads=2,
    tiny_text_width=32,
    tiny_embed_dim=32,
    batch_size=4,
)

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def toy_model_cfg() -> ModelConfig:
    return ModelConfig(**TOY_MODEL)


@pytest.fixture
def toy_model(toy_model_cfg) -> CLIPTNSeg:
    torch.manual_seed(0)
    return CLIPTNSeg.from_config(toy_model_cfg)


def toy_run_config(tmp_path, **overrides) -> RunConfig:
    flat = dict(TOY_MODEL, max_iters=20, val_every=5, batch_size=2, checkpoint_dir=str(tmp_path / "run"))
    flat.update(overrides)
    return RunConfig.from_flat(flat).validate()


@pytest.fixture
def toy_samples():
    return ellipse_dataset(4, size=64, seed=1)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
