import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cliptnseg.data import ImageSample
from cliptnseg.errors import InputError, SegShapeError
from cliptnseg.metrics import (
    MetricReport,
    ablation_table,
    dice,
    evaluate,
    format_headline,
    iou,
    score_sample,
)
from cliptnseg.model import ablate_branch


def pixel_oracle(pred, gt, cls):
    """Exhaustive per-pixel count; returns (iou, dice)."""
    v = 1 if cls == "fg" else 0
    inter = union = p_n = g_n = 0
    for a, b in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        pa, gb = a == v, b == v
        inter += pa and gb
        union += pa or gb
        p_n += pa
        g_n += gb
    i = 1.0 if union == 0 else inter / union
    d = 1.0 if p_n + g_n == 0 else 2 * inter / (p_n + g_n)
    return i, d


TWO_BY_TWO = (np.array([[1, 1], [0, 0]]), np.array([[0, 1], [0, 1]]))


def test_iou_identical():
    m = np.array([[1, 0], [1, 1]])
    assert iou(m, m) == 1.0


def test_iou_disjoint():
    assert iou(np.array([[1, 0]]), np.array([[0, 1]])) == 0.0


def test_iou_two_by_two():
    assert iou(*TWO_BY_TWO) == pytest.approx(1 / 3, abs=0)


def test_dice_two_by_two():
    assert dice(*TWO_BY_TWO) == 0.5


def test_dice_identical():
    m = np.array([[0, 1, 1]])
    assert dice(m, m) == 1.0


def test_dice_iou_identity_on_example():
    i = iou(*TWO_BY_TWO)
    assert dice(*TWO_BY_TWO) == pytest.approx(2 * i / (1 + i), abs=1e-12)


def test_both_empty_convention():
    z = np.zeros((3, 3), np.uint8)
    assert iou(z, z) == dice(z, z) == 1.0
    o = np.ones((3, 3), np.uint8)
    assert iou(o, o, "bg") == 1.0


def test_shape_and_value_errors():
    with pytest.raises(SegShapeError):
        iou(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(InputError):
        dice(np.array([[0, 2]]), np.array([[0, 1]]))


def test_random_pairs_match_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.integers(0, 2, (8, 8))
        b = rng.integers(0, 2, (8, 8))
        for cls in ("fg", "bg"):
            oi, od = pixel_oracle(a, b, cls)
            assert iou(a, b, cls) == oi
            assert dice(a, b, cls) == od


binary = arrays(np.uint8, (6, 6), elements=st.integers(0, 1))


@settings(max_examples=200, deadline=None)
@given(binary, binary)
def test_properties(a, b):
    for cls in ("fg", "bg"):
        i, d = iou(a, b, cls), dice(a, b, cls)
        assert i == iou(b, a, cls) and d == dice(b, a, cls)
        assert 0.0 <= i <= 1.0 and 0.0 <= d <= 1.0
        assert abs(d - 2 * i / (1 + i)) <= 1e-12
    s = score_sample("x", a, b)
    assert s.iou_mean == (s.iou_fg + s.iou_bg) / 2
    assert s.dice_mean == (s.dice_fg + s.dice_bg) / 2


class MaskPredictor(torch.nn.Module):
    """Returns +/-10 logits from fixed masks, keyed by the prompt."""

    def __init__(self, masks: dict[str, np.ndarray]):
        super().__init__()
        self.masks = masks

    def forward(self, images, prompts):
        m = torch.stack([torch.from_numpy(self.masks[p]).float() for p in prompts])
        return (m * 20 - 10)[:, None]


def _samples(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        mask = np.zeros((size, size), np.uint8)
        y, x = rng.integers(0, size - 4, 2)
        mask[y : y + 4, x : x + 4] = 1
        img = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
        out.append(ImageSample(img, mask, prompt=f"p{k}", sample_id=f"s{k}"))
    return out


def test_perfect_predictor_scores_one():
    samples = _samples()
    model = MaskPredictor({s.prompt: s.mask for s in samples})
    rep = evaluate(model, samples)
    assert rep.mIoU == rep.mDice == rep.IoU_FG == 1.0
    assert rep.n_samples == 4
    assert rep.headline() == "mIoU 100.00 mDice 100.00 IoU_FG 100.00"


def test_background_predictor_zero_fg():
    samples = _samples()
    model = MaskPredictor({s.prompt: np.zeros_like(s.mask) for s in samples})
    rep = evaluate(model, samples)
    assert rep.IoU_FG == 0.0
    assert 0 < rep.mIoU < 1


def test_aggregates_are_means():
    samples = _samples(6, seed=3)
    rng = np.random.default_rng(1)
    model = MaskPredictor({s.prompt: rng.integers(0, 2, s.mask.shape).astype(np.uint8) for s in samples})
    rep = evaluate(model, samples)
    assert rep.mIoU == pytest.approx(np.mean([s.iou_mean for s in rep.per_sample]), abs=1e-15)
    assert rep.mDice == pytest.approx(np.mean([s.dice_mean for s in rep.per_sample]), abs=1e-15)
    assert rep.IoU_FG == pytest.approx(np.mean([s.iou_fg for s in rep.per_sample]), abs=1e-15)


def test_empty_dataset_is_fatal():
    with pytest.raises(InputError):
        evaluate(MaskPredictor({}), [])


def test_report_round_trip(tmp_path):
    samples = _samples()
    rng = np.random.default_rng(2)
    model = MaskPredictor({s.prompt: rng.integers(0, 2, s.mask.shape).astype(np.uint8) for s in samples})
    rep = evaluate(model, samples, metadata={"checkpoint": "x.pt", "config_hash": "abc", "dataset": "toy"})
    rep.save(tmp_path / "r.json")
    again = MetricReport.load(tmp_path / "r.json")
    assert again == rep


def test_headline_format():
    assert format_headline(0.8685, 0.9191, 0.7652) == "mIoU 86.85 mDice 91.91 IoU_FG 76.52"


def test_ablation_reports_and_isolation(toy_model):
    from cliptnseg.synthetic import ellipse_dataset

    samples = ellipse_dataset(3, 64, seed=0)
    before = evaluate(toy_model, samples)
    for branch in ("cgb", "fgb"):
        rep = evaluate(ablate_branch(toy_model, branch), samples)
        assert rep.n_samples == 3
    after = evaluate(toy_model, samples)
    assert before == after


def test_both_ablated_mask_constant(toy_model):
    from cliptnseg.synthetic import ellipse_dataset
    from cliptnseg.metrics import predict_masks

    samples = ellipse_dataset(2, 64, seed=0)
    variant = ablate_branch(ablate_branch(toy_model, "cgb"), "fgb")
    for m in predict_masks(variant, samples):
        assert m.min() == m.max()


def test_ablation_table_rows(toy_model):
    from cliptnseg.synthetic import ellipse_dataset

    rows = ablation_table(toy_model, ellipse_dataset(2, 64, seed=0))
    assert [r["row"] for r in rows] == ["cgb", "fgb", "full"]
    assert [(r["CGB"], r["FGB"], r["PH"]) for r in rows] == [(True, False, True), (False, True, True), (True, True, True)]
    full = evaluate(toy_model, ellipse_dataset(2, 64, seed=0))
    assert rows[2]["mIoU"] == full.mIoU
