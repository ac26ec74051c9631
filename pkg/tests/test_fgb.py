import pytest
import torch

from cliptnseg.errors import ConfigError
from cliptnseg.fgb import FineBranch, ResidualBlock, stage_table


def central_diff(f, x, h=1e-4):
    grad = torch.empty_like(x)
    flat = x.reshape(-1)
    for k in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[k] += h
        minus[k] -= h
        grad.reshape(-1)[k] = (f(plus.reshape(x.shape)) - f(minus.reshape(x.shape))) / (2 * h)
    return grad


def test_zeroed_transform_is_identity():
    block = ResidualBlock(8, 8)
    block.zero_transform()
    x = torch.randn(2, 8, 16, 16)
    assert torch.equal(block(x), x)


def test_projection_shortcut_shape():
    block = ResidualBlock(8, 16)
    assert block(torch.randn(1, 8, 16, 16)).shape == (1, 16, 16, 16)


def test_zeroed_block_gradient_is_all_ones():
    block = ResidualBlock(1, 1).double().eval()
    block.zero_transform()
    x = torch.randn(1, 1, 2, 2, dtype=torch.float64, requires_grad=True)
    block(x).sum().backward()
    numeric = central_diff(lambda z: block(z).sum(), x.detach())
    torch.testing.assert_close(numeric, torch.ones_like(numeric))
    torch.testing.assert_close(x.grad, numeric)


def test_default_resolution_shape():
    torch.manual_seed(0)
    fgb = FineBranch((32, 64, 128, 256), n_blocks=2, out_channels=64).eval()
    with torch.no_grad():
        out = fgb(torch.randn(1, 3, 352, 352))
    assert out.shape == (1, 64, 352, 352)
    assert torch.isfinite(out).all()


def test_indivisible_resolution_is_config_error():
    fgb = FineBranch((4, 4, 4, 4, 4, 4), n_blocks=1, out_channels=4)
    with pytest.raises(ConfigError):
        fgb(torch.zeros(1, 3, 352, 352))
    with pytest.raises(ConfigError):
        fgb.check_resolution(352)


def test_removing_a_skip_changes_output():
    torch.manual_seed(0)
    fgb = FineBranch((4, 8, 16), n_blocks=1, out_channels=4).eval()
    x = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        ref = fgb(x)
        fgb.disabled_skips = {2}
        cut = fgb(x)
    assert not torch.allclose(ref, cut)


def test_stage_table_symmetry():
    table = stage_table([32, 64, 128, 256])
    depth = 4
    enc = [s for s in table if s.name.startswith("enc")]
    dec = [s for s in table if s.name.startswith("dec")]
    assert len(enc) == depth + 1 and len(dec) == depth
    for k in range(depth):
        # encoder stage k and decoder stage depth-k share a resolution (and width)
        assert enc[k].scale == dec[depth - k - 1].scale
        assert enc[k].out_channels == dec[depth - k - 1].out_channels
    assert [s.scale for s in enc] == [1, 2, 4, 8, 16]


def test_every_matching_width_block_is_residual_identity():
    fgb = FineBranch((4, 8), n_blocks=2, out_channels=4)
    blocks = [m for m in fgb.modules() if isinstance(m, ResidualBlock)]
    for b in blocks:
        if isinstance(b.shortcut, torch.nn.Identity):
            b.zero_transform()
            x = torch.randn(1, b.transform[2].in_channels, 8, 8)
            assert torch.equal(b(x), x)


def test_fine_branch_gradient_check():
    torch.manual_seed(0)
    fgb = FineBranch((2, 2, 2), n_blocks=1, out_channels=2).double().eval()
    x = torch.randn(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 2, 8, 8, dtype=torch.float64)

    def f(z):
        return (fgb(z) * w).sum()

    f(x).backward()
    numeric = central_diff(f, x.detach(), h=1e-5)
    rel = (x.grad - numeric).abs().max() / numeric.abs().max()
    assert rel <= 1e-3
