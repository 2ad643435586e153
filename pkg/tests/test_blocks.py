import pytest
import torch

from argmamba.blocks import (MsSsmConfig, MultiScaleSS2D, SS2D, channel_split, equal_split, ms_ssm_block,
                             vssb)
from argmamba.errors import ConfigError
from argmamba.numerics import finite_difference_check, randomize_parameters

F64 = torch.float64
# composite graphs: five-point stencil, step sized above the roundoff floor
BLOCK_EPS = 1e-4


class TestChannelSplit:
    def test_default_equal(self):
        assert equal_split(64, 4) == [16, 16, 16, 16]

    @pytest.mark.parametrize("C,N", [(10, 4), (7, 3), (9, 4), (33, 8)])
    def test_remainder_to_earliest(self, C, N):
        parts = equal_split(C, N)
        assert sum(parts) == C
        assert max(abs(p - C / N) for p in parts) <= 1
        assert parts == sorted(parts, reverse=True)

    def test_explicit_slices(self):
        x = torch.arange(6.0).reshape(6, 1, 1).expand(6, 2, 2)
        parts = channel_split(x, [1, 2, 3])
        assert [p[:, 0, 0].tolist() for p in parts] == [[0.0], [1.0, 2.0], [3.0, 4.0, 5.0]]

    def test_roundtrip(self):
        x = torch.randn(2, 10, 3, 3)
        assert torch.equal(torch.cat(channel_split(x, equal_split(10, 4)), dim=-3), x)

    def test_sum_mismatch(self):
        with pytest.raises(ConfigError):
            channel_split(torch.zeros(5, 2, 2), [2, 2])
        with pytest.raises(ConfigError):
            MsSsmConfig(scales=[1, 2], channel_split=[3, 3]).splits_for(5)


class TestMultiScale:
    def test_single_scale_reduces_to_ss2d(self):
        m = MultiScaleSS2D(6, MsSsmConfig(scales=[1]), state_dim=4).double()
        x = torch.randn(2, 6, 8, 8, dtype=F64)
        branch = m.branches[0]
        expected = m.dconv(m.proj(branch(x)))
        assert torch.equal(m(x), expected)

    def test_shape(self):
        m = MultiScaleSS2D(8, MsSsmConfig(scales=[1, 2, 4, 8]))
        assert m(torch.randn(8, 8, 8)).shape == (8, 8, 8)
        assert m(torch.randn(3, 8, 8, 8)).shape == (3, 8, 8, 8)

    @pytest.mark.parametrize("mode", ["divide", "literal"])
    def test_window_independence(self, mode):
        H = W = 8
        m = MultiScaleSS2D(8, MsSsmConfig(scales=[1, 2, 4, 8], window_mode=mode), state_dim=2).double()
        x = torch.randn(8, H, W, dtype=F64)
        r, c = 5, 2
        x2 = x.clone()
        x2[:, r, c] += 1.0
        delta = (m.scan(x2) - m.scan(x)).abs()
        for i, s in enumerate([1, 2, 4, 8]):
            d = delta[2 * i:2 * i + 2].amax(0)
            wh, ww = (H // s, W // s) if mode == "divide" else (s, s)
            inside = torch.zeros(H, W, dtype=torch.bool)
            inside[(r // wh) * wh:(r // wh + 1) * wh, (c // ww) * ww:(c // ww + 1) * ww] = True
            assert d[~inside].max().item() == 0.0 if (~inside).any() else True
            assert d[r, c].item() > 0

    def test_indivisible_map_is_padded(self):
        m = SS2D(2, 2, scale=4)
        assert m(torch.randn(2, 6, 6)).shape == (2, 6, 6)
        strict = SS2D(2, 2, scale=4, pad=False)
        with pytest.raises(ConfigError):
            strict(torch.randn(2, 6, 6))


class TestBlocks:
    @pytest.mark.parametrize("make", [lambda: vssb(4, 4), lambda: ms_ssm_block(4, state_dim=4)])
    def test_identity_at_init(self, make):
        blk = make().double()
        x = torch.randn(2, 4, 8, 8, dtype=F64)
        assert (blk(x) - x).abs().max().item() <= 1e-12

    @pytest.mark.parametrize("make", [lambda: vssb(4, 4), lambda: ms_ssm_block(4, state_dim=4)])
    def test_shape_and_finite(self, make):
        blk = randomize_parameters(make(), seed=3)
        y = blk(torch.randn(2, 4, 16, 8))
        assert y.shape == (2, 4, 16, 8)
        assert torch.isfinite(y).all()

    def test_vssb_is_single_scale_ms_block(self):
        ms = ms_ssm_block(4, MsSsmConfig(scales=[1]), state_dim=4).double()
        randomize_parameters(ms, seed=1)
        with torch.no_grad():
            # neutral merge: identity projection and delta kernel
            inner = ms.mixer.proj.weight.shape[0]
            ms.mixer.proj.weight.copy_(torch.eye(inner, dtype=F64))
            ms.mixer.proj.bias.zero_()
            ms.mixer.dconv.weight.zero_()
            ms.mixer.dconv.weight[:, 1, 1] = 1
            ms.mixer.dconv.bias.zero_()
        plain = vssb(4, 4).double()
        own = dict(plain.named_parameters())
        with torch.no_grad():
            for name, p in ms.named_parameters():
                key = name.replace("mixer.branches.0.", "mixer.")
                if key in own:
                    own[key].copy_(p)
        x = torch.randn(4, 8, 8, dtype=F64)
        assert torch.allclose(plain(x), ms(x), atol=1e-13)

    def test_gradient_check(self):
        blk = randomize_parameters(ms_ssm_block(2, state_dim=2).double(), seed=5)
        x = torch.rand(2, 4, 4, dtype=F64, requires_grad=True) * 2 - 1
        x = x.detach().requires_grad_(True)
        tensors = [x] + list(blk.parameters())
        assert finite_difference_check(lambda: blk(x), tensors, eps=BLOCK_EPS, order=4) < 1e-5
