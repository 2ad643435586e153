import math

import numpy as np
import pytest
import torch

from argmamba.errors import ConfigError, ParseError, ShapeError
from argmamba.network import (AllIgnoredWarning, EncoderStage, ForwardOutput, ModelConfig, PatchEmbed,
                              build_model, load_checkpoint, read_checkpoint, save_checkpoint, segmentation_loss)
from argmamba.numerics import pointwise_relative_errors, randomize_parameters

F64 = torch.float64
MICRO = dict(base_channels=4, state_dim=2)


def _inputs(B=1, H=32, W=32, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, 3, H, W, generator=g, dtype=dtype), torch.randn(B, 1, H, W, generator=g, dtype=dtype)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.num_classes == 6 and cfg.stage_channels == [32, 64, 128, 256]
        assert cfg.scales == [1, 2, 4, 8] and cfg.aux_head_count == 2 and cfg.aux_loss_weight == 0.4

    def test_roundtrip_and_unknown(self):
        cfg = ModelConfig(base_channels=8, use_argfm=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"base_channel": 8})

    def test_invalid(self):
        with pytest.raises(ConfigError):
            ModelConfig(stage_channels=[8, 8, 16, 32])
        with pytest.raises(ConfigError):
            ModelConfig(window_mode="tiles")


class TestShapes:
    def test_stems(self):
        assert PatchEmbed(3, 8)(torch.randn(3, 64, 64)).shape == (8, 16, 16)
        assert PatchEmbed(1, 8)(torch.randn(1, 64, 64)).shape == (8, 16, 16)
        with pytest.raises(ShapeError):
            PatchEmbed(3, 8)(torch.randn(3, 66, 64))

    def test_forward(self):
        m = build_model(ModelConfig(**MICRO))
        out = m(*_inputs(2, 64, 32))
        assert isinstance(out, ForwardOutput)
        assert out.logits.shape == (2, 6, 64, 32)
        assert len(out.aux_logits) == 2 and all(a.shape == (2, 6, 64, 32) for a in out.aux_logits)
        assert [s.shape[1:] for s in out.fused_skips] == [(4, 16, 8), (8, 8, 4), (16, 4, 2), (32, 2, 1)]

    def test_unbatched(self):
        m = build_model(ModelConfig(**MICRO))
        o, d = _inputs()
        assert m(o[0], d[0]).logits.shape == (6, 32, 32)

    def test_indivisible(self):
        m = build_model(ModelConfig(**MICRO))
        with pytest.raises(ShapeError):
            m(*_inputs(1, 48, 32))

    def test_constant_input_finite(self):
        m = randomize_parameters(build_model(ModelConfig(**MICRO)), seed=0)
        out = m(torch.ones(1, 3, 32, 32), torch.ones(1, 1, 32, 32))
        assert torch.isfinite(out.logits).all()

    @pytest.mark.parametrize("ms", [True, False])
    @pytest.mark.parametrize("fuse", [True, False])
    def test_ablation_grid(self, ms, fuse):
        m = build_model(ModelConfig(use_ms_ssm=ms, use_argfm=fuse, **MICRO))
        out = m(*_inputs())
        assert out.logits.shape == (1, 6, 32, 32)
        loss = segmentation_loss(out, torch.randint(0, 6, (1, 32, 32)), m.cfg)
        loss.backward()
        grads = [p.grad for p in m.parameters() if p.grad is not None]
        assert grads and all(torch.isfinite(g).all() for g in grads)

    def test_stage_identity_at_init(self):
        cfg = ModelConfig(**MICRO)
        stage = EncoderStage(0, cfg).double()
        F_o, F_e = torch.randn(4, 8, 8, dtype=F64), torch.randn(4, 8, 8, dtype=F64)
        Fo2, Fe2, F_f = stage(F_o, F_e)
        assert (Fo2 - F_o).abs().max().item() <= 1e-12
        assert (Fe2 - F_e).abs().max().item() <= 1e-12
        assert F_f.shape == F_o.shape


class _Out:
    def __init__(self, logits, aux):
        self.logits, self.aux_logits = logits, aux


class TestLoss:
    cfg = ModelConfig()

    def test_uniform_logits(self):
        z = torch.zeros(1, 6, 4, 4, dtype=F64)
        loss = segmentation_loss(_Out(z, [z, z]), torch.randint(0, 6, (1, 4, 4)), self.cfg)
        assert abs(loss.item() - math.log(6) * (1 + 0.4 * 2)) < 1e-12

    def test_confident_correct(self):
        labels = torch.randint(0, 6, (1, 4, 4))
        z = torch.nn.functional.one_hot(labels, 6).permute(0, 3, 1, 2).double() * 1e4
        assert segmentation_loss(_Out(z, [z]), labels, self.cfg).item() < 1e-12

    def test_ignored_pixels_excluded(self):
        z = torch.randn(1, 6, 4, 4, dtype=F64)
        labels = torch.randint(0, 6, (1, 4, 4))
        masked = labels.clone()
        masked[0, 0] = 255
        z2 = z.clone()
        z2[..., 0, :] = torch.randn(6, 4, dtype=F64)   # ignored row may hold anything
        a = segmentation_loss(_Out(z, []), masked, self.cfg)
        b = segmentation_loss(_Out(z2, []), masked, self.cfg)
        assert a.item() == b.item()

    def test_all_ignored(self):
        z = torch.randn(1, 6, 4, 4, requires_grad=True)
        with pytest.warns(AllIgnoredWarning):
            loss = segmentation_loss(_Out(z, [z]), torch.full((1, 4, 4), 255), self.cfg)
        assert loss.item() == 0.0
        loss.backward()

    def test_out_of_range(self):
        z = torch.zeros(1, 6, 2, 2)
        with pytest.raises(ConfigError):
            segmentation_loss(_Out(z, []), torch.tensor([[[0, 6], [1, 2]]]), self.cfg)

    def test_pixel_permutation(self):
        g = torch.Generator().manual_seed(3)
        z = torch.randn(1, 6, 8, 8, dtype=F64, generator=g)
        labels = torch.randint(0, 6, (1, 8, 8), generator=g)
        labels[0, 1, 1] = 255
        perm = torch.randperm(64, generator=g)
        zp = z.flatten(2)[..., perm].reshape(1, 6, 8, 8)
        lp = labels.flatten(1)[..., perm].reshape(1, 8, 8)
        a = segmentation_loss(_Out(z, [z]), labels, self.cfg)
        b = segmentation_loss(_Out(zp, [zp]), lp, self.cfg)
        assert abs(a.item() - b.item()) < 1e-10


def test_end_to_end_gradient_sample():
    cfg = ModelConfig(**MICRO)
    model = randomize_parameters(build_model(cfg, seed=0, dtype=F64), seed=1, low=-0.5, high=0.5)
    o, d = _inputs(dtype=F64)
    labels = torch.randint(0, 6, (1, 32, 32), generator=torch.Generator().manual_seed(2))
    params = list(model.parameters())
    rng = np.random.default_rng(0)
    sizes = np.array([p.numel() for p in params])
    flat = rng.choice(sizes.sum(), 20, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    idx = [(int(np.searchsorted(offsets, f, side="right") - 1), int(f - offsets[np.searchsorted(offsets, f, side="right") - 1])) for f in flat]
    errs = pointwise_relative_errors(lambda: segmentation_loss(model(o, d), labels, cfg), params, idx,
                                     eps=1e-4, order=4)
    assert max(errs) < 1e-4


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        m = randomize_parameters(build_model(ModelConfig(**MICRO)), seed=4)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, extra={"epoch": 3})
        m2, header = load_checkpoint(path)
        assert header["extra"] == {"epoch": 3}
        for (n, a), (n2, b) in zip(m.named_parameters(), m2.named_parameters()):
            assert n == n2 and torch.equal(a, b)
        o, d = _inputs()
        assert torch.equal(m(o, d).logits, m2(o, d).logits)
        save_checkpoint(tmp_path / "again.ckpt", m2, extra={"epoch": 3})
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + b"\0" * 40)
        with pytest.raises(ParseError):
            read_checkpoint(tmp_path / "x")
        m = build_model(ModelConfig(**MICRO))
        save_checkpoint(tmp_path / "m", m)
        raw = (tmp_path / "m").read_bytes()
        (tmp_path / "t").write_bytes(raw[:-10])
        with pytest.raises(ParseError, match="available"):
            read_checkpoint(tmp_path / "t")

    def test_little_endian_payload(self, tmp_path):
        m = build_model(ModelConfig(**MICRO))
        save_checkpoint(tmp_path / "m", m)
        header, tensors = read_checkpoint(tmp_path / "m")
        first = header["tensors"][0]
        assert tensors[first["name"]].dtype == np.dtype("<f4")
        assert first["nbytes"] == 4 * int(np.prod(first["shape"]))
