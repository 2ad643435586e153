"""Dual-stream encoder, fused-skip decoder with deep supervision, loss and checkpoints."""
import dataclasses
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .blocks import ChannelLinear, DepthwiseConv, LayerNorm, MsSsmConfig, ms_ssm_block, vssb
from .errors import ConfigError, ParseError, ShapeError
from .fusion import ARGFM

IGNORE_INDEX = 255


@dataclass
class ModelConfig:
    num_classes: int = 6
    base_channels: int = 32
    stage_channels: list = None
    blocks_per_stage: list = field(default_factory=lambda: [1, 1, 1, 1])
    scales: list = field(default_factory=lambda: [1, 2, 4, 8])
    state_dim: int = 8
    aux_head_count: int = 2
    aux_loss_weight: float = 0.4
    use_ms_ssm: bool = True
    use_argfm: bool = True
    window_mode: str = "divide"
    expand: int = 2
    dconv_kernel: int = 3
    axial_kernel: int = 3
    attn_heads: int = 1
    direction_reduce: str = "sum"
    max_relation_tokens: int = 16384
    scan_chunk: int = 64
    attn_residual: bool = False
    head_upsample: str = "bilinear"
    zero_init_heads: bool = False
    optical_channels: int = 3
    dsm_channels: int = 1

    def __post_init__(self):
        if self.stage_channels is None:
            C = self.base_channels
            self.stage_channels = [C, 2 * C, 4 * C, 8 * C]
        sc = self.stage_channels
        if len(sc) != 4 or any(b <= a for a, b in zip(sc, sc[1:])):
            raise ConfigError(f"stage_channels must be 4 strictly increasing widths, got {sc}")
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ConfigError(f"blocks_per_stage must list 4 positive counts, got {self.blocks_per_stage}")
        if not 0 <= self.aux_head_count <= 3:
            raise ConfigError("aux_head_count must be between 0 and 3 (three decoder blocks)")
        if self.window_mode not in ("divide", "literal"):
            raise ConfigError(f"unknown window_mode {self.window_mode!r}")
        if self.head_upsample not in ("bilinear", "subpixel"):
            raise ConfigError(f"unknown head_upsample {self.head_upsample!r}")

    @property
    def input_multiple(self):
        return 32

    def ms_cfg(self):
        return MsSsmConfig(scales=list(self.scales), dconv_kernel=self.dconv_kernel,
                           direction_reduce=self.direction_reduce, window_mode=self.window_mode)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    aux_logits: list
    fused_skips: list


class PatchEmbed(nn.Module):
    """Non-overlapping ``patch x patch`` strided convolution plus channel norm."""

    def __init__(self, c_in, c_out, patch=4):
        super().__init__()
        self.patch = patch
        self.conv = nn.Conv2d(c_in, c_out, patch, stride=patch)
        self.norm = LayerNorm(c_out, channel_axis=True)

    def forward(self, x):
        H, W = x.shape[-2:]
        if H % self.patch or W % self.patch:
            raise ShapeError(f"input {H}x{W} is not divisible by {self.patch}")
        return self.norm(self.conv(x))


class ConcatFusion(nn.Module):
    """Stand-in for ARGFM in ablations: streams pass through, skip = linear(concat)."""

    def __init__(self, channels):
        super().__init__()
        self.proj = ChannelLinear(2 * channels, channels)

    def forward(self, F_o, F_e, kernel=None):
        return F_o, F_e, self.proj(torch.cat([F_o, F_e], dim=-3))


class EncoderStage(nn.Module):
    def __init__(self, idx, cfg):
        super().__init__()
        C = cfg.stage_channels[idx]
        n = cfg.blocks_per_stage[idx]
        self.idx = idx

        def stream():
            layers = []
            for _ in range(n):
                layers.append(vssb(C, cfg.state_dim, cfg.expand, cfg.window_mode,
                                   cfg.direction_reduce, cfg.scan_chunk))
                if cfg.use_ms_ssm:
                    layers.append(ms_ssm_block(C, cfg.ms_cfg(), cfg.state_dim, cfg.expand, cfg.scan_chunk))
                else:
                    layers.append(vssb(C, cfg.state_dim, cfg.expand, cfg.window_mode,
                                       cfg.direction_reduce, cfg.scan_chunk))
            return nn.Sequential(*layers)

        self.optical = stream()
        self.elevation = stream()
        if cfg.use_argfm:
            self.fusion = ARGFM(C, cfg.state_dim, cfg.axial_kernel, cfg.attn_heads,
                                max_tokens=cfg.max_relation_tokens, chunk_size=cfg.scan_chunk,
                                attn_residual=cfg.attn_residual)
        else:
            self.fusion = ConcatFusion(C)

    def forward(self, F_o, F_e):
        """Returns ``(F'_o, F'_e, F_f)`` at this stage's resolution."""
        return self.fusion(self.optical(F_o), self.elevation(F_e))


class Downsample(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 2, stride=2)
        self.norm = LayerNorm(c_out, channel_axis=True)

    def forward(self, x):
        return self.norm(self.conv(x))


class DecoderBlock(nn.Module):
    """2x nearest upsample, concat skip, linear reduce, depthwise conv, SiLU."""

    def __init__(self, c_in, c_skip, c_out, kernel=3):
        super().__init__()
        self.reduce = ChannelLinear(c_in + c_skip, c_out)
        self.dconv = DepthwiseConv(c_out, kernel)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return nx.silu(self.dconv(self.reduce(torch.cat([x, skip], dim=-3))))


class Decoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        ch = cfg.stage_channels
        K = cfg.num_classes
        # deepest first: 8C -> 4C -> 2C -> C
        self.blocks = nn.ModuleList(DecoderBlock(ch[k + 1], ch[k], ch[k], cfg.dconv_kernel) for k in (2, 1, 0))
        z = cfg.zero_init_heads
        self.aux_heads = nn.ModuleList(ChannelLinear(ch[k], K, zero_init=z) for k in (2, 1, 0)[:cfg.aux_head_count])
        self.subpixel = cfg.head_upsample == "subpixel"
        self.head = ChannelLinear(ch[0], K * 16 if self.subpixel else K, zero_init=z)

    def forward(self, fused_skips, out_size):
        if len(fused_skips) != 4:
            raise ShapeError(f"decoder needs 4 fused skips, got {len(fused_skips)}")
        x = fused_skips[3]
        aux = []
        for i, blk in enumerate(self.blocks):
            x = blk(x, fused_skips[2 - i])
            if i < len(self.aux_heads):
                aux.append(F.interpolate(self.aux_heads[i](x), size=out_size, mode="bilinear", align_corners=False))
        if self.subpixel:
            logits = F.pixel_shuffle(self.head(x), 4)
        else:
            logits = F.interpolate(self.head(x), scale_factor=4, mode="bilinear", align_corners=False)
        return logits, aux


class ARGMamba(nn.Module):
    """Optical + DSM segmentation network.

    ``forward(optical, dsm)`` takes ``(B, 3, H, W)`` and ``(B, 1, H, W)``
    (an unbatched sample is accepted too) with ``H, W`` multiples of 32.
    """

    def __init__(self, cfg=None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        ch = cfg.stage_channels
        self.stem_optical = PatchEmbed(cfg.optical_channels, ch[0])
        self.stem_dsm = PatchEmbed(cfg.dsm_channels, ch[0])
        self.stages = nn.ModuleList(EncoderStage(i, cfg) for i in range(4))
        self.down_optical = nn.ModuleList(Downsample(ch[i], ch[i + 1]) for i in range(3))
        self.down_dsm = nn.ModuleList(Downsample(ch[i], ch[i + 1]) for i in range(3))
        self.decoder = Decoder(cfg)

    def encode(self, optical, dsm):
        F_o, F_e = self.stem_optical(optical), self.stem_dsm(dsm)
        skips = []
        for i, stage in enumerate(self.stages):
            F_o, F_e, F_f = stage(F_o, F_e)
            skips.append(F_f)
            if i < 3:
                F_o, F_e = self.down_optical[i](F_o), self.down_dsm[i](F_e)
        return skips

    def forward(self, optical, dsm):
        unbatched = optical.dim() == 3
        if unbatched:
            optical, dsm = optical.unsqueeze(0), dsm.unsqueeze(0)
        H, W = optical.shape[-2:]
        m = self.cfg.input_multiple
        if H % m or W % m:
            raise ShapeError(f"input {H}x{W} must be divisible by {m}")
        if dsm.shape[-2:] != (H, W):
            raise ShapeError(f"optical {H}x{W} and DSM {tuple(dsm.shape[-2:])} differ")
        skips = self.encode(optical, dsm)
        logits, aux = self.decoder(skips, (H, W))
        if unbatched:
            logits, aux, skips = logits[0], [a[0] for a in aux], [s[0] for s in skips]
        return ForwardOutput(logits, aux, skips)


class AllIgnoredWarning(UserWarning):
    pass


def _ce(logits, labels, ignore_index):
    valid = labels != ignore_index
    logp = torch.log_softmax(logits, dim=-3)
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    picked = logp.gather(-3, safe.unsqueeze(-3)).squeeze(-3)
    return -(picked * valid).sum() / valid.sum()


def segmentation_loss(output, labels, cfg, ignore_index=IGNORE_INDEX):
    """Mean pixelwise cross-entropy on the main head plus weighted aux heads.

    ``labels`` are ``(..., H, W)`` integers in ``[0, K)`` or ``ignore_index``.
    If every pixel is ignored the loss is 0 and :class:`AllIgnoredWarning`
    is emitted.
    """
    labels = labels.long()
    K = output.logits.shape[-3]
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= K))
    if bool(bad.any()):
        raise ConfigError(f"label values outside [0, {K}) and != {ignore_index}")
    if not bool((labels != ignore_index).any()):
        warnings.warn("all pixels carry the ignore index; loss defined as 0", AllIgnoredWarning)
        return output.logits.sum() * 0.0
    loss = _ce(output.logits, labels, ignore_index)
    for a in output.aux_logits:
        loss = loss + cfg.aux_loss_weight * _ce(a, labels, ignore_index)
    return loss


def build_model(cfg=None, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    model = ARGMamba(cfg or ModelConfig())
    return model.to(dtype)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"ARGMCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, model, extra=None):
    """Flat archive: magic, version, header length, JSON header, f32 payloads.

    Every integer field is little-endian; tensors are stored in
    ``named_parameters`` order as little-endian float32.
    """
    entries, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = p.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": "argmamba-checkpoint", "version": CKPT_VERSION,
              "config": model.cfg.to_dict(), "tensors": entries, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def read_checkpoint(path):
    """Returns ``(header, {name: float32 ndarray})``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CKPT_MAGIC:
        raise ParseError("not an argmamba checkpoint (bad magic)", 0)
    if len(data) < 20:
        raise ParseError("truncated checkpoint header", len(data))
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 8)
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise ParseError(f"payload for {e['name']} needs {e['nbytes']} bytes, "
                             f"{max(0, len(data) - start)} available", start)
        arr = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return header, tensors


def load_checkpoint(path, dtype=torch.float32):
    header, tensors = read_checkpoint(path)
    model = ARGMamba(ModelConfig.from_dict(header["config"])).to(dtype)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise ParseError(f"checkpoint/model parameter mismatch: {missing[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(tensors[name]).to(dtype))
    return model, header
