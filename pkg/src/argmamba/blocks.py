"""Visual state-space block and its multi-scale variant."""
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .scan_geometry import two_way, window_order
from .selective_scan import SSMParams, ss2d


def equal_split(C, n):
    """Split ``C`` channels into ``n`` near-equal parts, remainder to the first."""
    if n < 1 or C < n:
        raise ConfigError(f"cannot split {C} channels into {n} groups")
    base, rem = divmod(C, n)
    return [base + (i < rem) for i in range(n)]


def channel_split(x, splits):
    if sum(splits) != x.shape[-3]:
        raise ConfigError(f"splits {splits} do not sum to {x.shape[-3]} channels")
    return list(torch.split(x, list(splits), dim=-3))


@dataclass
class MsSsmConfig:
    scales: list = field(default_factory=lambda: [1, 2, 4, 8])
    channel_split: list = None
    dconv_kernel: int = 3
    direction_reduce: str = "sum"
    window_mode: str = "divide"

    def splits_for(self, C):
        if self.channel_split is None:
            return equal_split(C, len(self.scales))
        if len(self.channel_split) != len(self.scales):
            raise ConfigError("channel_split and scales differ in length")
        if any(c < 1 for c in self.channel_split) or sum(self.channel_split) != C:
            raise ConfigError(f"channel_split {self.channel_split} must be positive and sum to {C}")
        return list(self.channel_split)


class Linear(nn.Module):
    """Pointwise projection with weight stored ``(in, out)``."""

    def __init__(self, d_in, d_out, bias=True, zero_init=False):
        super().__init__()
        w = torch.zeros(d_in, d_out) if zero_init else torch.empty(d_in, d_out).uniform_(-1, 1) / d_in ** 0.5
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return nx.linear(x, self.weight, self.bias)


class ChannelLinear(Linear):
    """:class:`Linear` applied over the channel axis of ``(..., C, H, W)``."""

    def forward(self, x):
        return super().forward(x.movedim(-3, -1)).movedim(-1, -3)


class LayerNorm(nn.Module):
    def __init__(self, d, eps=1e-5, channel_axis=False):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps
        self.channel_axis = channel_axis

    def forward(self, x):
        if self.channel_axis:
            return nx.channel_layer_norm(x, self.weight, self.bias, self.eps)
        return nx.layer_norm(x, self.weight, self.bias, self.eps)


class DepthwiseConv(nn.Module):
    def __init__(self, channels, kernel_size=3, bias=True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel_size}")
        bound = 1.0 / kernel_size
        self.weight = nn.Parameter(torch.empty(channels, kernel_size, kernel_size).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(channels)) if bias else None

    def forward(self, x):
        return nx.depthwise_conv2d(x, self.weight, self.bias)


def _pad_to(x, s):
    H, W = x.shape[-2:]
    ph, pw = (-H) % s, (-W) % s
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


class SS2D(nn.Module):
    """Two-way scan at a single scale with one set of SSM parameters."""

    def __init__(self, channels, state_dim=8, scale=1, window_mode="divide",
                 direction_reduce="sum", pad=True, chunk_size=64):
        super().__init__()
        self.scale = scale
        self.window_mode = window_mode
        self.direction_reduce = direction_reduce
        self.pad = pad
        self.ssm = SSMParams(channels, state_dim, chunk_size=chunk_size)

    def forward(self, x, kernel=None):
        H, W = x.shape[-2:]
        if self.pad:
            # maps smaller than or not divisible by the scale are zero-padded
            x = _pad_to(x, self.scale)
        order = window_order(x.shape[-2], x.shape[-1], self.scale, self.window_mode)
        y = ss2d(x, self.ssm, two_way(order), self.direction_reduce, kernel=kernel)
        return y[..., :H, :W]


class MultiScaleSS2D(nn.Module):
    """Channel-split multi-scale scan followed by a linear merge and DConv."""

    def __init__(self, channels, cfg=None, state_dim=8, pad=True, chunk_size=64):
        super().__init__()
        cfg = cfg or MsSsmConfig()
        self.cfg = cfg
        self.splits = cfg.splits_for(channels)
        self.branches = nn.ModuleList(
            SS2D(c, state_dim, s, cfg.window_mode, cfg.direction_reduce, pad, chunk_size)
            for c, s in zip(self.splits, cfg.scales)
        )
        self.proj = ChannelLinear(channels, channels)
        self.dconv = DepthwiseConv(channels, cfg.dconv_kernel)

    def scan(self, x, kernel=None):
        """Concatenated per-scale scans, before the merge."""
        parts = channel_split(x, self.splits)
        return torch.cat([b(p, kernel=kernel) for b, p in zip(self.branches, parts)], dim=-3)

    def forward(self, x, kernel=None):
        return self.dconv(self.proj(self.scan(x, kernel=kernel)))


class StateSpaceBlock(nn.Module):
    """Pre-norm gated residual block hosting a 2-D scan mixer.

    ``x + out_proj(LN(mixer(silu(dconv(in_proj(LN x))))) * silu(gate(LN x)))``
    """

    def __init__(self, channels, mixer, expand=2, dconv_kernel=3, zero_init=True):
        super().__init__()
        inner = mixer_channels(channels, expand)
        self.norm = LayerNorm(channels, channel_axis=True)
        self.in_proj = ChannelLinear(channels, inner)
        self.gate_proj = ChannelLinear(channels, inner)
        self.dconv = DepthwiseConv(inner, dconv_kernel)
        self.mixer = mixer
        self.out_norm = LayerNorm(inner, channel_axis=True)
        self.out_proj = ChannelLinear(inner, channels, zero_init=zero_init)

    def forward(self, x):
        if x.dim() < 3:
            raise ShapeError("block input must be (..., C, H, W)")
        u = self.norm(x)
        main = nx.silu(self.dconv(self.in_proj(u)))
        main = self.out_norm(self.mixer(main))
        gate = nx.silu(self.gate_proj(u))
        return x + self.out_proj(main * gate)


def mixer_channels(channels, expand):
    return int(channels * expand)


def vssb(channels, state_dim=8, expand=2, window_mode="divide", direction_reduce="sum", chunk_size=64):
    inner = mixer_channels(channels, expand)
    mixer = SS2D(inner, state_dim, 1, window_mode, direction_reduce, chunk_size=chunk_size)
    return StateSpaceBlock(channels, mixer, expand)


def ms_ssm_block(channels, cfg=None, state_dim=8, expand=2, chunk_size=64):
    cfg = cfg or MsSsmConfig()
    inner = mixer_channels(channels, expand)
    mixer = MultiScaleSS2D(inner, cfg, state_dim, chunk_size=chunk_size)
    return StateSpaceBlock(channels, mixer, expand, cfg.dconv_kernel)
