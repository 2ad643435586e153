"""Axial-relation cross-modal fusion between the optical and elevation streams."""
import torch
from torch import nn

from . import numerics as nx
from .blocks import LayerNorm, Linear
from .errors import ConfigError, ResourceError, ShapeError
from .selective_scan import SSMParams


def to_tokens(F_map):
    """``(..., C, H, W)`` -> row-major tokens ``(..., HW, C)``."""
    return F_map.flatten(-2).transpose(-1, -2)


def to_map(X, H, W):
    return X.transpose(-1, -2).reshape(*X.shape[:-2], X.shape[-1], H, W)


def relation_matrix(X_o, X_e, chunk_rows=128):
    """Dense relations ``R[i, j] = <X_o[i], X_e[j]>``, built in row chunks."""
    if X_o.shape != X_e.shape:
        raise ShapeError(f"relation_matrix: {tuple(X_o.shape)} vs {tuple(X_e.shape)}")
    Xe_t = X_e.transpose(-1, -2)
    n = X_o.shape[-2]
    return torch.cat([X_o[..., a:a + chunk_rows, :] @ Xe_t for a in range(0, n, chunk_rows)], dim=-2)


def _conv_along(R, kernel, axis):
    """Zero-padded 1-D convolution of ``R`` along ``axis`` (-1 or -2)."""
    k = kernel.shape[0]
    p = k // 2
    n = R.shape[axis]
    if axis == -1:
        Rp = nn.functional.pad(R, (p, p))
        return sum(kernel[t] * Rp[..., :, t:t + n] for t in range(k))
    Rp = nn.functional.pad(R, (0, 0, p, p))
    return sum(kernel[t] * Rp[..., t:t + n, :] for t in range(k))


def axial_means(X_o, X_e, row_kernel, col_kernel, chunk_rows=128):
    """Row and column means of the axially convolved relation matrix.

    Returns ``(row, col)``, each ``(..., HW)``. ``R`` is formed explicitly but
    one row chunk (plus a halo for the column kernel) at a time.
    """
    if X_o.shape != X_e.shape:
        raise ShapeError(f"axial_means: {tuple(X_o.shape)} vs {tuple(X_e.shape)}")
    for kern in (row_kernel, col_kernel):
        if kern.shape[0] % 2 == 0:
            raise ConfigError(f"axial kernel must be odd, got {kern.shape[0]}")
    n = X_o.shape[-2]
    p = col_kernel.shape[0] // 2
    Xo_pad = nn.functional.pad(X_o, (0, 0, p, p))
    Xe_t = X_e.transpose(-1, -2)
    rows, col_sum = [], 0
    for a in range(0, n, chunk_rows):
        m = min(chunk_rows, n - a)
        Rc = Xo_pad[..., a:a + m + 2 * p, :] @ Xe_t              # rows a-p .. a+m+p
        rows.append(_shifted_sums(Rc[..., p:p + m, :], row_kernel) / n)
        # column kernel: slice t:t+m of the chunk is everything minus the halo ends
        total = Rc.sum(-2)
        for t in range(col_kernel.shape[0]):
            part = total
            if t > 0:
                part = part - Rc[..., :t, :].sum(-2)
            if t < 2 * p:
                part = part - Rc[..., t + m:, :].sum(-2)
            col_sum = col_sum + col_kernel[t] * part
    return torch.cat(rows, dim=-1), col_sum / n


def _shifted_sums(R, kernel):
    """``_conv_along(R, kernel, -1).sum(-1)`` without forming the convolution.

    A shift by ``d`` drops ``|d|`` entries at one end of each row.
    """
    k = kernel.shape[0]
    p = k // 2
    total = R.sum(-1)
    out = 0
    for t in range(k):
        d = t - p
        if d > 0:
            part = total - R[..., :d].sum(-1)
        elif d < 0:
            part = total - R[..., d:].sum(-1)
        else:
            part = total
        out = out + kernel[t] * part
    return out


def axial_reduce(R, axis, kernel, fc_weight, fc_bias):
    """Reduce a materialized ``R`` along one axis into softmax weights.

    ``axis='row'`` convolves along each row and averages it (-> ``HW x 1``);
    ``axis='col'`` does the same down each column (-> ``1 x HW``). A scalar
    affine map and a softmax over positions follow.
    """
    if kernel.shape[0] % 2 == 0:
        raise ConfigError(f"axial kernel must be odd, got {kernel.shape[0]}")
    if axis == "row":
        v = _conv_along(R, kernel, -1).mean(-1)
        return nx.softmax(v * fc_weight + fc_bias, axis=-1).unsqueeze(-1)
    if axis == "col":
        v = _conv_along(R, kernel, -2).mean(-2)
        return nx.softmax(v * fc_weight + fc_bias, axis=-1).unsqueeze(-2)
    raise ConfigError(f"axis must be 'row' or 'col', got {axis!r}")


def identity_kernel(k):
    w = torch.zeros(k)
    w[k // 2] = 1.0
    return w


class ARAL(nn.Module):
    """Relation-aware gating of the optical and elevation tokens."""

    def __init__(self, kernel_size=3, chunk_rows=128, max_tokens=16384):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"axial kernel must be odd, got {kernel_size}")
        self.row_kernel = nn.Parameter(identity_kernel(kernel_size))
        self.col_kernel = nn.Parameter(identity_kernel(kernel_size))
        # scalar affine maps on the reduced vectors
        self.row_fc = nn.Parameter(torch.tensor([1.0, 0.0]))
        self.col_fc = nn.Parameter(torch.tensor([1.0, 0.0]))
        self.chunk_rows = chunk_rows
        self.max_tokens = max_tokens

    def weights(self, X_o, X_e):
        """``(V_e, V_o)``, each ``(..., HW)`` and summing to one."""
        n = X_o.shape[-2]
        if n > self.max_tokens:
            raise ResourceError(
                f"relation matrix over {n} tokens exceeds the limit of {self.max_tokens} "
                f"(HW must be <= {self.max_tokens})")
        row, col = axial_means(X_o, X_e, self.row_kernel, self.col_kernel, self.chunk_rows)
        V_e = nx.softmax(row * self.row_fc[0] + self.row_fc[1], axis=-1)
        V_o = nx.softmax(col * self.col_fc[0] + self.col_fc[1], axis=-1)
        return V_e, V_o

    def forward(self, F_o, F_e):
        if F_o.shape != F_e.shape:
            raise ShapeError(f"ARAL: {tuple(F_o.shape)} vs {tuple(F_e.shape)}")
        X_o, X_e = to_tokens(F_o), to_tokens(F_e)
        n = X_o.shape[-2]
        V_e, V_o = self.weights(X_o, X_e)
        # row-derived weights gate elevation, column-derived gate optical
        Xp_e = (n * V_e).unsqueeze(-1) * X_e
        Xp_o = (n * V_o).unsqueeze(-1) * X_o
        return Xp_o, Xp_e


def cross_concat(Xt_o, Xt_e, Xp_o, Xp_e):
    """Joint sequence ``[X~_o | X'_e | X~_e | X'_o]`` along the token axis."""
    shapes = {tuple(t.shape) for t in (Xt_o, Xt_e, Xp_o, Xp_e)}
    if len(shapes) != 1:
        raise ShapeError(f"fus_ssm inputs differ in shape: {sorted(shapes)}")
    return torch.cat([Xt_o, Xp_e, Xt_e, Xp_o], dim=-2)


def fus_ssm(Xt_o, Xt_e, Xp_o, Xp_e, params, kernel=None):
    """Two-way selective scan over the cross-concatenated four streams."""
    seq = cross_concat(Xt_o, Xt_e, Xp_o, Xp_e)
    both = params(torch.stack([seq, seq.flip(-2)]), kernel=kernel)
    y = both[0] + both[1].flip(-2)
    s_to, s_pe, s_te, s_po = torch.chunk(y, 4, dim=-2)
    return s_to + s_po, s_te + s_pe


class FFN(nn.Module):
    def __init__(self, channels, hidden_ratio=2, zero_init=True):
        super().__init__()
        hidden = channels * hidden_ratio
        self.fc1 = Linear(channels, hidden)
        self.fc2 = Linear(hidden, channels, zero_init=zero_init)

    def forward(self, x):
        return self.fc2(nx.silu(self.fc1(x)))


class CrossAttention(nn.Module):
    def __init__(self, channels, heads=1):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        b = channels ** -0.5
        self.Wq = nn.Parameter(torch.empty(channels, channels).uniform_(-b, b))
        self.Wk = nn.Parameter(torch.empty(channels, channels).uniform_(-b, b))
        self.Wv = nn.Parameter(torch.empty(channels, channels).uniform_(-b, b))

    def forward(self, q_feats, kv_feats):
        return nx.cross_attention(q_feats, kv_feats, self.Wq, self.Wk, self.Wv, self.heads)


class ARGFM(nn.Module):
    """Fuses a pair of same-shaped optical/elevation maps.

    Returns ``(F'_o, F'_e, F_f)``: the two refined streams for the next
    encoder stage and the fused map for the decoder.
    """

    def __init__(self, channels, state_dim=8, kernel_size=3, heads=1, use_aral=True,
                 max_tokens=16384, chunk_rows=128, zero_init=True, chunk_size=64, attn_residual=False):
        super().__init__()
        self.use_aral = use_aral
        self.attn_residual = attn_residual
        self.embed_o = nn.ModuleDict({"proj": Linear(channels, channels), "norm": LayerNorm(channels)})
        self.embed_e = nn.ModuleDict({"proj": Linear(channels, channels), "norm": LayerNorm(channels)})
        self.aral = ARAL(kernel_size, chunk_rows, max_tokens) if use_aral else None
        self.max_tokens = max_tokens
        self.ssm = SSMParams(channels, state_dim, chunk_size=chunk_size)
        self.post = nn.ModuleDict({
            m: nn.ModuleDict({"proj": Linear(channels, channels), "norm": LayerNorm(channels),
                              "ffn": FFN(channels, zero_init=zero_init)})
            for m in ("o", "e")
        })
        self.cross_attn = CrossAttention(channels, heads)
        self.fuse_fc = Linear(channels, channels)

    def _refine(self, F_map, Z, m):
        p = self.post[m]
        H, W = F_map.shape[-2:]
        return F_map + to_map(p["ffn"](p["norm"](p["proj"](Z))), H, W)

    def forward(self, F_o, F_e, kernel=None):
        if F_o.shape != F_e.shape:
            raise ShapeError(f"ARGFM: {tuple(F_o.shape)} vs {tuple(F_e.shape)}")
        H, W = F_o.shape[-2:]
        if H * W > self.max_tokens:
            raise ResourceError(f"ARGFM over {H * W} tokens exceeds the limit of {self.max_tokens} (HW <= {self.max_tokens})")
        Xt_o = self.embed_o["norm"](self.embed_o["proj"](to_tokens(F_o)))
        Xt_e = self.embed_e["norm"](self.embed_e["proj"](to_tokens(F_e)))
        if self.aral is not None:
            Xp_o, Xp_e = self.aral(F_o, F_e)
        else:
            Xp_o, Xp_e = Xt_o, Xt_e
        Z_o, Z_e = fus_ssm(Xt_o, Xt_e, Xp_o, Xp_e, self.ssm, kernel=kernel)
        Fo2 = self._refine(F_o, Z_o, "o")
        Fe2 = self._refine(F_e, Z_e, "e")
        q = to_tokens(Fo2)
        att = self.cross_attn(q, to_tokens(Fe2))
        fused = self.fuse_fc(q + att if self.attn_residual else att)
        return Fo2, Fe2, to_map(fused, H, W)
