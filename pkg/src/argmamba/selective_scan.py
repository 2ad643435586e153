"""Selective state-space scan (S6) and its two-way 2-D wrapper.

Recurrence per channel ``c`` and state ``s``::

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t * B_t) * x_t
    y_t = <C_t, h_t> + D * x_t

``scan_sequential`` is the step-by-step reference; ``selective_scan`` computes
the same thing chunk-parallel and is what the model uses.
"""
import math

import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigError, DomainError
from .scan_geometry import from_windows, gather, scatter, to_windows


def discretize(delta, A, B):
    """Zero-order hold for ``A``, simplified Euler for ``B``.

    delta ``(..., L, C)``, A ``(C, S)``, B ``(..., L, S)``;
    returns ``Abar, Bbar`` of shape ``(..., L, C, S)``.
    """
    if bool((delta <= 0).any()):
        raise DomainError("discretize requires delta > 0")
    d = delta.unsqueeze(-1)
    return torch.exp(d * A), d * B.unsqueeze(-2)


def scan_sequential(x, delta, A, B, C, D):
    """Reference recurrence, one token at a time.

    x, delta: ``(..., L, Ch)``; A: ``(Ch, S)``; B, C: ``(..., L, S)``; D: ``(Ch,)``.
    """
    Abar, Bbar = discretize(delta, A, B)
    h = x.new_zeros(*x.shape[:-2], A.shape[0], A.shape[1])
    ys = []
    for t in range(x.shape[-2]):
        h = Abar[..., t, :, :] * h + Bbar[..., t, :, :] * x[..., t, :, None]
        ys.append((h * C[..., t, None, :]).sum(-1))
    y = torch.stack(ys, dim=-2)
    return y + D * x


# largest |sum of delta*A| allowed inside one chunk before exp() could overflow
_EXP_RANGE = {torch.float16: 8.0, torch.bfloat16: 60.0, torch.float32: 60.0, torch.float64: 600.0}


def selective_scan(x, delta, A, B, C, D, chunk_size=64):
    """Chunked scan with the same semantics as :func:`scan_sequential`.

    Within a chunk, with ``cs_t`` the running sum of ``delta * A``::

        h_t = exp(cs_t) * sum_{k<=t} exp(-cs_k) * delta_k B_k x_k  (+ carried state)

    (computed relative to the chunk's first step).

    so each chunk is a handful of elementwise ops and one cumsum. The chunk
    length is capped so that ``|cs|`` stays inside the exp range of the dtype;
    chunk-start states are carried sequentially. Cost is ``O(L Ch S)``.
    """
    if bool((delta <= 0).any()):
        raise DomainError("selective_scan requires delta > 0")
    lead = x.shape[:-2]
    L, Ch = x.shape[-2:]
    S = A.shape[-1]
    if L == 0:
        return x.clone()
    step = float(delta.detach().max()) * float(A.detach().abs().max())
    budget = _EXP_RANGE.get(x.dtype, 60.0)
    T = max(1, min(chunk_size, L, int(budget // step) if step > 0 else L))
    n = -(-L // T)
    pad = n * T - L

    dA = delta.unsqueeze(-1) * A                                # (..., L, Ch, S)
    # same association as the reference: (delta * B) * x
    Bx = (delta.unsqueeze(-1) * B.unsqueeze(-2)) * x.unsqueeze(-1)
    Cm = C
    if pad:
        # padded steps: no decay, no input, output discarded
        dA = torch.nn.functional.pad(dA, (0, 0, 0, 0, 0, pad))
        Bx = torch.nn.functional.pad(Bx, (0, 0, 0, 0, 0, pad))
        Cm = torch.nn.functional.pad(C, (0, 0, 0, pad))
    dA = dA.reshape(*lead, n, T, Ch, S)
    Bx = Bx.reshape(*lead, n, T, Ch, S)
    Cm = Cm.reshape(*lead, n, T, S)

    cs = dA.cumsum(dim=-3)                                      # <= 0, >= -budget
    # referenced to the chunk's first step so that t=0 carries no exp round trip
    rel = cs - cs[..., :1, :, :]
    h_intra = torch.exp(rel) * (torch.exp(-rel) * Bx).cumsum(dim=-3)

    if n > 1:
        grow = torch.exp(cs)
        chunk_decay = grow[..., -1, :, :]                       # (..., n, Ch, S)
        h_end = h_intra[..., -1, :, :]
        starts = [torch.zeros_like(h_end[..., 0, :, :])]
        for j in range(n - 1):
            starts.append(chunk_decay[..., j, :, :] * starts[-1] + h_end[..., j, :, :])
        h0 = torch.stack(starts, dim=-3)
        h_all = h_intra + grow * h0.unsqueeze(-3)
    else:
        h_all = h_intra
    y = (h_all * Cm.unsqueeze(-2)).sum(-1)                      # (..., n, T, Ch)
    y = y.reshape(*lead, n * T, Ch)[..., :L, :]
    return y + D * x


class SSMParams(nn.Module):
    """Input-dependent projections and state parameters of one selective SSM.

    ``A`` is stored as ``log(-A)`` so it stays strictly negative.
    """

    def __init__(self, channels, state_dim=8, dt_min=1e-3, dt_max=1e-1, chunk_size=64):
        super().__init__()
        self.channels = channels
        self.state_dim = state_dim
        self.chunk_size = chunk_size
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state_dim + 1, dtype=torch.float32)).repeat(channels, 1))
        self.D = nn.Parameter(torch.ones(channels))
        bound = 1.0 / math.sqrt(channels)
        self.W_delta = nn.Parameter(torch.empty(channels, channels).uniform_(-bound, bound) * 0.1)
        self.W_B = nn.Parameter(torch.empty(channels, state_dim).uniform_(-bound, bound))
        self.W_C = nn.Parameter(torch.empty(channels, state_dim).uniform_(-bound, bound))
        dt = torch.exp(torch.rand(channels) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.delta_bias = nn.Parameter(nx.inverse_softplus(dt))

    @property
    def A(self):
        return -torch.exp(self.A_log)

    def project(self, x):
        """Per-token ``(delta, B, C)`` from tokens ``(..., L, channels)``."""
        delta = nx.softplus(nx.linear(x, self.W_delta, self.delta_bias))
        return delta, nx.linear(x, self.W_B), nx.linear(x, self.W_C)

    def forward(self, x, kernel=None):
        delta, B, C = self.project(x)
        if kernel is None:
            return selective_scan(x, delta, self.A, B, C, self.D, self.chunk_size)
        return kernel(x, delta, self.A, B, C, self.D)


def scan_tokens(x, params, kernel=None):
    """Run ``params`` over token sequences ``(..., L, C)``."""
    return params(x, kernel=kernel)


def ss2d(x, params, order_pair, direction_reduce="sum", kernel=None):
    """Two-way windowed scan of a ``(..., C, H, W)`` map.

    Both orders are gathered, scanned independently per window with shared
    ``params``, scattered back and combined.
    """
    fwd, bwd = order_pair
    if fwd.length != bwd.length or not (fwd.is_bijection() and bwd.is_bijection()):
        raise AssertionError("ss2d needs bijective scan orders of equal length")
    if direction_reduce not in ("sum", "mean"):
        raise ConfigError(f"direction_reduce must be 'sum' or 'mean', got {direction_reduce!r}")
    seqs = torch.stack([to_windows(gather(x, fwd), fwd), to_windows(gather(x, bwd), bwd)])
    out = params(seqs, kernel=kernel)
    y = scatter(from_windows(out[0]), fwd) + scatter(from_windows(out[1]), bwd)
    if direction_reduce == "mean":
        y = y / 2
    return y
