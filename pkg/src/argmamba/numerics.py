"""Numeric primitives shared by every block.

All ops accept arbitrary leading batch dimensions. Image tensors are
channel-first ``(..., C, H, W)``, token tensors are ``(..., L, C)``.
Gradients come from torch autograd; ``finite_difference_check`` is the
independent oracle used to validate them.
"""

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def silu(x):
    return x * torch.sigmoid(x)


def softmax(x, axis=-1):
    # max-subtracted for stability
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis, then apply the optional affine."""
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    y = xc / torch.sqrt(var + eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def channel_layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """layer_norm over the channel axis of a ``(..., C, H, W)`` map."""
    y = layer_norm(x.movedim(-3, -1), gamma, beta, eps)
    return y.movedim(-1, -3)


def linear(x, W, b=None):
    """``x @ W + b`` on the last axis; ``W`` has shape ``(in, out)``."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input has {x.shape[-1]} features, weight expects {W.shape[0]}")
    y = x @ W
    if b is not None:
        if b.shape[-1] != W.shape[1]:
            raise ShapeError(f"linear: bias length {b.shape[-1]} != {W.shape[1]}")
        y = y + b
    return y


def depthwise_conv2d(x, kernel, bias=None):
    """Per-channel 2-D convolution with zero padding ``(k-1)/2``.

    x: ``(..., C, H, W)``; kernel: ``(C, k, k)``.
    """
    C, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"depthwise_conv2d needs an odd square kernel, got {kh}x{kw}")
    if x.shape[-3] != C:
        raise ShapeError(f"depthwise_conv2d: {x.shape[-3]} channels vs kernel for {C}")
    lead = x.shape[:-3]
    x4 = x.reshape(-1, *x.shape[-3:])
    y = F.conv2d(x4, kernel.unsqueeze(1), bias, padding=kh // 2, groups=C)
    return y.reshape(*lead, *y.shape[-3:])


def cross_attention(query_feats, key_value_feats, Wq, Wk, Wv, heads=1):
    """Scaled dot-product attention, queries from the first argument.

    Feature tensors are ``(..., L, C)``; the projections are ``(C, C)``.
    No output projection is applied here.
    """
    C = query_feats.shape[-1]
    if heads < 1 or C % heads:
        raise ConfigError(f"channels {C} not divisible by heads {heads}")
    if key_value_feats.shape[-1] != C:
        raise ShapeError("cross_attention: channel mismatch between streams")
    dh = C // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, dh).transpose(-2, -3)

    q = split(linear(query_feats, Wq))
    k = split(linear(key_value_feats, Wk))
    v = split(linear(key_value_feats, Wv))
    # fused kernel; same softmax(q k^T / sqrt(dh)) v without keeping the L x L matrix
    out = F.scaled_dot_product_attention(q, k, v).transpose(-2, -3)
    return out.reshape(*out.shape[:-2], C)


def softplus(x):
    return F.softplus(x)


def inverse_softplus(y):
    # log(exp(y) - 1), stable for small y
    return y + torch.log(-torch.expm1(-y))


# ---------------------------------------------------------------------------
# finite-difference oracle


def _central_difference(scalar, flat, j, eps, order):
    # order 2: (f(+h) - f(-h)) / 2h; order 4 adds the +-2h points
    orig = flat[j].item()
    if order == 2:
        offsets, coeffs, denom = (1, -1), (1, -1), 2
    elif order == 4:
        offsets, coeffs, denom = (2, 1, -1, -2), (-1, 8, -8, 1), 12
    else:
        raise ValueError(f"order must be 2 or 4, got {order}")
    total = 0.0
    for k, c in zip(offsets, coeffs):
        flat[j] = orig + k * eps
        total += c * scalar().item()
    flat[j] = orig
    return total / (denom * eps)


def finite_difference_check(fn, tensors, eps=1e-5, indices=None, seed=0, order=2, rel_floor=1e-6):
    """Compare autograd gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and returns a tensor; the scalar probed is
    ``(fn() * w).sum()`` for a fixed random weighting ``w``. ``tensors`` are
    leaf tensors (inputs or parameters) in float64 with ``requires_grad``.
    ``indices`` optionally restricts the check to ``[(tensor_idx, flat_idx)]``.
    ``order=4`` uses the five-point stencil, which lets deep composites use a
    larger step without truncation error.

    Returns the maximum error normalized by the largest gradient magnitude
    seen on each tensor, floored at ``rel_floor`` times the largest overall.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out0 = fn()
    w = torch.rand(out0.shape, generator=gen, dtype=out0.dtype) + 0.5

    def scalar():
        return (fn() * w).sum()

    for t in tensors:
        t.grad = None
    scalar().backward()
    analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                for t in tensors]

    if indices is None:
        indices = [(i, j) for i, t in enumerate(tensors) for j in range(t.numel())]

    worst = 0.0
    per_tensor = {}
    with torch.no_grad():
        for i, j in indices:
            num = _central_difference(scalar, tensors[i].view(-1), j, eps, order)
            per_tensor.setdefault(i, []).append((analytic[i].view(-1)[j].item(), num))
    # tensors whose gradient is structurally zero (e.g. A_log under length-1
    # windows) get a floor tied to the overall gradient scale
    overall = max(max(max(abs(a), abs(n)) for a, n in pairs) for pairs in per_tensor.values())
    floor = max(rel_floor * overall, 1e-12)
    for i, pairs in per_tensor.items():
        scale = max(max(abs(a), abs(n)) for a, n in pairs)
        err = max(abs(a - n) for a, n in pairs)
        worst = max(worst, err / max(scale, floor))
    return worst


def pointwise_relative_errors(fn, tensors, indices, eps=1e-5, floor=1e-6, order=2):
    """Per-entry ``|a - n| / max(|a|, |n|, floor)`` for a scalar ``fn``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    errs = []
    with torch.no_grad():
        for i, j in indices:
            t = tensors[i]
            a = t.grad.view(-1)[j].item() if t.grad is not None else 0.0
            n = _central_difference(fn, t.view(-1), j, eps, order)
            errs.append(abs(a - n) / max(abs(a), abs(n), floor))
    return errs


def randomize_parameters(module, seed=0, low=-1.0, high=1.0):
    """Redraw every parameter uniformly in ``[low, high]`` (gradient checks).

    Zero-initialized projections otherwise block gradient flow and make the
    finite-difference comparison vacuous.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * (high - low) + low)
    return module
