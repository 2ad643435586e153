"""Float64 finite-difference verification suite shared by the CLI and tests."""
from dataclasses import dataclass

import numpy as np
import torch

from . import numerics as nx
from .blocks import ms_ssm_block
from .fusion import ARAL, ARGFM, fus_ssm
from .network import ModelConfig, build_model, segmentation_loss
from .selective_scan import SSMParams, selective_scan
from .scan_geometry import two_way, window_order

F64 = torch.float64
OP_TOL = 1e-6
BLOCK_TOL = 1e-5
NETWORK_TOL = 1e-4
# composites are checked with the five-point stencil at a step above the roundoff floor
BLOCK_EPS = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return bool(self.error < self.tol)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28s} err={self.error:.3e}  tol={self.tol:.0e}"


def _uniform(gen, *shape):
    return (torch.rand(*shape, generator=gen, dtype=F64) * 2 - 1).requires_grad_(True)


def _op_checks(gen):
    def u(*shape):
        return _uniform(gen, *shape)

    cases = {
        "silu": (nx.silu, [u(4, 5)]),
        "softmax": (lambda x: nx.softmax(x, -1), [u(3, 6)]),
        "layer_norm": (nx.layer_norm, [u(4, 6), u(6), u(6)]),
        "linear": (nx.linear, [u(5, 4), u(4, 3), u(3)]),
        "depthwise_conv2d": (nx.depthwise_conv2d, [u(3, 6, 5), u(3, 3, 3), u(3)]),
        "cross_attention": (lambda q, kv, a, b, c: nx.cross_attention(q, kv, a, b, c, heads=2),
                            [u(6, 4), u(6, 4), u(4, 4), u(4, 4), u(4, 4)]),
        "softplus": (nx.softplus, [u(4, 4)]),
    }
    out = []
    for name, (fn, ts) in cases.items():
        out.append(CheckResult(name, nx.finite_difference_check(lambda: fn(*ts), ts), OP_TOL))

    x, dt = u(2, 7, 3), torch.rand(2, 7, 3, generator=gen, dtype=F64).add(0.05).requires_grad_(True)
    A = (-torch.rand(3, 2, generator=gen, dtype=F64) - 0.5).requires_grad_(True)
    B, C, D = u(2, 7, 2), u(2, 7, 2), u(3)
    ts = [x, dt, A, B, C, D]
    out.append(CheckResult("selective_scan",
                           nx.finite_difference_check(lambda: selective_scan(*ts, chunk_size=3), ts), OP_TOL))
    return out


def _module_check(name, module, inputs, fn, tol=BLOCK_TOL):
    tensors = inputs + list(module.parameters())
    return CheckResult(name, nx.finite_difference_check(fn, tensors, eps=BLOCK_EPS, order=4), tol)


def _block_checks(gen):
    from .selective_scan import ss2d

    out = []
    p = nx.randomize_parameters(SSMParams(2, 2).double(), seed=1)
    x = _uniform(gen, 2, 4, 4)
    orders = two_way(window_order(4, 4, 2, "divide"))
    out.append(_module_check("ss2d", p, [x], lambda: ss2d(x, p, orders)))

    blk = nx.randomize_parameters(ms_ssm_block(2, state_dim=2).double(), seed=2)
    x = _uniform(gen, 2, 4, 4)
    out.append(_module_check("ms_ssm_block", blk, [x], lambda: blk(x)))

    aral = nx.randomize_parameters(ARAL().double(), seed=3)
    F_o, F_e = _uniform(gen, 2, 4, 4), _uniform(gen, 2, 4, 4)
    out.append(_module_check("aral", aral, [F_o, F_e], lambda: torch.cat(aral(F_o, F_e), -1)))

    p = nx.randomize_parameters(SSMParams(2, 2).double(), seed=4)
    Xs = [_uniform(gen, 4, 2) for _ in range(4)]
    out.append(_module_check("fus_ssm", p, Xs, lambda: torch.cat(fus_ssm(*Xs, p), -1)))

    m = nx.randomize_parameters(ARGFM(2, 2).double(), seed=5)
    F_o, F_e = _uniform(gen, 2, 4, 4), _uniform(gen, 2, 4, 4)
    out.append(_module_check("argfm", m, [F_o, F_e], lambda: torch.stack(m(F_o, F_e))))
    return out


def network_check(seed=0, samples=20, size=32):
    """Pointwise check of ``samples`` randomly drawn parameters of a micro network."""
    cfg = ModelConfig(base_channels=4, state_dim=2)
    model = nx.randomize_parameters(build_model(cfg, seed=seed, dtype=F64), seed=seed + 1, low=-0.5, high=0.5)
    gen = torch.Generator().manual_seed(seed)
    optical = torch.randn(1, 3, size, size, generator=gen, dtype=F64)
    dsm = torch.randn(1, 1, size, size, generator=gen, dtype=F64)
    labels = torch.randint(0, cfg.num_classes, (1, size, size), generator=gen)
    params = list(model.parameters())
    offsets = np.concatenate([[0], np.cumsum([p.numel() for p in params])])
    picks = np.random.default_rng(seed).choice(offsets[-1], samples, replace=False)
    indices = []
    for f in picks:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        indices.append((i, int(f - offsets[i])))
    errs = nx.pointwise_relative_errors(lambda: segmentation_loss(model(optical, dsm), labels, cfg),
                                        params, indices, eps=BLOCK_EPS, order=4)
    return CheckResult(f"network ({samples} params)", max(errs), NETWORK_TOL)


def run_suite(seed=0, include_network=True):
    gen = torch.Generator().manual_seed(seed)
    results = _op_checks(gen) + _block_checks(gen)
    if include_network:
        results.append(network_check(seed))
    return results
