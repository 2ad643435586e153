"""Windowed scan orders and the gather/scatter maps between grids and sequences.

Two window readings are supported:

``divide``
    the map is cut into an ``s x s`` grid of windows, each ``(H/s) x (W/s)``;
    ``s=1`` is one global raster scan and larger ``s`` is more local.
``literal``
    windows are ``s x s`` pixels, ``(H/s) * (W/s)`` of them; ``s=1`` degenerates
    to one-pixel scans.

Windows are visited in row-major grid order and pixels row-major inside each
window, so every window occupies a contiguous run of the sequence.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .errors import ConfigError, ShapeError

WINDOW_MODES = ("divide", "literal")


@dataclass(frozen=True, eq=False)
class ScanOrder:
    perm: np.ndarray        # flat source index for each sequence position
    H: int
    W: int
    scale: int
    direction: str = "forward"
    window: tuple = None    # (wh, ww); windows are contiguous runs of wh*ww
    mode: str = "divide"

    def __post_init__(self):
        if self.window is None:
            object.__setattr__(self, "window", (self.H, self.W))

    @property
    def length(self):
        return self.H * self.W

    @property
    def window_len(self):
        return self.window[0] * self.window[1]

    @property
    def num_windows(self):
        return self.length // self.window_len

    @property
    def inverse(self):
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv

    def is_bijection(self):
        return self.perm.size == self.length and np.array_equal(np.sort(self.perm), np.arange(self.length))


def window_shape(H, W, s, mode="divide"):
    if mode not in WINDOW_MODES:
        raise ConfigError(f"unknown window_mode {mode!r}")
    if s < 1 or H % s or W % s:
        raise ConfigError(f"{H}x{W} map is not divisible by scale {s}; pad first")
    if mode == "divide":
        return H // s, W // s
    return s, s


@lru_cache(maxsize=None)
def _window_perm(H, W, wh, ww):
    idx = np.arange(H * W).reshape(H // wh, wh, W // ww, ww)
    # (grid row, grid col, in-window row, in-window col)
    perm = idx.transpose(0, 2, 1, 3).reshape(-1)
    perm.setflags(write=False)
    return perm


def window_order(H, W, s, mode="divide"):
    wh, ww = window_shape(H, W, s, mode)
    return ScanOrder(_window_perm(H, W, wh, ww), H, W, s, "forward", (wh, ww), mode)


def reverse_order(order):
    flipped = "backward" if order.direction == "forward" else "forward"
    perm = order.perm[::-1].copy()
    perm.setflags(write=False)
    return ScanOrder(perm, order.H, order.W, order.scale, flipped, order.window, order.mode)


def two_way(order):
    """Return ``(order, reversed order)``."""
    return order, reverse_order(order)


def _check(x_len, order):
    if x_len != order.length:
        raise ShapeError(f"sequence length {x_len} does not match order over {order.H}x{order.W}")


_INDEX_CACHE = {}


def _index(perm, device):
    key = (perm.tobytes(), str(device))
    idx = _INDEX_CACHE.get(key)
    if idx is None:
        idx = torch.tensor(perm, dtype=torch.long, device=device)
        if len(_INDEX_CACHE) < 4096:
            _INDEX_CACHE[key] = idx
    return idx


def gather(x, order):
    """``(..., C, H, W)`` -> ``(..., L, C)`` following ``order.perm``."""
    if x.shape[-2:] != (order.H, order.W):
        raise ShapeError(f"map {tuple(x.shape[-2:])} vs order {(order.H, order.W)}")
    flat = x.flatten(-2)
    return flat[..., _index(order.perm, x.device)].transpose(-1, -2)


def scatter(y, order):
    """Inverse of :func:`gather`: ``(..., L, C)`` -> ``(..., C, H, W)``."""
    _check(y.shape[-2], order)
    flat = y.transpose(-1, -2)[..., _index(order.inverse, y.device)]
    return flat.reshape(*flat.shape[:-1], order.H, order.W)


def to_windows(seq, order):
    """Split ``(..., L, C)`` into ``(..., n_windows, window_len, C)``."""
    _check(seq.shape[-2], order)
    return seq.reshape(*seq.shape[:-2], order.num_windows, order.window_len, seq.shape[-1])


def from_windows(seq):
    return seq.reshape(*seq.shape[:-3], seq.shape[-3] * seq.shape[-2], seq.shape[-1])
