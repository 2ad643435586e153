import numpy as np
import pytest
import torch

from argmamba.errors import ConfigError, ShapeError
from argmamba.scan_geometry import (ScanOrder, from_windows, gather, scatter, to_windows, two_way,
                                    window_order)

SIZES = [8, 16, 32]
SCALES = [1, 2, 4, 8]


def test_global_raster():
    assert window_order(4, 4, 1).perm.tolist() == list(range(16))


def test_two_by_two_windows():
    assert window_order(4, 4, 2).perm.tolist() == [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]


def test_degenerate_windows_identity():
    o = window_order(8, 8, 8)
    assert o.window == (1, 1) and o.num_windows == 64
    assert o.perm.tolist() == list(range(64))


def test_literal_mode_window_size():
    o = window_order(8, 8, 2, mode="literal")
    assert o.window == (2, 2) and o.num_windows == 16
    assert window_order(8, 8, 1, mode="literal").window == (1, 1)
    # literal s equals divide H/s
    assert np.array_equal(window_order(8, 8, 4, "literal").perm, window_order(8, 8, 2, "divide").perm)


def test_indivisible_rejected():
    with pytest.raises(ConfigError):
        window_order(6, 8, 4)
    with pytest.raises(ConfigError):
        window_order(8, 8, 2, mode="zigzag")


@pytest.mark.parametrize("mode", ["divide", "literal"])
@pytest.mark.parametrize("H", SIZES)
@pytest.mark.parametrize("W", SIZES)
@pytest.mark.parametrize("s", SCALES)
def test_orders_are_bijections(H, W, s, mode):
    o = window_order(H, W, s, mode)
    assert np.array_equal(np.sort(o.perm), np.arange(H * W))
    fwd, bwd = two_way(o)
    assert np.array_equal(bwd.perm, fwd.perm[::-1])
    assert bwd.direction == "backward"


@pytest.mark.parametrize("mode", ["divide", "literal"])
@pytest.mark.parametrize("s", SCALES)
def test_window_locality(s, mode):
    H = W = 16
    o = window_order(H, W, s, mode)
    wh, ww = o.window
    rows, cols = np.divmod(o.perm, W)
    for w in range(o.num_windows):
        seg = slice(w * o.window_len, (w + 1) * o.window_len)
        r, c = rows[seg], cols[seg]
        # one window only
        assert len(set(r // wh)) == 1 and len(set(c // ww)) == 1
        # steps along a window row move one pixel
        same_row = r[1:] == r[:-1]
        assert np.all(np.maximum(abs(np.diff(r)), abs(np.diff(c)))[same_row] <= 1)


def test_two_way_examples():
    o = ScanOrder(np.arange(3), 1, 3, 1)
    fwd, bwd = two_way(o)
    assert fwd.perm.tolist() == [0, 1, 2] and bwd.perm.tolist() == [2, 1, 0]
    back_again = two_way(bwd)[1]
    assert back_again.perm.tolist() == [0, 1, 2] and back_again.direction == "forward"
    L = 16
    f, b = two_way(window_order(4, 4, 2))
    assert all(f.perm[i] == b.perm[L - 1 - i] for i in range(L))


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64, torch.int64])
@pytest.mark.parametrize("mode", ["divide", "literal"])
@pytest.mark.parametrize("s", SCALES)
def test_gather_scatter_roundtrip(s, mode, dtype):
    x = (torch.randn(2, 3, 16, 8) * 100).to(dtype)
    o = window_order(16, 8, s, mode)
    seq = gather(x, o)
    assert seq.shape == (2, 128, 3)
    assert torch.equal(scatter(seq, o), x)
    assert torch.equal(gather(scatter(seq, o), o), seq)


def test_gather_identity_is_flatten():
    x = torch.randn(3, 4, 5)
    o = window_order(4, 5, 1)
    assert torch.equal(gather(x, o), x.reshape(3, 20).T)


def test_gather_reversed():
    x = torch.arange(4.0).reshape(1, 2, 2)
    o = ScanOrder(np.array([3, 2, 1, 0]), 2, 2, 1)
    assert gather(x, o)[:, 0].tolist() == [3.0, 2.0, 1.0, 0.0]


def test_gather_shape_mismatch():
    with pytest.raises(ShapeError):
        gather(torch.zeros(1, 4, 4), window_order(8, 8, 1))
    with pytest.raises(ShapeError):
        scatter(torch.zeros(10, 1), window_order(4, 4, 1))


def test_windows_reshape():
    o = window_order(8, 8, 2)
    seq = gather(torch.randn(3, 8, 8), o)
    w = to_windows(seq, o)
    assert w.shape == (4, 16, 3)
    assert torch.equal(from_windows(w), seq)
