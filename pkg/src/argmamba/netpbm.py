"""Binary/ASCII netpbm reader and binary writer (PPM P6, PGM P5; P3/P2 on read)."""
import numpy as np

from .errors import ParseError

_WS = b" \t\r\n\v\f"


def _tokens(data, count, pos):
    """Read ``count`` header integers starting at ``pos``; skips ``#`` comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        tok = data[start:pos]
        if not tok:
            raise ParseError("unexpected end of header", start)
        if not tok.isdigit():
            raise ParseError(f"expected an integer header field, got {tok[:16]!r}", start)
        out.append(int(tok))
    return out, pos


def read_netpbm(source):
    """Parse a P2/P3/P5/P6 image from bytes or a path.

    Returns ``(array, maxval)``; the array is ``(H, W)`` for graymaps and
    ``(H, W, 3)`` for pixmaps, dtype uint8 or uint16 depending on ``maxval``.
    """
    data = source if isinstance(source, (bytes, bytearray)) else open(source, "rb").read()
    magic = bytes(data[:2])
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ParseError(f"bad magic {magic!r}, expected P2/P3/P5/P6", 0)
    channels = 3 if magic in (b"P3", b"P6") else 1
    (W, H, maxval), pos = _tokens(data, 3, 2)
    if W <= 0 or H <= 0:
        raise ParseError(f"non-positive dimensions {W}x{H}", 2)
    if not 0 < maxval < 65536:
        raise ParseError(f"maxval {maxval} outside 1..65535", pos)
    dtype = np.uint8 if maxval < 256 else np.uint16
    count = W * H * channels
    if magic in (b"P5", b"P6"):
        if pos >= len(data) or data[pos] not in _WS:
            raise ParseError("missing whitespace after header", pos)
        pos += 1
        width = 1 if maxval < 256 else 2
        need = count * width
        have = len(data) - pos
        if have < need:
            raise ParseError(f"truncated payload: expected {need} bytes, got {have}", pos)
        arr = np.frombuffer(data, dtype=">u2" if width == 2 else np.uint8, count=count, offset=pos)
        arr = arr.astype(dtype)
    else:
        vals, _ = _tokens(data, count, pos)
        arr = np.asarray(vals, dtype=np.int64)
        if arr.max(initial=0) > maxval:
            raise ParseError(f"sample exceeds maxval {maxval}", pos)
        arr = arr.astype(dtype)
    shape = (H, W, 3) if channels == 3 else (H, W)
    return arr.reshape(shape), maxval


def write_ppm(path, rgb):
    """Binary PPM (P6), 8-bit. ``rgb`` is ``(H, W, 3)`` uint8."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("write_ppm needs an (H, W, 3) uint8 array")
    H, W, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (W, H))
        f.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm(path, gray):
    """Binary PGM (P5); uint8 -> maxval 255, uint16 -> maxval 65535 big-endian."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype not in (np.uint8, np.uint16):
        raise ValueError("write_pgm needs an (H, W) uint8 or uint16 array")
    H, W = gray.shape
    maxval = 255 if gray.dtype == np.uint8 else 65535
    payload = gray.astype(">u2").tobytes() if maxval == 65535 else np.ascontiguousarray(gray).tobytes()
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n%d\n" % (W, H, maxval))
        f.write(payload)
