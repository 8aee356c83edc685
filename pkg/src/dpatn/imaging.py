"""Dense grids, convolution with reflective borders, DCT filter atoms and image I/O.

Scalar fields are 2-D float64 arrays (H, W); RGB images are (H, W, 3) float64
arrays with values in [0, 1].
"""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

__all__ = [
    "ImageIOError",
    "UnsupportedFormatError",
    "TruncatedFileError",
    "as_field",
    "as_image",
    "conv2d_same",
    "conv2d_adjoint",
    "conv_bank",
    "conv_sum",
    "kernel_gradient",
    "rot180",
    "dct_atoms",
    "zigzag_order",
    "min_filter",
    "load_image",
    "save_image",
]


class ImageIOError(OSError):
    """Reading or writing an image file failed."""


class UnsupportedFormatError(ImageIOError):
    pass


class TruncatedFileError(ImageIOError):
    pass


def as_field(f, name="field"):
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} contains non-finite values")
    return f


def as_image(img, name="image"):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img


def _check_kernel(k):
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got shape {k.shape}")
    return k


def _check_fits(shape, n):
    if n > shape[0] or n > shape[1]:
        raise ValueError(f"kernel of size {n} is larger than field of shape {shape}")


def conv2d_same(f, k):
    """True 2-D convolution of ``f`` with ``k``, symmetric padding, same-size output."""
    f = np.asarray(f, dtype=np.float64)
    k = _check_kernel(k)
    _check_fits(f.shape, k.shape[0])
    # filter2D correlates; flipping the kernel turns it into convolution
    return cv2.filter2D(f, cv2.CV_64F, np.ascontiguousarray(k[::-1, ::-1]),
                        borderType=cv2.BORDER_REFLECT)


def _fold_symmetric(g, r):
    """Transpose of symmetric padding by ``r``: add padded borders back onto their sources."""
    if r == 0:
        return g.copy()
    h = g.shape[0] - 2 * r
    w = g.shape[1] - 2 * r
    out = g[r:r + h].copy()
    out[:r] += g[:r][::-1]
    out[h - r:] += g[h + r:][::-1]
    res = out[:, r:r + w].copy()
    res[:, :r] += out[:, :r][:, ::-1]
    res[:, w - r:] += out[:, w + r:][:, ::-1]
    return res


def conv2d_adjoint(g, k):
    """Exact transpose of ``f -> conv2d_same(f, k)`` including the reflective border.

    On pixels farther than the kernel radius from the border this coincides with
    ``conv2d_same(g, rot180(k))``.
    """
    g = np.asarray(g, dtype=np.float64)
    k = _check_kernel(k)
    _check_fits(g.shape, k.shape[0])
    r = k.shape[0] // 2
    gz = np.pad(g, r)
    full = cv2.filter2D(gz, cv2.CV_64F, np.ascontiguousarray(k),
                        borderType=cv2.BORDER_CONSTANT)
    return _fold_symmetric(full, r)


def conv_bank(f, kernels):
    """Convolve one field with a stack of kernels: (H, W) x (K, n, n) -> (K, H, W)."""
    f = np.asarray(f, dtype=np.float64)
    return np.stack([conv2d_same(f, k) for k in kernels])


def conv_sum(fields, kernels):
    """sum_k conv2d_same(fields[k], kernels[k])."""
    out = np.zeros(fields.shape[1:])
    for f, k in zip(fields, kernels):
        out += conv2d_same(f, k)
    return out


def kernel_gradient(f, g, n):
    """Gradient of <g, conv2d_same(f, k)> with respect to the n x n taps of k.

    ``f`` and ``g`` may be stacks (K, H, W); the result is then (K, n, n).
    """
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    r = n // 2
    pad = [(0, 0)] * (f.ndim - 2) + [(r, r), (r, r)]
    fp = np.pad(f, pad, mode="symmetric")
    h, w = f.shape[-2:]
    out = np.empty(np.broadcast_shapes(f.shape[:-2], g.shape[:-2]) + (n, n))
    for i in range(n):
        for j in range(n):
            win = fp[..., n - 1 - i:n - 1 - i + h, n - 1 - j:n - 1 - j + w]
            out[..., i, j] = np.einsum("...hw,...hw->...", win, g)
    return out


def rot180(k):
    return np.asarray(k)[::-1, ::-1].copy()


def zigzag_order(n):
    """JPEG-style zig-zag traversal of an n x n frequency grid as (row, col) pairs."""
    order = []
    for s in range(2 * n - 1):
        rows = range(max(0, s - n + 1), min(s, n - 1) + 1)
        if s % 2 == 0:
            rows = reversed(rows)
        order.extend((u, s - u) for u in rows)
    return order


def dct_atoms(n):
    """Orthonormal zero-mean DCT-II atoms of size n x n, DC atom discarded.

    Returns an array of shape (n*n - 1, n, n) in zig-zag frequency order.
    """
    if n < 3 or n % 2 == 0:
        raise ValueError(f"DCT basis size must be odd and >= 3, got {n}")
    x = np.arange(n)
    basis = np.empty((n, n))
    for u in range(n):
        scale = np.sqrt(1.0 / n) if u == 0 else np.sqrt(2.0 / n)
        basis[u] = scale * np.cos(np.pi * (2 * x + 1) * u / (2 * n))
    atoms = [np.outer(basis[u], basis[v]) for u, v in zigzag_order(n)[1:]]
    return np.stack(atoms)


def min_filter(f, w):
    """Sliding w x w minimum with replicated borders."""
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {w}")
    return ndimage.minimum_filter(np.asarray(f, dtype=np.float64), size=w, mode="nearest")


# ---------------------------------------------------------------- file I/O

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _check_png(data):
    pos = len(_PNG_SIG)
    while pos + 8 <= len(data):
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        pos += 12 + length
        if pos > len(data):
            break
        if ctype == b"IEND":
            return
    raise TruncatedFileError("PNG stream ends before IEND chunk")


def _read_pnm(data):
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError("PNM header is incomplete")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise UnsupportedFormatError("malformed PNM header") from None
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise UnsupportedFormatError(f"unsupported PNM geometry {w}x{h} maxval {maxval}")
    channels = 3 if data[:2] == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    raster = data[pos:pos + count * dtype.itemsize]
    if len(raster) < count * dtype.itemsize:
        raise TruncatedFileError(f"PNM raster has {len(raster)} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.float64) / maxval
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def load_image(path):
    """Load PNG (8/16-bit) or binary PPM/PGM into float64 in [0, 1].

    RGB files give (H, W, 3) arrays, grayscale files give (H, W) fields.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    if data.startswith(_PNG_SIG):
        _check_png(data)
        arr = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_UNCHANGED)
        if arr is None:
            raise TruncatedFileError(f"{path}: PNG data could not be decoded")
        if arr.dtype == np.uint8:
            scale = 255.0
        elif arr.dtype == np.uint16:
            scale = 65535.0
        else:
            raise UnsupportedFormatError(f"{path}: unsupported PNG sample type {arr.dtype}")
        if arr.ndim == 3:
            if arr.shape[2] == 4:
                arr = arr[:, :, :3]
            arr = arr[:, :, ::-1]
        return arr.astype(np.float64) / scale
    if data[:2] in (b"P5", b"P6"):
        return _read_pnm(data)
    raise UnsupportedFormatError(f"{path}: not a PNG or binary PPM/PGM file")


def save_image(img, path, bits=8):
    """Write a field or RGB image, clamped to [0, 1], as PNG or PPM/PGM (by suffix)."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    path = Path(path)
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    maxval = 255 if bits == 8 else 65535
    q = np.round(arr * maxval).astype(np.uint8 if bits == 8 else np.uint16)
    suffix = path.suffix.lower()
    if suffix == ".png":
        enc = q[:, :, ::-1] if q.ndim == 3 else q
        ok, buf = cv2.imencode(".png", np.ascontiguousarray(enc))
        if not ok:
            raise ImageIOError(f"PNG encoding failed for {path}")
        payload = buf.tobytes()
    elif suffix in (".ppm", ".pgm", ".pnm"):
        magic = b"P6" if q.ndim == 3 else b"P5"
        header = b"%s\n%d %d\n%d\n" % (magic, q.shape[1], q.shape[0], maxval)
        payload = header + q.astype(">u2" if bits == 16 else "u1").tobytes()
    else:
        raise UnsupportedFormatError(f"{path}: unsupported output suffix {path.suffix!r}")
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc

