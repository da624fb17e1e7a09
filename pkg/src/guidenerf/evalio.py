"""Image-quality metrics and image/depth file I/O.

Color images are float arrays in [0, 1], shape (H, W, 3), row-major, and
are stored as 8-bit RGB PNG. Depth maps are float32 grayscale PFM with
scale -1.0 (little-endian), rows bottom-to-top per the PFM convention.

The PNG codec is deliberately minimal: it writes non-interlaced 8-bit RGB
with filter 0 and a fixed zlib level, so dataset generation is
byte-reproducible; the reader handles all five standard scanline filters.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = [
    "EvalIOError",
    "psnr",
    "ssim",
    "depth_rmse",
    "write_png",
    "read_png",
    "write_pfm",
    "read_pfm",
]

PSNR_CAP = 99.0


class EvalIOError(Exception):
    pass


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalIOError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_WIN = 11


def _gaussian_kernel():
    half = (_SSIM_WIN - 1) / 2.0
    x = np.arange(_SSIM_WIN) - half
    k = np.exp(-(x ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 'valid' convolution with a symmetric 1-D kernel."""
    n = k.shape[0]
    h, w = img.shape
    out = np.zeros((h - n + 1, w))
    for i in range(n):
        out += k[i] * img[i: h - n + 1 + i, :]
    out2 = np.zeros((h - n + 1, w - n + 1))
    for j in range(n):
        out2 += k[j] * out[:, j: w - n + 1 + j]
    return out2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with the standard 11x11 Gaussian window,
    sigma 1.5, K1=0.01, K2=0.03, unit dynamic range, averaged per channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalIOError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w, _ = a.shape
    if h < _SSIM_WIN or w < _SSIM_WIN:
        raise EvalIOError(f"ssim: image {h}x{w} smaller than the {_SSIM_WIN}px window")
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    k = _gaussian_kernel()
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _filter_valid(x, k)
        mu_y = _filter_valid(y, k)
        var_x = _filter_valid(x * x, k) - mu_x ** 2
        var_y = _filter_valid(y * y, k) - mu_y ** 2
        cov = _filter_valid(x * y, k) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def depth_rmse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Root mean squared depth error over masked pixels, in world units."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise EvalIOError("depth_rmse: shape mismatch")
    if not mask.any():
        raise EvalIOError("depth_rmse: empty mask")
    d = pred[mask] - gt[mask]
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------------------
# PNG (8-bit RGB, non-interlaced)

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def write_png(path, img: np.ndarray) -> None:
    """Clamp a float (H, W, 3) image to [0, 1] and write 8-bit RGB PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise EvalIOError(f"write_png: expected (H, W, 3), got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = data.shape
    raw = bytearray()
    for row in range(h):
        raw.append(0)  # filter type: None
        raw.extend(data[row].tobytes())
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(_PNG_SIG)
        f.write(_chunk(b"IHDR", ihdr))
        f.write(_chunk(b"IDAT", zlib.compress(bytes(raw), 6)))
        f.write(_chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def read_png(path) -> np.ndarray:
    """Read an 8-bit RGB non-interlaced PNG into a float (H, W, 3) in [0, 1]."""
    with open(path, "rb") as f:
        if f.read(8) != _PNG_SIG:
            raise EvalIOError(f"{path}: not a PNG file")
        width = height = None
        idat = bytearray()
        while True:
            head = f.read(8)
            if len(head) < 8:
                raise EvalIOError(f"{path}: truncated PNG")
            (length,), tag = struct.unpack(">I", head[:4]), head[4:]
            payload = f.read(length)
            f.read(4)  # CRC, unchecked
            if tag == b"IHDR":
                width, height, depth, color, comp, filt, interlace = struct.unpack(
                    ">IIBBBBB", payload)
                if depth != 8 or color != 2 or interlace != 0:
                    raise EvalIOError(
                        f"{path}: unsupported PNG (depth={depth} color={color} interlace={interlace})")
            elif tag == b"IDAT":
                idat.extend(payload)
            elif tag == b"IEND":
                break
    raw = zlib.decompress(bytes(idat))
    stride = width * 3
    out = np.empty((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for row in range(height):
        ftype = raw[pos]
        line = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).astype(np.int32)
        pos += 1 + stride
        if ftype == 0:
            cur = line
        elif ftype == 1:  # Sub
            cur = line.copy()
            for i in range(3, stride):
                cur[i] = (cur[i] + cur[i - 3]) & 0xFF
        elif ftype == 2:  # Up
            cur = (line + prev) & 0xFF
        elif ftype == 3:  # Average
            cur = line.copy()
            for i in range(stride):
                left = cur[i - 3] if i >= 3 else 0
                cur[i] = (cur[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            cur = line.copy()
            for i in range(stride):
                left = cur[i - 3] if i >= 3 else 0
                ul = prev[i - 3] if i >= 3 else 0
                cur[i] = (cur[i] + _paeth(int(left), int(prev[i]), int(ul))) & 0xFF
        else:
            raise EvalIOError(f"{path}: unknown PNG filter {ftype}")
        out[row] = cur.astype(np.uint8)
        prev = cur
    return out.reshape(height, width, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# PFM (32-bit float, scale -1.0 => little-endian, rows bottom-to-top)


def write_pfm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf\n"
        rows = arr[::-1, :]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
        rows = arr[::-1, :, :]
    else:
        raise EvalIOError(f"write_pfm: expected (H, W) or (H, W, 3), got {arr.shape}")
    h, w = arr.shape[0], arr.shape[1]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(rows.astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind == b"Pf":
            channels = 1
        elif kind == b"PF":
            channels = 3
        else:
            raise EvalIOError(f"{path}: not a PFM file (got {kind!r})")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        payload = f.read(w * h * channels * 4)
        if len(payload) != w * h * channels * 4:
            raise EvalIOError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(payload, dtype=dtype)
    arr = arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, channels)
    return np.ascontiguousarray(arr[::-1]).astype(np.float32)
