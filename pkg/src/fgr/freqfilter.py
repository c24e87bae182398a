"""JPEG-style low-pass filtering on 8x8 DCT blocks.

Images are ``uint8`` arrays of shape (H, W, 3).  The filter converts to
full-range YCbCr, level-shifts by 128, quantizes each block's orthonormal
DCT-II coefficients with a quality-scaled table, and reconstructs.  Smaller
``lam`` means coarser quantization and fewer surviving high frequencies.
"""

from __future__ import annotations

import numpy as np

BLOCK = 8

# ITU-T T.81 Annex K, tables K.1 (luminance) and K.2 (chrominance)
LUMA_BASE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)
CHROMA_BASE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.int64,
)


def _dct_matrix(n: int = BLOCK) -> np.ndarray:
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    c = np.cos((2 * x + 1) * k * np.pi / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


DCT_MATRIX = _dct_matrix()


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3 or min(img.shape[:2]) < 1:
        raise ValueError(f"expected uint8 image of shape (H, W, 3), got {img.dtype} {img.shape}")
    return img


def rgb_to_ycbcr(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-range (JFIF) conversion; planes are float64 clamped to [0, 255]."""
    rgb = _check_image(img).astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return tuple(np.clip(p, 0.0, 255.0) for p in (y, cb, cr))


def ycbcr_to_rgb(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """Inverse conversion, rounded and clamped back to uint8."""
    cb = cb - 128.0
    cr = cr - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def dct8(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of one (8, 8) block or a stack (..., 8, 8)."""
    return DCT_MATRIX @ np.asarray(block, dtype=np.float64) @ DCT_MATRIX.T


def idct8(coeffs: np.ndarray) -> np.ndarray:
    return DCT_MATRIX.T @ np.asarray(coeffs, dtype=np.float64) @ DCT_MATRIX


def quant_matrix(lam: int, kind: str = "luma") -> np.ndarray:
    """Quality-scaled quantization table (libjpeg rule), entries in [1, 255]."""
    if isinstance(lam, bool) or int(lam) != lam or not 1 <= lam <= 100:
        raise ValueError(f"lambda must be an integer in [1, 100], got {lam!r}")
    lam = int(lam)
    if kind == "luma":
        base = LUMA_BASE
    elif kind == "chroma":
        base = CHROMA_BASE
    else:
        raise ValueError(f"kind must be 'luma' or 'chroma', got {kind!r}")
    scale = 5000 // lam if lam < 50 else 200 - 2 * lam
    return np.clip((base * scale + 50) // 100, 1, 255)


def _to_blocks(plane: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = plane.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    hh, ww = plane.shape
    blocks = plane.reshape(hh // BLOCK, BLOCK, ww // BLOCK, BLOCK).transpose(0, 2, 1, 3)
    return blocks, (h, w)


def _from_blocks(blocks: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    nh, nw = blocks.shape[:2]
    plane = blocks.transpose(0, 2, 1, 3).reshape(nh * BLOCK, nw * BLOCK)
    return plane[: size[0], : size[1]]


def _quantize_plane(plane: np.ndarray, q: np.ndarray) -> np.ndarray:
    blocks, size = _to_blocks(plane - 128.0)
    coeffs = dct8(blocks)
    rec = idct8(np.rint(coeffs / q) * q)
    return _from_blocks(rec, size) + 128.0


def filter_image(img: np.ndarray, lam: int) -> np.ndarray:
    """Low-pass filter an RGB uint8 image; output has the input's shape."""
    y, cb, cr = rgb_to_ycbcr(img)
    ql = quant_matrix(lam, "luma")
    qc = quant_matrix(lam, "chroma")
    return ycbcr_to_rgb(_quantize_plane(y, ql), _quantize_plane(cb, qc), _quantize_plane(cr, qc))


def spectral_energy(img: np.ndarray) -> np.ndarray:
    """Mean squared DCT coefficient per (u, v) over all level-shifted luma blocks.

    By Parseval the entries sum to the mean per-block sum of squares of the
    level-shifted luma.
    """
    y, _, _ = rgb_to_ycbcr(img)
    blocks, _ = _to_blocks(y - 128.0)
    coeffs = dct8(blocks)
    return (coeffs**2).reshape(-1, BLOCK, BLOCK).mean(axis=0)


def high_band_energy(energy: np.ndarray, min_index_sum: int = 8) -> float:
    """Total of ``energy[u, v]`` over u + v >= min_index_sum."""
    u, v = np.indices(energy.shape)
    return float(energy[u + v >= min_index_sum].sum())


def checkerboard(size: int = 32, low: int = 112, high: int = 144, period: int = 2) -> np.ndarray:
    """Gray checkerboard with square cells of ``period // 2`` pixels."""
    cell = max(period // 2, 1)
    i, j = np.indices((size, size))
    mask = ((i // cell) + (j // cell)) % 2 == 1
    plane = np.where(mask, high, low).astype(np.uint8)
    return np.repeat(plane[:, :, None], 3, axis=2)
