"""Binary PGM/PPM writers and the overlays used by ``seqground render``."""

from __future__ import annotations

from pathlib import Path

import numpy as np

COLORS_RGB = np.array([[230, 40, 40], [40, 200, 40], [50, 80, 240], [240, 220, 30]], dtype=np.float64)


def _u8(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype == bool:
        return a.astype(np.uint8) * 255
    if np.issubdtype(a.dtype, np.floating):
        return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    return np.clip(a, 0, 255).astype(np.uint8)


def write_pgm(path, img) -> None:
    """8-bit greyscale (P5). Bool maps to {0, 255}, floats are read as [0, 1]."""
    a = _u8(img)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {a.shape}")
    Path(path).write_bytes(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes())


def write_ppm(path, img) -> None:
    """8-bit colour (P6) from an (H, W, 3) array."""
    a = _u8(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got shape {a.shape}")
    Path(path).write_bytes(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode() + a.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a file written by :func:`write_pgm` or :func:`write_ppm`."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM header in {path}")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape).copy()


def raster_rgb(raster: np.ndarray) -> np.ndarray:
    """One-hot colour channels (H, W, 4) to an RGB uint8 image."""
    rgb = np.tensordot(raster[..., :len(COLORS_RGB)], COLORS_RGB, axes=([2], [0]))
    return np.clip(rgb, 0, 255).astype(np.uint8)


def overlay_points(mask: np.ndarray, points, scale: int = 4) -> np.ndarray:
    """Upscaled mask in grey with the sampled points marked red (first point green)."""
    base = np.kron(mask.astype(np.uint8) * 110, np.ones((scale, scale), dtype=np.uint8))
    img = np.repeat(base[..., None], 3, axis=2)
    h, w = base.shape
    for i, (x, y) in enumerate(np.asarray(points, dtype=np.float64).reshape(-1, 2)):
        cx, cy = int(round(x * scale)), int(round(y * scale))
        color = (40, 220, 40) if i == 0 else (240, 40, 40)
        img[max(cy - 1, 0):min(cy + 2, h), max(cx - 1, 0):min(cx + 2, w)] = color
    return img


def heatmap(weights: np.ndarray, size: int) -> np.ndarray:
    """A max-normalised (gh, gw) attention grid, nearest-upsampled to ``size`` and scaled to 0..255."""
    gh, gw = weights.shape
    peak = weights.max()
    norm = weights / peak if peak > 0 else weights
    up = np.kron(norm, np.ones((size // gh, size // gw)))
    return np.clip(np.round(up * 255.0), 0, 255).astype(np.uint8)
