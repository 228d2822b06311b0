"""Image conventions and I/O.

An image is a float64 ndarray of shape (height, width, channels) with
channels 1 or 3. Color values live in [0, 1]; depth images carry scene
units. Two on-disk forms: 8-bit PNG (lossy quantization, for viewing)
and a raw float32 container (lossless, for fixtures and golden tests).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "as_image",
    "save_png",
    "load_png",
    "save_dgeimg",
    "load_dgeimg",
    "save_image",
    "load_image",
    "psnr",
]

_MAGIC = b"DGEIMG1"


def as_image(data: np.ndarray) -> np.ndarray:
    """Validate and return an image array (H, W, C) with C in {1, 3}."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be (H, W, 1|3), got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def save_png(path: str | Path, img: np.ndarray) -> None:
    img = as_image(img)
    quant = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if quant.shape[2] == 1:
        pil = PILImage.fromarray(quant[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(quant, mode="RGB")
    pil.save(str(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with PILImage.open(str(path)) as pil:
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB")
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    return as_image(arr)


def save_dgeimg(path: str | Path, img: np.ndarray) -> None:
    """Raw float32 dump: magic, width/height/channels (int32 LE), row-major data.

    Unlike as_image this accepts any channel count (feature grids reuse it).
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W, C) data, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<iii", w, h, c))
        fh.write(arr.astype("<f4").tobytes())


def load_dgeimg(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: bad magic, not a DGEIMG1 file")
    w, h, c = struct.unpack_from("<iii", raw, len(_MAGIC))
    if w <= 0 or h <= 0 or c <= 0:
        raise ValueError(f"{path}: bad dimensions {w}x{h}x{c}")
    offset = len(_MAGIC) + 12
    count = w * h * c
    if len(raw) - offset < 4 * count:
        raise ValueError(f"{path}: truncated data section")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return data.reshape(h, w, c).astype(np.float64)


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Dispatch on suffix: .png goes through PNG, anything else is raw float."""
    if str(path).lower().endswith(".png"):
        save_png(path, img)
    else:
        save_dgeimg(path, img)


def load_image(path: str | Path) -> np.ndarray:
    if str(path).lower().endswith(".png"):
        return load_png(path)
    return load_dgeimg(path)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images on the [0, 1] scale."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
