"""Grayscale PNG/PGM reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorpusError

IMAGE_SUFFIXES = (".png", ".pgm")
LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(arr: np.ndarray) -> np.ndarray:
    """uint8/uint16 or float array (H,W) or (H,W,3|4) -> float64 gray in [0,1]."""
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer):
        scale = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
        arr = arr.astype(np.float64) / scale
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 1:
            arr = arr[..., 0]
        else:
            arr = arr[..., :3] @ LUMA
    return np.clip(arr, 0.0, 1.0)


def read_gray(path: str | Path, size: int | None = None) -> np.ndarray:
    """Decode an image file to float64 gray in [0,1], optionally bilinearly resized to ``size x size``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("P", "LA", "PA", "CMYK", "YCbCr", "HSV"):
                im = im.convert("RGBA" if "A" in im.mode else "RGB")
            arr = np.array(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise CorpusError(f"cannot decode image {path}: {exc}") from None
    gray = to_gray(arr)
    if size is not None and gray.shape != (size, size):
        f = Image.fromarray(gray.astype(np.float32))
        gray = np.clip(np.asarray(f.resize((size, size), Image.BILINEAR), dtype=np.float64), 0.0, 1.0)
    return gray


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_gray(path: str | Path, img: np.ndarray) -> None:
    """Write an 8-bit grayscale image; the format follows the suffix (.png or .pgm)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(np.squeeze(img))).save(path)


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
