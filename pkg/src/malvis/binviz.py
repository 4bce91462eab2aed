"""Grayscale byte images from binaries, fixed-size model inputs, class
averages, and PGM export.

A file's bytes become pixel intensities row by row at a width chosen from
its size; the final row is zero-padded.  Model inputs are nearest-neighbor
resamples scaled into [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInput, EmptyList

# (size cap in bytes, image width); caps are inclusive, larger files get 1024
WIDTH_TABLE = (
    (10 * 1024, 32),
    (30 * 1024, 64),
    (60 * 1024, 128),
    (100 * 1024, 256),
    (200 * 1024, 384),
    (500 * 1024, 512),
    (1000 * 1024, 768),
)
MAX_WIDTH = 1024


@dataclass
class ByteImage:
    pixels: np.ndarray  # (height, width) uint8, row-major

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class InputTensor:
    values: np.ndarray  # (side, side) float32 in [0, 1]

    @property
    def side(self) -> int:
        return self.values.shape[0]


def width_for_size(n_bytes: int) -> int:
    if n_bytes <= 0:
        raise EmptyInput("cannot size an image for 0 bytes")
    for cap, width in WIDTH_TABLE:
        if n_bytes <= cap:
            return width
    return MAX_WIDTH


def bytes_to_image(data: bytes, width_override: int | None = None) -> ByteImage:
    """Raw bytes to a grayscale image; pixel i equals byte i, final row
    zero-padded."""
    if not data:
        raise EmptyInput("no bytes to image")
    width = width_override or width_for_size(len(data))
    height = math.ceil(len(data) / width)
    arr = np.zeros(width * height, dtype=np.uint8)
    arr[:len(data)] = np.frombuffer(data, dtype=np.uint8)
    return ByteImage(pixels=arr.reshape(height, width))


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample of a 2D array (exact identity when the
    shape already matches)."""
    h, w = arr.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return arr[rows][:, cols]


def resize_to_input(img: ByteImage, side: int, normalize: bool = True) -> InputTensor:
    if side < 8:
        raise EmptyInput(f"input side {side} too small")
    resized = nearest_resize(img.pixels, side, side).astype(np.float32)
    if normalize:
        resized = resized / np.float32(255.0)
    return InputTensor(values=resized)


def average_image(images: list[ByteImage], side: int) -> np.ndarray:
    """Elementwise mean of resized images; float64 values in [0, 1]."""
    if not images:
        raise EmptyList("average_image needs at least one image")
    acc = np.zeros((side, side), dtype=np.float64)
    for img in images:
        acc += resize_to_input(img, side).values
    return acc / len(images)


# ---------------------------------------------------------------------------
# PGM (P5) export


def write_pgm(pixels: np.ndarray, path: str | Path) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise EmptyInput(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    data = parts[3][:w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_real_map(values: np.ndarray, path: str | Path, meta: dict | None = None) -> None:
    """Export a real-valued map as P5 after affine rescale to [0, 255];
    min/max land in a JSON sidecar so raw values stay recoverable."""
    values = np.asarray(values, dtype=np.float64)
    vmin, vmax = float(values.min()), float(values.max())
    if vmax > vmin:
        scaled = (values - vmin) / (vmax - vmin) * 255.0
    else:
        scaled = np.zeros_like(values)
    write_pgm(np.round(scaled).astype(np.uint8), path)
    sidecar = {"min": vmin, "max": vmax}
    sidecar.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))
