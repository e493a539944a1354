"""Map export: one 8-bit PGM per frame, a normalization sidecar, and the raw tensor."""

import os
from typing import Dict, Tuple

import numpy as np

from . import kvqt


def normalize_u8(values: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    if span == 0:
        return np.zeros(values.shape, dtype=np.uint8), lo, hi
    return np.round((values - lo) / span * 255.0).astype(np.uint8), lo, hi


def denormalize_u8(pixels: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + pixels.astype(np.float64) / 255.0 * (hi - lo)


def write_pgm(path: str, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end].decode("ascii"))
        pos = end
    if fields[0] != "P5" or fields[3] != "255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(blob[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def read_sidecar(path: str) -> Dict[str, float]:
    out = {}
    with open(path) as fh:
        for line in fh:
            key, _, value = line.strip().partition("=")
            if key:
                out[key] = float(value)
    return out


def export_map(out_dir: str, name: str, values: np.ndarray) -> None:
    """Write ``name.kvqt``, ``name.norm.txt`` and ``name_fNNN.pgm`` for a ``[T, H, W]`` map."""
    os.makedirs(out_dir, exist_ok=True)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    kvqt.save(os.path.join(out_dir, f"{name}.kvqt"), values)
    pixels, lo, hi = normalize_u8(values)
    with open(os.path.join(out_dir, f"{name}.norm.txt"), "w") as fh:
        fh.write(f"min={lo!r}\nmax={hi!r}\n")
    for f, frame in enumerate(pixels):
        write_pgm(os.path.join(out_dir, f"{name}_f{f:03d}.pgm"), frame)
