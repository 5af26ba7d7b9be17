"""Binary PGM/PPM image grids for eyeballing perturbations."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ContractError


def to_bytes_image(images):
    """Map [0, 1] floats to uint8, clipping anything outside the range."""
    return np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def grid(rows):
    """Tile a list of (n, h, w, c) arrays, one array per grid row."""
    n, h, w, c = rows[0].shape
    out = np.zeros((len(rows) * h, n * w, c), dtype=np.uint8)
    for r, row in enumerate(rows):
        if row.shape != rows[0].shape:
            raise ContractError("every grid row must hold the same number and shape of images")
        for i in range(n):
            out[r * h:(r + 1) * h, i * w:(i + 1) * w] = to_bytes_image(row[i])
    return out


def write_pnm(pixels, path):
    """Write (H, W, 1) as binary PGM (P5) or (H, W, 3) as binary PPM (P6)."""
    h, w, c = pixels.shape
    if c not in (1, 3):
        raise ContractError(f"cannot write {c}-channel images as PGM/PPM")
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + np.ascontiguousarray(pixels).tobytes())
    return path


def read_pnm(path):
    """Read back a file written by :func:`write_pnm` as (H, W, C) uint8."""
    data = Path(path).read_bytes()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    w, h = map(int, dims.split())
    c = 1 if magic == b"P5" else 3
    if magic not in (b"P5", b"P6") or int(maxval) != 255 or len(rest) != w * h * c:
        raise ContractError(f"{path} is not a binary PGM/PPM written by this package")
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, c)


def dump_images(batches, path, n=6, indices=None):
    """Clean images on the top row, then one perturbed row per batch.

    ``batches`` is an AdversarialBatch or a list of them built from the same
    clean images (for example one per attack source).  Greyscale data gives a
    PGM, colour data a PPM.
    """
    if not isinstance(batches, (list, tuple)):
        batches = [batches]
    if not batches or len(batches[0]) == 0:
        raise ContractError("nothing to draw: the batch is empty")
    clean = batches[0].clean
    for b in batches[1:]:
        if b.clean.shape != clean.shape or not np.array_equal(b.clean, clean):
            raise ContractError("all batches in one grid must share the same clean images")
    if indices is None:
        indices = np.arange(min(n, len(clean)))
    rows = [clean[indices]] + [b.perturbed[indices] for b in batches]
    return write_pnm(grid(rows), path)
