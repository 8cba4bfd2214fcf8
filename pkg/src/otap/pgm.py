"""Binary PGM (P5, 8-bit) reading and writing.

All on-disk images in the pipeline use this format: raw acquisition
quadrants, preprocessed frames, and 0/255 ground-truth or predicted masks.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray, comment: str | None = None) -> None:
    """Write a 2-D array as binary PGM (P5, maxval 255).

    Float inputs are rounded and clipped to [0, 255]; masks (bool) map to
    0/255.
    """
    if image.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {image.shape}")
    if image.dtype == bool:
        data = np.where(image, 255, 0).astype(np.uint8)
    else:
        data = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = data.shape
    header = b"P5\n"
    if comment:
        header += b"# " + comment.encode("ascii") + b"\n"
    header += f"{w} {h}\n255\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) file into a uint8 array."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Header = magic, width, height, maxval; comments start with '#'.
    pos = 2
    fields = []
    while len(fields) < 3:
        m = re.compile(rb"\s*(#[^\n]*\n|\S+)").match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: truncated PGM header")
        token = m.group(1)
        pos = m.end()
        if not token.startswith(b"#"):
            fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, got {data.size}")
    return data.reshape(h, w).copy()


def read_mask(path) -> np.ndarray:
    """Read a 0/255 PGM mask as a boolean array."""
    return read_pgm(path) > 127
