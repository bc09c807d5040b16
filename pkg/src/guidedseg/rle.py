"""Run-length coding for binary masks.

Flat row-major [value, run, value, run, ...]; the first value is that of
the top-left pixel, runs are positive and sum to height*width. An empty
mask (zero pixels) encodes to [].
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError


def encode_mask(mask: np.ndarray) -> list[int]:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"expected a 2-d mask, got shape {mask.shape}")
    flat = mask.reshape(-1)
    bad = np.setdiff1d(np.unique(flat), [0, 1])
    if bad.size:
        raise ContractError(f"mask values must be 0 or 1, found {bad.tolist()}")
    if flat.size == 0:
        return []
    edges = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], edges))
    runs = np.diff(np.concatenate((starts, [flat.size])))
    out = []
    for s, r in zip(starts, runs):
        out.append(int(flat[s]))
        out.append(int(r))
    return out


def decode_mask(rle: list[int], height: int, width: int) -> np.ndarray:
    if height < 0 or width < 0:
        raise ContractError(f"bad mask size {height}x{width}")
    if len(rle) % 2:
        raise ContractError("run-length data must hold (value, run) pairs")
    total = height * width
    flat = np.empty(total, dtype=np.uint8)
    pos = 0
    for i in range(0, len(rle), 2):
        value, run = rle[i], rle[i + 1]
        if value not in (0, 1):
            raise ContractError(f"mask values must be 0 or 1, found {value}")
        if run <= 0:
            raise ContractError(f"runs must be positive, found {run}")
        if pos + run > total:
            raise ContractError(f"runs exceed {height}x{width} mask")
        flat[pos:pos + run] = value
        pos += run
    if pos != total:
        raise ContractError(f"runs cover {pos} of {total} pixels")
    return flat.reshape(height, width)
