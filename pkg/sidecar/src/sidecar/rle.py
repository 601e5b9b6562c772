"""Run-length mask codec shared with the detection engine's file formats:
column-major runs over a binary bitmap, first run counting zeros."""

from __future__ import annotations

import numpy as np


def encode(bitmap: np.ndarray) -> list[int]:
    arr = np.asarray(bitmap)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("bitmap must be a non-empty 2D array")
    flat = arr.astype(bool).flatten(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def decode(counts, height: int, width: int) -> np.ndarray:
    runs = [int(r) for r in counts]
    if not runs or any(r < 0 for r in runs):
        raise ValueError("runs must be non-negative")
    if sum(runs) != height * width:
        raise ValueError("runs do not sum to height*width")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape((height, width), order="F")


def record(bitmap: np.ndarray, frame_id: int, mask_id: int) -> dict:
    """Mask record in the detection engine's masks-file schema."""
    height, width = bitmap.shape
    return {"frame_id": int(frame_id), "mask_id": int(mask_id),
            "size": [int(height), int(width)], "counts": encode(bitmap)}
