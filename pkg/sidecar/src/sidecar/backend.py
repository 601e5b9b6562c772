"""Model backends.

The fake backend is fully deterministic and model-free: segmentation is a
connected-components labeler over same-colored non-background pixels,
mask refinement fills the prompt box, and embeddings are keyed hashes
expanded into unit vectors. It exists so the whole pipeline can run in CI
with no weights or network access.

Real model backends (a SAM-style refiner plus a CLIP-style embedder) plug
in by implementing the same four methods; which checkpoints they load is
deployment configuration and never leaks into the wire protocol.
"""

from __future__ import annotations

import hashlib
from collections import deque

import numpy as np


class BackendError(Exception):
    """Operation failure with a short machine-readable code."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def connected_components(image: np.ndarray) -> list[np.ndarray]:
    """4-connected components of same-colored, non-black pixels.

    Returns one boolean mask per component, largest first (ties: first
    pixel in column-major order), which fixes mask ids deterministically.
    Components never overlap; for model backends that can emit overlapping
    masks, overlaps are resolved by larger-mask priority, then mask id.
    """
    if image.ndim == 2:
        image = image[:, :, None]
    height, width = image.shape[:2]
    foreground = np.any(image != 0, axis=2)
    labels = np.full((height, width), -1, dtype=np.int64)
    masks: list[np.ndarray] = []
    next_label = 0
    for v in range(height):
        for u in range(width):
            if not foreground[v, u] or labels[v, u] >= 0:
                continue
            color = image[v, u]
            queue = deque([(v, u)])
            labels[v, u] = next_label
            component = np.zeros((height, width), dtype=bool)
            component[v, u] = True
            while queue:
                cv, cu = queue.popleft()
                for dv, du in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    nv, nu = cv + dv, cu + du
                    if not (0 <= nv < height and 0 <= nu < width):
                        continue
                    if labels[nv, nu] >= 0 or not foreground[nv, nu]:
                        continue
                    if not np.array_equal(image[nv, nu], color):
                        continue
                    labels[nv, nu] = next_label
                    component[nv, nu] = True
                    queue.append((nv, nu))
            masks.append(component)
            next_label += 1

    def first_pixel(mask: np.ndarray) -> int:
        vs, us = np.nonzero(mask)
        return int((us * mask.shape[0] + vs).min())

    masks.sort(key=lambda m: (-int(m.sum()), first_pixel(m)))
    return masks


class FakeBackend:
    """Deterministic stand-in for the segmentation and embedding models."""

    capabilities = ("segment_frame", "refine_mask", "embed_crop",
                    "embed_text")
    deterministic = True

    def __init__(self, seed: int = 0, dim: int = 64):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.seed = int(seed)
        self.dim = int(dim)

    def _hash_vector(self, *key) -> list[float]:
        digest = hashlib.sha256(repr((self.seed,) + key).encode()).digest()
        rng = np.random.Generator(
            np.random.PCG64(int.from_bytes(digest[:8], "little")))
        vec = rng.standard_normal(self.dim)
        vec /= np.linalg.norm(vec)
        return [float(v) for v in vec]

    def segment_frame(self, image: np.ndarray) -> list[np.ndarray]:
        return connected_components(image)

    def refine_mask(self, width: int, height: int,
                    bbox, image=None) -> np.ndarray:
        x0, y0, x1, y1 = (int(v) for v in bbox)
        if x1 < 0 or y1 < 0 or x0 >= width or y0 >= height or x1 < x0 or y1 < y0:
            raise BackendError("BOX", "prompt bbox lies outside the image")
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, width - 1), min(y1, height - 1)
        mask = np.zeros((height, width), dtype=bool)
        mask[y0:y1 + 1, x0:x1 + 1] = True
        return mask

    def embed_crop(self, frame_id: int, bbox, scale_index: int,
                   image=None, mask=None) -> list[float]:
        return self._hash_vector("crop", int(frame_id),
                                 tuple(int(v) for v in bbox),
                                 int(scale_index))

    def embed_text(self, prompts) -> list[list[float]]:
        if not prompts:
            raise BackendError("PARAM", "empty prompt list")
        return [self._hash_vector("text", str(p)) for p in prompts]
