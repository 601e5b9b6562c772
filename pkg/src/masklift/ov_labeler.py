"""Open-vocabulary labeling of class-agnostic 3D boxes.

For each box the stage crops the scene cloud, ranks frames by how many
cropped points survive the occlusion filter, and keeps the top views. Per
view, the projected points are framed by a tight 2D box that prompts the
provider's mask refinement; crops at several scales are embedded, the
embeddings averaged, and the result classified against the vocabulary by
cosine similarity. Scored detections then pass through 3D NMS.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (DEFAULT_TAU_OCC, Box3D, Detection, PixelSet,
                       bbox2d_from_pixels, crop_point_cloud, nms,
                       visible_points)
from .scene_io import CameraFrame, Scene, Vocabulary

UNKNOWN_LABEL = "unknown"


@dataclass(frozen=True)
class LabelConfig:
    k_views: int = 5
    scales: tuple[float, ...] = (1.0, 1.5, 2.0)
    temperature: float = 0.01
    tau_occ: float = DEFAULT_TAU_OCC
    nms_iou: float = 0.5

    def __post_init__(self):
        if self.k_views < 1:
            raise ValueError("k_views must be >= 1")
        scales = tuple(float(s) for s in self.scales)
        if not scales or any(s <= 0 for s in scales):
            raise ValueError("scales must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (0.0 < self.nms_iou <= 1.0):
            raise ValueError("nms_iou must lie in (0, 1]")
        object.__setattr__(self, "scales", scales)


@dataclass(frozen=True)
class CropRequest:
    frame_id: int
    bbox: tuple[int, int, int, int]  # xmin, ymin, xmax, ymax, clamped
    scale_index: int


def select_top_views(box: Box3D, scene: Scene, k: int = 5,
                     tau_occ: float = DEFAULT_TAU_OCC
                     ) -> list[tuple[CameraFrame, PixelSet]]:
    """Frames ranked by visible projected-point count of the cropped cloud.

    Frames with zero visible points are excluded, ties break toward the
    lower frame id, and fewer than k views may be returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = crop_point_cloud(scene.cloud, box)
    if idx.size == 0:
        return []
    pts = scene.cloud.points[idx]
    ranked = []
    for frame in scene.frames:
        keep, pixels = visible_points(pts, frame, tau_occ)
        if keep.size:
            ranked.append((frame, PixelSet(frame_id=frame.id, pixels=pixels)))
    ranked.sort(key=lambda item: (-len(item[1]), item[0].id))
    return ranked[:k]


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def expand_bbox(bbox, factor: float, width: int,
                height: int) -> tuple[int, int, int, int]:
    """Scale a bbox about its center, then clamp to image bounds."""
    x0, y0, x1, y1 = (int(v) for v in bbox)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    hx, hy = (x1 - x0) / 2.0 * factor, (y1 - y0) / 2.0 * factor
    nx0 = max(_round_half_up(cx - hx), 0)
    ny0 = max(_round_half_up(cy - hy), 0)
    nx1 = min(_round_half_up(cx + hx), width - 1)
    ny1 = min(_round_half_up(cy + hy), height - 1)
    return nx0, ny0, max(nx1, nx0), max(ny1, ny0)


def make_crop_requests(view: tuple[CameraFrame, PixelSet],
                       scales: Sequence[float]) -> list[CropRequest]:
    """One request per scale around the view's tight pixel bbox."""
    frame, pixels = view
    base = bbox2d_from_pixels(pixels)
    return [
        CropRequest(frame_id=frame.id,
                    bbox=expand_bbox(base, s, frame.width, frame.height),
                    scale_index=i)
        for i, s in enumerate(scales)
    ]


def aggregate_embeddings(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of same-dimension vectors, renormalized to unit."""
    if len(vectors) == 0:
        raise ValueError("no embeddings to aggregate")
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("embeddings must share one dimension")
    mean = arr.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-6:
        raise ValueError("aggregated embedding cancels to near zero")
    return mean / norm


def classify(query: np.ndarray, vocab: Vocabulary,
             temperature: float = 0.01) -> tuple[str, float, np.ndarray]:
    """Cosine-similarity classification against the vocabulary.

    Returns the argmax label (ties go to the lower class index), its
    softmax confidence at the given temperature, and all similarities.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != vocab.dim:
        raise ValueError(f"query dim {q.shape[0]} != vocabulary dim {vocab.dim}")
    norm = float(np.linalg.norm(q))
    if norm == 0:
        raise ValueError("query vector is zero")
    sims = vocab.text_embeddings @ (q / norm)
    idx = int(np.argmax(sims))
    logits = sims / temperature
    logits = logits - logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    return vocab.classes[idx], float(probs[idx]), sims


def label_detections(boxes: Sequence[Box3D], scene: Scene, provider,
                     vocab: Vocabulary,
                     config: LabelConfig | None = None) -> list[Detection]:
    """Label each box via top views, provider masks/embeddings, and cosine
    classification; apply NMS on the scored results.

    Boxes with no visible view are kept, labeled "unknown" with score 0.
    The output is ordered by original box index.
    """
    cfg = config or LabelConfig()
    if getattr(provider, "dim", vocab.dim) != vocab.dim:
        raise ValueError(
            f"provider dim {provider.dim} != vocabulary dim {vocab.dim}")
    detections: list[Detection] = []
    for box in boxes:
        views = select_top_views(box, scene, cfg.k_views, cfg.tau_occ)
        if not views:
            detections.append(Detection(box=box, label=UNKNOWN_LABEL, score=0.0))
            continue
        embeddings = []
        for frame, pixels in views:
            requests = make_crop_requests((frame, pixels), cfg.scales)
            prompt_bbox = bbox2d_from_pixels(pixels)
            refined = provider.refine_mask(frame, prompt_bbox)
            for request in requests:
                embeddings.append(provider.embed_crop(
                    frame, refined, request.bbox, request.scale_index))
        aggregated = aggregate_embeddings(embeddings)
        label, confidence, _ = classify(aggregated, vocab, cfg.temperature)
        detections.append(Detection(box=box, label=label, score=confidence))
    kept = nms([d.box for d in detections], [d.score for d in detections],
               cfg.nms_iou)
    return [detections[i] for i in sorted(kept)]
