"""Shared fixture builders and independent oracles.

Oracles here deliberately avoid the library's vectorized implementations:
visibility is recomputed with scalar arithmetic, containment with full
distance matrices, NMS and average precision with plain loops.
"""

from __future__ import annotations

import math

import numpy as np

from masklift.geometry import Box3D, iou3d
from masklift.mask_graph import MergeConfig
from masklift.ov_labeler import LabelConfig, make_crop_requests, select_top_views, \
    aggregate_embeddings, bbox2d_from_pixels
from masklift.providers import FakeProvider
from masklift.synthetic import SyntheticObject, make_scene, ring_poses

# Config used with exact synthetic depth: tau_occ at most contain_radius,
# so every visible point sits within the containment radius of the sample
# it landed on.
SYNTHETIC_MERGE = MergeConfig(tau_occ=0.04)
SYNTHETIC_LABEL = LabelConfig(tau_occ=0.04)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random proper rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng: np.random.Generator, translation_scale: float = 2.0
                ) -> np.ndarray:
    pose = np.eye(4)
    pose[:3, :3] = random_rotation(rng)
    pose[:3, 3] = rng.uniform(-translation_scale, translation_scale, 3)
    return pose


# ---------------------------------------------------------------------------
# Scalar visibility oracle (independent of the vectorized path)
# ---------------------------------------------------------------------------

def oracle_visible_indices(points, frame, tau_occ: float) -> list[int]:
    fx, fy, cx, cy = frame.intrinsics
    pose = frame.world_to_camera
    out = []
    for i in range(points.shape[0]):
        px, py, pz = (float(points[i, 0]), float(points[i, 1]),
                      float(points[i, 2]))
        x = pose[0, 0] * px + pose[0, 1] * py + pose[0, 2] * pz + pose[0, 3]
        y = pose[1, 0] * px + pose[1, 1] * py + pose[1, 2] * pz + pose[1, 3]
        z = pose[2, 0] * px + pose[2, 1] * py + pose[2, 2] * pz + pose[2, 3]
        if z <= 1e-6:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        if not (0 <= u < frame.width and 0 <= v < frame.height):
            continue
        pu = math.floor(u + 0.5)
        pv = math.floor(v + 0.5)
        if not (0 <= pu < frame.width and 0 <= pv < frame.height):
            continue
        d = float(frame.depth[pv, pu])
        if d <= 0:
            continue
        sx = (pu - cx) / fx * d
        sy = (pv - cy) / fy * d
        ax = sx - pose[0, 3]
        ay = sy - pose[1, 3]
        az = d - pose[2, 3]
        wx = pose[0, 0] * ax + pose[1, 0] * ay + pose[2, 0] * az
        wy = pose[0, 1] * ax + pose[1, 1] * ay + pose[2, 1] * az
        wz = pose[0, 2] * ax + pose[1, 2] * ay + pose[2, 2] * az
        dist = math.sqrt((px - wx) ** 2 + (py - wy) ** 2 + (pz - wz) ** 2)
        if dist < tau_occ:
            out.append(i)
    return out


def oracle_contains(container: np.ndarray, containee: np.ndarray,
                    tau_contain: float, radius: float) -> bool:
    """Full distance-matrix containment, no spatial hashing."""
    if container.shape[0] == 0:
        return False
    d2 = ((containee[:, None, :] - container[None, :, :]) ** 2).sum(axis=2)
    fraction = float((d2.min(axis=1) <= radius * radius).mean())
    return fraction >= tau_contain


def oracle_consensus(node_a, node_b, scene, lifted, cfg: MergeConfig,
                     cache: dict) -> tuple[int, int]:
    """First-form consensus: enumerate observer and supporter frames.

    Returns (supporters, observers) as integers. ``lifted`` maps
    (frame_id, mask_id) to the original mask point clouds; ``cache`` memoizes
    per-(node, frame) visible portions across calls.
    """

    def portion(node, frame):
        key = (id(node), frame.id)
        if key not in cache:
            idx = oracle_visible_indices(node.points, frame, cfg.tau_occ)
            cache[key] = node.points[np.array(idx, dtype=np.int64)] \
                if idx else np.empty((0, 3))
        return cache[key]

    supporters = observers = 0
    for frame in scene.frames:
        part_a = portion(node_a, frame)
        part_b = portion(node_b, frame)
        if (part_a.shape[0] < cfg.min_visible_points
                or part_b.shape[0] < cfg.min_visible_points):
            continue
        observers += 1
        for key, container in lifted.items():
            if key[0] != frame.id:
                continue
            if (oracle_contains(container, part_a, cfg.tau_contain,
                                cfg.contain_radius)
                    and oracle_contains(container, part_b, cfg.tau_contain,
                                        cfg.contain_radius)):
                supporters += 1
                break
    return supporters, observers


# ---------------------------------------------------------------------------
# Brute-force NMS and AP oracles
# ---------------------------------------------------------------------------

def oracle_iou3d(a: Box3D, b: Box3D) -> float:
    inter = 1.0
    for axis in range(3):
        lo = max(a.center[axis] - a.size[axis] / 2,
                 b.center[axis] - b.size[axis] / 2)
        hi = min(a.center[axis] + a.size[axis] / 2,
                 b.center[axis] + b.size[axis] / 2)
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    return inter / (va + vb - inter)


def oracle_nms(boxes, scores, tau: float) -> list[int]:
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        suppressed = False
        for j in kept:
            if oracle_iou3d(boxes[i], boxes[j]) >= tau:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


def oracle_average_precision(flags: list[bool], num_gt: int) -> float:
    """AP as the exact area under the precision envelope, by loops."""
    recalls, precisions = [], []
    tp = fp = 0
    for flag in flags:
        if flag:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / num_gt)
        precisions.append(tp / (tp + fp))
    ap = 0.0
    prev_recall = 0.0
    for i, recall in enumerate(recalls):
        if recall == prev_recall:
            continue
        envelope = max(precisions[i:], default=0.0)
        ap += (recall - prev_recall) * envelope
        prev_recall = recall
    return ap


# ---------------------------------------------------------------------------
# Random micro-scenes for the consensus oracle
# ---------------------------------------------------------------------------

MICRO_MERGE = MergeConfig(
    tau_rate=0.9, observer_schedule=(1, 2), tau_contain=0.6,
    contain_radius=0.15, min_points=1, min_mask_pixels=5,
    min_visible_points=3, tau_occ=0.12)

_MICRO_SLOTS = [(-0.65, -0.65), (0.7, -0.6), (-0.6, 0.7), (0.65, 0.65)]


def random_micro_scene(seed: int):
    """A tiny random scene: up to 3 separated cuboids, up to 6 cameras,
    24x18 frames. Returns (scene, objects)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n_objects = int(rng.integers(1, 4))
    n_frames = int(rng.integers(2, 7))
    slots = rng.permutation(len(_MICRO_SLOTS))[:n_objects]
    objects = []
    for i, slot in enumerate(slots):
        cx, cy = _MICRO_SLOTS[slot]
        cx += float(rng.uniform(-0.08, 0.08))
        cy += float(rng.uniform(-0.08, 0.08))
        size = rng.uniform(0.35, 0.65, 3)
        objects.append(SyntheticObject(
            f"obj{i}", Box3D(center=(cx, cy, size[2] / 2), size=size)))
    poses = ring_poses(n_frames,
                       radius=float(rng.uniform(2.2, 2.9)),
                       height=float(rng.uniform(1.2, 2.0)),
                       target=(float(rng.uniform(-0.1, 0.1)),
                               float(rng.uniform(-0.1, 0.1)), 0.3),
                       phase=float(rng.uniform(0, 2 * math.pi)))
    width, height = 24, 18
    fx = fy = 0.95 * width
    intrinsics = (fx, fy, (width - 1) / 2.0, (height - 1) / 2.0)
    scene = make_scene(objects, poses, intrinsics, width, height,
                       scene_id=f"micro-{seed}")
    return scene, objects


# ---------------------------------------------------------------------------
# Closed-loop vocabulary for CLI fixtures
# ---------------------------------------------------------------------------

def closed_loop_embeddings(scene, boxes, provider: FakeProvider,
                           label_cfg: LabelConfig) -> np.ndarray:
    """The aggregated crop embedding the labeling stage will compute per
    box, reproduced through the same helpers. Storing these as class text
    embeddings makes each box classify to 'its own' class with cosine 1."""
    rows = []
    for box in boxes:
        views = select_top_views(box, scene, label_cfg.k_views,
                                 label_cfg.tau_occ)
        embeddings = []
        for frame, pixels in views:
            requests = make_crop_requests((frame, pixels), label_cfg.scales)
            refined = provider.refine_mask(frame, bbox2d_from_pixels(pixels))
            for request in requests:
                embeddings.append(provider.embed_crop(
                    frame, refined, request.bbox, request.scale_index))
        rows.append(aggregate_embeddings(embeddings))
    return np.stack(rows)


def match_to_objects(boxes, objects) -> list[int]:
    """Index of the best-IoU ground-truth object per box."""
    out = []
    for box in boxes:
        ious = [iou3d(box, obj.box) for obj in objects]
        out.append(int(np.argmax(ious)))
    return out
