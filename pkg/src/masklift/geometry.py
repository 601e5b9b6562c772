"""Pinhole projection, occlusion-aware visibility, axis-aligned box algebra,
and similarity alignment between reconstructed and ground-truth scans.

All functions are pure and operate on immutable inputs; they are safe for
unrestricted concurrent use.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .scene_io import CameraFrame

MIN_PROJECTION_DEPTH = 1e-6
DEFAULT_TAU_OCC = 0.10  # meters


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned box given by center and per-axis size in meters."""

    center: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3).copy()
        size = np.asarray(self.size, dtype=np.float64).reshape(3).copy()
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size))):
            raise ValueError("box values must be finite")
        if np.any(size < 0):
            raise ValueError("box sizes must be non-negative")
        center.flags.writeable = False
        size.flags.writeable = False
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)

    @property
    def min_corner(self) -> np.ndarray:
        return self.center - self.size / 2.0

    @property
    def max_corner(self) -> np.ndarray:
        return self.center + self.size / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def is_degenerate(self) -> bool:
        return bool(np.any(self.size == 0))

    def translated(self, offset) -> "Box3D":
        return Box3D(center=self.center + np.asarray(offset, dtype=np.float64),
                     size=self.size)


@dataclass(frozen=True)
class Detection:
    """A labeled, scored 3D box."""

    box: Box3D
    label: str
    score: float


@dataclass(frozen=True)
class PixelSet:
    """Integer pixel coordinates of projected points in one frame.

    One entry per source point, so duplicates occur when points share a
    pixel; the length is the projected-point count.
    """

    frame_id: int
    pixels: np.ndarray  # (N, 2) int64, columns (u, v)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2).copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class SimilarityTransform:
    """Maps points by x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray  # (3, 3) proper rotation
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3).copy()
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must have det +1")
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation


def invert_rigid(pose: np.ndarray) -> np.ndarray:
    """Invert a rigid 4x4 world-to-camera transform via the transpose."""
    rot = pose[:3, :3]
    t = pose[:3, 3]
    out = np.eye(4)
    out[:3, :3] = rot.T
    out[:3, 3] = -rot.T @ t
    return out


def camera_center(pose: np.ndarray) -> np.ndarray:
    """World-space optical center of a world-to-camera pose."""
    return -pose[:3, :3].T @ pose[:3, 3]


# ---------------------------------------------------------------------------
# Projection / backprojection
# ---------------------------------------------------------------------------

def project_points(points: np.ndarray, frame: "CameraFrame"):
    """Project world points into a frame.

    Returns (uv, z, valid): continuous pixel coordinates, camera-space
    depth, and a mask of points with z > 1e-6 landing inside [0,W)x[0,H).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pose = frame.world_to_camera
    cam = pts @ pose[:3, :3].T + pose[:3, 3]
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = frame.fx * cam[:, 0] / z + frame.cx
        v = frame.fy * cam[:, 1] / z + frame.cy
    uv = np.stack([u, v], axis=1)
    valid = ((z > MIN_PROJECTION_DEPTH)
             & (u >= 0) & (u < frame.width)
             & (v >= 0) & (v < frame.height))
    return uv, z, valid


def project_point(point, frame: "CameraFrame"):
    """Project one world point; None when behind the camera or off-frame."""
    uv, _, valid = project_points(np.asarray(point, dtype=np.float64)[None, :],
                                  frame)
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def backproject_pixels(pixels, depths, frame: "CameraFrame") -> np.ndarray:
    """Lift pixels with camera-space depths to world points."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    cam = np.stack([(px[:, 0] - frame.cx) / frame.fx * d,
                    (px[:, 1] - frame.cy) / frame.fy * d,
                    d], axis=1)
    pose = frame.world_to_camera
    return (cam - pose[:3, 3]) @ pose[:3, :3]


def backproject_pixel(pixel, depth: float, frame: "CameraFrame") -> np.ndarray:
    return backproject_pixels(np.asarray(pixel, dtype=np.float64)[None, :],
                              np.array([depth]), frame)[0]


def _round_pixel(values: np.ndarray) -> np.ndarray:
    # half-up rounding; avoids banker's rounding surprises at .5 boundaries
    return np.floor(values + 0.5).astype(np.int64)


def visible_points(points, frame: "CameraFrame",
                   tau_occ: float = DEFAULT_TAU_OCC):
    """Occlusion-filtered visibility of world points in a frame.

    A point survives when it projects in-frame with positive depth, its
    nearest pixel holds a valid depth, and it lies within tau_occ of that
    pixel's backprojected surface point. Returns (indices, pixels).
    """
    if tau_occ <= 0:
        raise ValueError("tau_occ must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv, _, valid = project_points(pts, frame)
    idx = np.flatnonzero(valid)
    empty = (np.empty(0, dtype=np.int64), np.empty((0, 2), dtype=np.int64))
    if idx.size == 0:
        return empty
    pu = _round_pixel(uv[idx, 0])
    pv = _round_pixel(uv[idx, 1])
    inb = (pu >= 0) & (pu < frame.width) & (pv >= 0) & (pv < frame.height)
    idx, pu, pv = idx[inb], pu[inb], pv[inb]
    if idx.size == 0:
        return empty
    d = frame.depth[pv, pu]
    has_depth = d > 0
    idx, pu, pv, d = idx[has_depth], pu[has_depth], pv[has_depth], d[has_depth]
    if idx.size == 0:
        return empty
    surface = backproject_pixels(np.stack([pu, pv], axis=1), d, frame)
    close = np.linalg.norm(pts[idx] - surface, axis=1) < tau_occ
    return idx[close], np.stack([pu, pv], axis=1)[close]


def visible_projection(points, frame: "CameraFrame",
                       tau_occ: float = DEFAULT_TAU_OCC) -> PixelSet:
    _, pixels = visible_points(points, frame, tau_occ)
    return PixelSet(frame_id=frame.id, pixels=pixels)


# ---------------------------------------------------------------------------
# Box algebra
# ---------------------------------------------------------------------------

def crop_point_cloud(cloud, box: Box3D) -> np.ndarray:
    """Indices of points inside the box (closed bounds on both sides)."""
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    lo = box.min_corner
    hi = box.max_corner
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    return np.flatnonzero(inside)


def bbox2d_from_pixels(pixels) -> tuple[int, int, int, int]:
    """Tight (xmin, ymin, xmax, ymax) over a non-empty pixel set."""
    px = pixels.pixels if isinstance(pixels, PixelSet) else np.asarray(pixels)
    px = px.reshape(-1, 2)
    if px.shape[0] == 0:
        raise ValueError("empty pixel set")
    return (int(px[:, 0].min()), int(px[:, 1].min()),
            int(px[:, 0].max()), int(px[:, 1].max()))


def box_from_points(points) -> Box3D:
    """Tight axis-aligned box over a non-empty point set.

    Collapsed axes produce a zero-extent box, observable through
    Box3D.is_degenerate.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("empty point set")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    size = hi - lo
    while True:
        # center/size arithmetic can round corners inside [lo, hi]; widen
        # by ulps until the closed box provably covers the extremes
        box = Box3D(center=(lo + hi) / 2.0, size=size)
        short = (box.min_corner > lo) | (box.max_corner < hi)
        if not short.any():
            return box
        size = np.where(short, np.nextafter(size, np.inf), size)


def iou3d(a: Box3D, b: Box3D) -> float:
    """Intersection-over-union of two axis-aligned boxes."""
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return inter / union


def nms(boxes: Sequence[Box3D], scores: Sequence[float],
        tau_iou: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices.

    Boxes are visited by descending score (ties: lower original index
    first); a box is suppressed when its IoU with any kept box reaches
    tau_iou.
    """
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores length mismatch")
    sc = np.asarray(scores, dtype=np.float64)
    if sc.size and not np.all(np.isfinite(sc)):
        raise ValueError("scores must be finite")
    order = sorted(range(len(boxes)), key=lambda i: (-sc[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou3d(boxes[i], boxes[j]) < tau_iou for j in kept):
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# Scan alignment (similarity between predicted and ground-truth spaces)
# ---------------------------------------------------------------------------

def _similarity_matching_pose(scale: float, pred_pose: np.ndarray,
                              gt_pose: np.ndarray) -> SimilarityTransform:
    # Rotation/translation chosen so transforming the predicted scan maps
    # predicted pose 0 onto gt pose 0 exactly.
    pred = np.asarray(pred_pose, dtype=np.float64).reshape(4, 4)
    gt = np.asarray(gt_pose, dtype=np.float64).reshape(4, 4)
    rot = gt[:3, :3].T @ pred[:3, :3]
    trans = gt[:3, :3].T @ (scale * pred[:3, 3] - gt[:3, 3])
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans)


def apply_similarity_to_pose(pose: np.ndarray,
                             sim: SimilarityTransform) -> np.ndarray:
    """World-to-camera pose of the same camera after transforming the world."""
    pose = np.asarray(pose, dtype=np.float64).reshape(4, 4)
    rot = pose[:3, :3] @ sim.rotation.T
    out = np.eye(4)
    out[:3, :3] = rot
    out[:3, 3] = sim.scale * pose[:3, 3] - rot @ sim.translation
    return out


def align_depth_pose(pred_pose0: np.ndarray, gt_pose0: np.ndarray,
                     pred_depth0: np.ndarray, gt_depth0: np.ndarray,
                     min_valid_pixels: int = 100) -> SimilarityTransform:
    """Similarity from one shared view: median depth-ratio scale, pose-0
    rotation and translation."""
    pd = np.asarray(pred_depth0, dtype=np.float64)
    gd = np.asarray(gt_depth0, dtype=np.float64)
    if pd.shape != gd.shape:
        raise ValueError("depth maps must share a shape")
    valid = (pd > 0) & (gd > 0)
    n_valid = int(valid.sum())
    if n_valid < min_valid_pixels:
        raise ValueError(
            f"only {n_valid} pixels valid in both depth maps "
            f"(need {min_valid_pixels})")
    scale = float(np.median(gd[valid] / pd[valid]))
    return _similarity_matching_pose(scale, pred_pose0, gt_pose0)


def align_two_poses(pred_pose0: np.ndarray, pred_pose1: np.ndarray,
                    gt_pose0: np.ndarray,
                    gt_pose1: np.ndarray) -> SimilarityTransform:
    """Similarity from two shared views: camera-distance ratio scale,
    pose-0 rotation and translation."""
    pred_dist = float(np.linalg.norm(
        camera_center(np.asarray(pred_pose1, dtype=np.float64))
        - camera_center(np.asarray(pred_pose0, dtype=np.float64))))
    if pred_dist <= 1e-9:
        raise ValueError("predicted camera centers are coincident")
    gt_dist = float(np.linalg.norm(
        camera_center(np.asarray(gt_pose1, dtype=np.float64))
        - camera_center(np.asarray(gt_pose0, dtype=np.float64))))
    return _similarity_matching_pose(gt_dist / pred_dist, pred_pose0, gt_pose0)


# ---------------------------------------------------------------------------
# Uniform voxel hash for fixed-radius neighbor tests
# ---------------------------------------------------------------------------

_CELL_BITS = 21
_CELL_LIMIT = 1 << (_CELL_BITS - 1)
_CELL_MASK = (1 << _CELL_BITS) - 1

# 27 neighbor offsets, center cell first so common hits terminate early
_NEIGHBOR_OFFSETS = np.array(
    sorted(itertools.product((-1, 0, 1), repeat=3),
           key=lambda o: (max(abs(v) for v in o), o)),
    dtype=np.int64)


def _pack_cells(cells: np.ndarray) -> np.ndarray:
    if cells.size and (np.any(cells <= -_CELL_LIMIT)
                       or np.any(cells >= _CELL_LIMIT)):
        raise ValueError("coordinates exceed the voxel hash range")
    masked = cells & _CELL_MASK
    return ((masked[:, 0] << (2 * _CELL_BITS))
            | (masked[:, 1] << _CELL_BITS)
            | masked[:, 2])


class VoxelHash:
    """Spatial hash over a fixed point set with cell size equal to the
    query radius, so any neighbor within the radius lies in the 27 cells
    around a query point's cell."""

    def __init__(self, points, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell size must be positive")
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell_size = float(cell_size)
        keys = _pack_cells(np.floor(pts / self.cell_size).astype(np.int64))
        order = np.argsort(keys, kind="stable")
        self._points = pts[order]
        sorted_keys = keys[order]
        self._keys, self._starts = np.unique(sorted_keys, return_index=True)
        self._ends = np.append(self._starts[1:], sorted_keys.size)

    def __len__(self) -> int:
        return self._points.shape[0]

    def has_neighbor_within(self, queries, radius: float) -> np.ndarray:
        """Per query point: is any stored point within ``radius``?"""
        if radius > self.cell_size:
            raise ValueError("radius must not exceed the cell size")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        covered = np.zeros(q.shape[0], dtype=bool)
        if q.shape[0] == 0 or self._points.shape[0] == 0:
            return covered
        r2 = float(radius) ** 2
        base = np.floor(q / self.cell_size).astype(np.int64)
        for off in _NEIGHBOR_OFFSETS:
            todo = np.flatnonzero(~covered)
            if todo.size == 0:
                break
            keys = _pack_cells(base[todo] + off)
            pos = np.searchsorted(self._keys, keys)
            pos = np.minimum(pos, self._keys.size - 1)
            hit = self._keys[pos] == keys
            if not np.any(hit):
                continue
            todo = todo[hit]
            pos = pos[hit]
            starts = self._starts[pos]
            counts = self._ends[pos] - starts
            flat = _expand_ranges(starts, counts)
            owners = np.repeat(todo, counts)
            d2 = np.sum((q[owners] - self._points[flat]) ** 2, axis=1)
            near = d2 <= r2
            covered[owners[near]] = True
        return covered

    def covered_fraction(self, queries, radius: float) -> float:
        hits = self.has_neighbor_within(queries, radius)
        if hits.size == 0:
            raise ValueError("empty query set")
        return float(hits.mean())


def _expand_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenate arange(start, start+count) for each range, vectorized."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    steps = np.ones(total, dtype=np.int64)
    steps[0] = starts[0]
    boundaries = np.cumsum(counts)[:-1]
    steps[boundaries] = starts[1:] - (starts[:-1] + counts[:-1] - 1)
    return np.cumsum(steps)
