"""Analytic scene synthesis: axis-aligned cuboids rendered into exact
depth maps and instance masks by ray casting, plus camera helpers.

The renderer keeps everything consistent by construction: masks come from
the nearest-hit instance id, the point cloud is the union of backprojected
depth pixels, and depth can be quantized to the millimeter grid used by
the on-disk format so in-memory scenes match their reloaded twins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box3D, backproject_pixels
from .scene_io import (CameraFrame, InstanceMask2D, PointCloud, Scene,
                       encode_rle, subsample_indices)

DEPTH_GRID = 1000.0  # quantization steps per meter, matches the PNG codec


@dataclass(frozen=True)
class SyntheticObject:
    name: str
    box: Box3D


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera pose for a camera at ``position`` looking at
    ``target`` (x right, y down, z forward)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position and target coincide")
    z_axis = forward / norm
    up = np.asarray(up, dtype=np.float64)
    down = -up - np.dot(-up, z_axis) * z_axis
    if np.linalg.norm(down) < 1e-9:  # looking along up: pick another down
        down = np.array([0.0, -1.0, 0.0]) - z_axis[1] * -z_axis
    y_axis = down / np.linalg.norm(down)
    x_axis = np.cross(y_axis, z_axis)
    rot = np.stack([x_axis, y_axis, z_axis])
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = -rot @ position
    return pose


def ring_poses(count: int, radius: float, height: float,
               target=(0.0, 0.0, 0.5), phase: float = 0.0) -> list[np.ndarray]:
    """Evenly spaced cameras on a circle, all aimed at the target."""
    poses = []
    for i in range(count):
        angle = phase + 2.0 * math.pi * i / count
        position = (radius * math.cos(angle), radius * math.sin(angle), height)
        poses.append(look_at_pose(position, target))
    return poses


def render_frame(objects: Sequence[SyntheticObject], pose: np.ndarray,
                 intrinsics, width: int, height: int):
    """Ray-cast cuboids into (depth, instance_ids) for one camera.

    depth is the camera-space z of the nearest hit (0 where nothing is
    hit) and instance_ids holds the object index per pixel (-1 for
    background). Pixel rays pass through pixel centers.
    """
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    us, vs = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    dirs_cam = np.stack([(us - cx) / fx, (vs - cy) / fy,
                         np.ones_like(us)], axis=-1)
    rot = pose[:3, :3]
    origin = -rot.T @ pose[:3, 3]
    dirs = dirs_cam @ rot  # row-wise rot.T @ d
    best_t = np.full((height, width), np.inf)
    best_id = np.full((height, width), -1, dtype=np.int64)
    for index, obj in enumerate(objects):
        lo = obj.box.min_corner
        hi = obj.box.max_corner
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (lo - origin) / dirs
            t_hi = (hi - origin) / dirs
        t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=-1)
        t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=-1)
        # camera assumed outside every box, so the near hit is the surface
        hit = (t_far >= t_near) & (t_near > 1e-9)
        closer = hit & (t_near < best_t)
        best_t[closer] = t_near[closer]
        best_id[closer] = index
    # dirs_cam has unit z, so the ray parameter equals camera-space depth
    depth = np.where(best_id >= 0, best_t, 0.0)
    return depth, best_id


def quantize_depth(depth: np.ndarray) -> np.ndarray:
    """Snap depth to the millimeter grid of the 16-bit PNG codec."""
    return np.round(np.asarray(depth, dtype=np.float64) * DEPTH_GRID) / DEPTH_GRID


def make_scene(objects: Sequence[SyntheticObject],
               poses: Sequence[np.ndarray], intrinsics,
               width: int, height: int, *, scene_id: str = "synthetic",
               point_cap: int = 100_000, seed: int = 0,
               quantize: bool = True) -> Scene:
    """Render a full scene: frames, disjoint instance masks, and a point
    cloud fused from the rendered depth maps."""
    frames: list[CameraFrame] = []
    masks: list[InstanceMask2D] = []
    cloud_parts: list[np.ndarray] = []
    for frame_id, pose in enumerate(poses):
        depth, ids = render_frame(objects, pose, intrinsics, width, height)
        if quantize:
            depth = quantize_depth(depth)
        frame = CameraFrame(id=frame_id, intrinsics=tuple(intrinsics),
                            world_to_camera=pose, depth=depth,
                            width=width, height=height)
        frames.append(frame)
        for index in range(len(objects)):
            bitmap = ids == index
            if np.any(bitmap):
                masks.append(InstanceMask2D(
                    frame_id=frame_id, mask_id=index, height=height,
                    width=width, counts=tuple(encode_rle(bitmap))))
        vs, us = np.nonzero(depth > 0)
        if us.size:
            pixels = np.stack([us, vs], axis=1).astype(np.float64)
            cloud_parts.append(backproject_pixels(pixels, depth[vs, us], frame))
    points = (np.concatenate(cloud_parts, axis=0) if cloud_parts
              else np.empty((0, 3)))
    if points.shape[0] > point_cap:
        points = points[subsample_indices(points.shape[0], point_cap, seed)]
    return Scene(scene_id=scene_id, frames=tuple(frames),
                 cloud=PointCloud(points=points), masks=tuple(masks),
                 vocabulary=None, point_cap=point_cap, sample_seed=seed)


def three_cuboid_scene(*, num_cameras: int = 8, width: int = 160,
                       height: int = 120, seed: int = 0) -> tuple[
                           Scene, list[SyntheticObject]]:
    """The standard demo scene: three separated cuboids on a ring of
    cameras. Returns the scene and its ground-truth objects."""
    objects = [
        SyntheticObject("crate", Box3D(center=(-0.9, -0.55, 0.4),
                                       size=(0.8, 0.9, 0.8))),
        SyntheticObject("barrel", Box3D(center=(0.95, -0.5, 0.5),
                                        size=(0.7, 0.7, 1.0))),
        SyntheticObject("console", Box3D(center=(0.05, 0.95, 0.35),
                                         size=(1.1, 0.6, 0.7))),
    ]
    poses = ring_poses(num_cameras, radius=3.4, height=2.1,
                       target=(0.0, 0.0, 0.45), phase=0.13)
    fx = fy = 0.9 * width
    intrinsics = (fx, fy, (width - 1) / 2.0, (height - 1) / 2.0)
    scene = make_scene(objects, poses, intrinsics, width, height,
                       scene_id="three-cuboids", seed=seed)
    return scene, objects
