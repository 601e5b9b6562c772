"""Scene loading, validation, and the on-disk codecs.

A scene is described by a JSON manifest that references per-frame depth
maps (16-bit grayscale PNG, millimeters, 0 = invalid), a binary
little-endian PLY point cloud, a JSON file of run-length encoded 2D
instance masks, and optionally a vocabulary (class names plus an "EMB1"
embedding file). Everything loaded here is validated eagerly and frozen;
a loaded Scene can be shared freely across threads.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .geometry import Box3D, Detection

MANIFEST_VERSION = 1
DEFAULT_POINT_CAP = 100_000
DEPTH_UNITS_PER_METER = 1000.0  # depth PNGs store millimeters
EMBEDDING_MAGIC = b"EMB1"
DEFAULT_PROMPT_TEMPLATE = "a photo of {}"

_MASK64 = (1 << 64) - 1


class SceneFormatError(ValueError):
    """Raised for any malformed or inconsistent scene input.

    Carries the offending file path and field so callers can report
    actionable errors.
    """

    def __init__(self, path, field_name: str, message: str):
        self.path = str(path)
        self.field = field_name
        super().__init__(f"{self.path}: {field_name}: {message}")


# ---------------------------------------------------------------------------
# RLE mask codec (column-major runs, first run counts zeros)
# ---------------------------------------------------------------------------

def encode_rle(bitmap: np.ndarray) -> list[int]:
    """Encode a binary HxW bitmap as column-major run lengths.

    The first run counts zeros (it is 0 when the mask starts with a one);
    all later runs are positive. Runs always sum to H*W.
    """
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


def decode_rle(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    """Decode column-major run lengths into a binary HxW bitmap."""
    runs = [int(r) for r in counts]
    if not runs or any(r < 0 for r in runs):
        raise ValueError("runs must be a non-empty list of non-negative ints")
    total = sum(runs)
    if total != height * width:
        raise ValueError(
            f"run sum {total} does not match {height}x{width}={height * width}"
        )
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, runs)
    return flat.reshape((height, width), order="F")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraFrame:
    """One posed RGB-D view: intrinsics, world-to-camera pose, depth map."""

    id: int
    intrinsics: tuple[float, float, float, float]  # fx, fy, cx, cy in pixels
    world_to_camera: np.ndarray  # 4x4 rigid transform
    depth: np.ndarray  # HxW meters, 0 = invalid
    width: int
    height: int
    image_path: str | None = None  # RGB passes through to providers by path

    def __post_init__(self):
        fx, fy, cx, cy = (float(v) for v in self.intrinsics)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("frame dimensions must be positive")
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        pose = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4).copy()
        if np.max(np.abs(pose[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 1e-9:
            raise ValueError("pose bottom row must be (0, 0, 0, 1)")
        rot = pose[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6:
            raise ValueError("pose rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("pose rotation must be proper (det +1)")
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.shape != (self.height, self.width):
            raise ValueError(
                f"depth shape {depth.shape} does not match frame "
                f"{self.height}x{self.width}"
            )
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise ValueError("depth values must be finite and >= 0")
        depth = depth.copy()
        pose.flags.writeable = False
        depth.flags.writeable = False
        object.__setattr__(self, "intrinsics", (fx, fy, cx, cy))
        object.__setattr__(self, "world_to_camera", pose)
        object.__setattr__(self, "depth", depth)

    @property
    def fx(self) -> float:
        return self.intrinsics[0]

    @property
    def fy(self) -> float:
        return self.intrinsics[1]

    @property
    def cx(self) -> float:
        return self.intrinsics[2]

    @property
    def cy(self) -> float:
        return self.intrinsics[3]


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    colors: np.ndarray | None = None  # (N, 3) uint8

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3).copy()
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            col = np.asarray(self.colors)
            if col.shape != pts.shape:
                raise ValueError("colors must match points shape")
            if col.dtype != np.uint8:
                if np.any(col < 0) or np.any(col > 255):
                    raise ValueError("colors must lie in [0, 255]")
                col = col.astype(np.uint8)
            col = col.copy()
            col.flags.writeable = False
            object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class InstanceMask2D:
    """A run-length encoded binary instance mask tied to one frame."""

    frame_id: int
    mask_id: int
    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if sum(counts) != self.height * self.width:
            raise ValueError("mask runs do not sum to height*width")
        object.__setattr__(self, "counts", counts)

    def decode(self) -> np.ndarray:
        return decode_rle(self.counts, self.height, self.width)

    def pixel_count(self) -> int:
        return int(sum(self.counts[1::2]))


@dataclass(frozen=True)
class Vocabulary:
    classes: tuple[str, ...]
    text_embeddings: np.ndarray  # (L, d), unit-norm rows
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE

    def __post_init__(self):
        classes = tuple(str(c) for c in self.classes)
        if len(classes) < 1:
            raise ValueError("vocabulary needs at least one class")
        emb = np.asarray(self.text_embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != len(classes):
            raise ValueError("need one embedding row per class")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings must be finite")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ValueError("embeddings must be unit-norm within 1e-3")
        emb = emb.copy()
        emb.flags.writeable = False
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "text_embeddings", emb)

    @property
    def dim(self) -> int:
        return self.text_embeddings.shape[1]

    def prompts(self) -> list[str]:
        return [self.prompt_template.format(c) for c in self.classes]


@dataclass(frozen=True)
class Scene:
    """Immutable bundle of frames, point cloud, masks, and vocabulary."""

    scene_id: str
    frames: tuple[CameraFrame, ...]
    cloud: PointCloud
    masks: tuple[InstanceMask2D, ...]
    vocabulary: Vocabulary | None
    point_cap: int
    sample_seed: int
    _frame_index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        index = {f.id: f for f in self.frames}
        object.__setattr__(self, "_frame_index", index)

    def frame_by_id(self, frame_id: int) -> CameraFrame:
        return self._frame_index[frame_id]

    def masks_for_frame(self, frame_id: int) -> tuple[InstanceMask2D, ...]:
        return tuple(m for m in self.masks if m.frame_id == frame_id)


def subset_frames(scene: Scene, frame_ids: Iterable[int]) -> Scene:
    """Restrict a scene to the given frames, dropping orphaned masks."""
    keep = set(int(i) for i in frame_ids)
    unknown = keep - {f.id for f in scene.frames}
    if unknown:
        raise ValueError(f"unknown frame ids: {sorted(unknown)}")
    return Scene(
        scene_id=scene.scene_id,
        frames=tuple(f for f in scene.frames if f.id in keep),
        cloud=scene.cloud,
        masks=tuple(m for m in scene.masks if m.frame_id in keep),
        vocabulary=scene.vocabulary,
        point_cap=scene.point_cap,
        sample_seed=scene.sample_seed,
    )


# ---------------------------------------------------------------------------
# Deterministic subsampling
# ---------------------------------------------------------------------------

class SplitMix64:
    """Tiny 64-bit PRNG with a stable cross-platform sequence."""

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64

    def next(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def subsample_indices(n: int, cap: int, seed: int) -> np.ndarray:
    """Pick a uniform random subset of size min(n, cap), sorted ascending.

    Fisher-Yates prefix driven by SplitMix64, so the selection depends only
    on (n, cap, seed).
    """
    if cap < 0:
        raise ValueError("cap must be non-negative")
    if cap >= n:
        return np.arange(n, dtype=np.int64)
    rng = SplitMix64(seed)
    idx = np.arange(n, dtype=np.int64)
    for i in range(cap):
        j = i + rng.next() % (n - i)
        idx[i], idx[j] = idx[j], idx[i]
    return np.sort(idx[:cap])


# ---------------------------------------------------------------------------
# Depth PNG / PLY / embedding file codecs
# ---------------------------------------------------------------------------

def write_depth_png(path, depth_m: np.ndarray) -> None:
    """Write a depth map in meters as 16-bit grayscale PNG millimeters."""
    depth = np.asarray(depth_m, dtype=np.float64)
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise ValueError("depth must be finite and >= 0")
    mm = np.round(depth * DEPTH_UNITS_PER_METER)
    if np.any(mm > 65535):
        raise ValueError("depth exceeds the 16-bit millimeter range")
    Image.fromarray(mm.astype(np.uint16)).save(str(path), format="PNG")


def read_depth_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im)
    if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
        raise SceneFormatError(path, "depth", "expected 16-bit grayscale PNG")
    if arr.min() < 0 or arr.max() > 65535:
        raise SceneFormatError(path, "depth", "values outside 16-bit range")
    return arr.astype(np.float64) / DEPTH_UNITS_PER_METER


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Write a binary little-endian PLY with float32 xyz and optional rgb."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64), dtype="<f4")
    pts = pts.reshape(-1, 3)
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(str(path), "wb") as f:
        f.write(header)
        if colors is None:
            f.write(pts.tobytes())
        else:
            col = np.ascontiguousarray(colors, dtype=np.uint8).reshape(-1, 3)
            if col.shape[0] != pts.shape[0]:
                raise ValueError("colors must match points")
            rec = np.empty(
                pts.shape[0],
                dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                       ("red", "u1"), ("green", "u1"), ("blue", "u1")],
            )
            rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
            rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]
            f.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise SceneFormatError(path, "point_cloud", "not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise SceneFormatError(path, "point_cloud",
                               "only binary little-endian PLY is supported")
    count = None
    props: list[tuple[str, str]] = []
    for line in header:
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            count = int(tok[2])
        elif tok and tok[0] == "element" and count is not None:
            break  # only the vertex element is read
        elif tok[:1] == ["property"] and count is not None:
            props.append((tok[1], tok[2]))
    if count is None:
        raise SceneFormatError(path, "point_cloud", "missing vertex element")
    type_map = {"float": "<f4", "float32": "<f4", "uchar": "u1", "uint8": "u1"}
    fields = []
    for ptype, name in props:
        if ptype not in type_map:
            raise SceneFormatError(path, "point_cloud",
                                   f"unsupported property type {ptype!r}")
        fields.append((name, type_map[ptype]))
    names = [n for n, _ in fields]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise SceneFormatError(path, "point_cloud", f"missing property {axis!r}")
    dtype = np.dtype(fields)
    expected = count * dtype.itemsize
    if len(body) < expected:
        raise SceneFormatError(path, "point_cloud", "truncated vertex data")
    rec = np.frombuffer(body[:expected], dtype=dtype)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    if not np.all(np.isfinite(pts)):
        raise SceneFormatError(path, "point_cloud", "non-finite coordinates")
    return PointCloud(points=pts, colors=colors)


def write_embeddings(path, vectors: np.ndarray) -> None:
    """Write an EMB1 file: magic, u32 count, u32 dim, count*dim float32 LE."""
    arr = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64), dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("vectors must be 2D (count, dim)")
    with open(str(path), "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != EMBEDDING_MAGIC:
        raise SceneFormatError(path, "embeddings", "missing EMB1 magic")
    count, dim = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * count * dim
    if len(data) != expected:
        raise SceneFormatError(
            path, "embeddings",
            f"size {len(data)} does not match header ({count}x{dim})")
    arr = np.frombuffer(data[12:], dtype="<f4").reshape(count, dim)
    return arr.astype(np.float64)


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------

def _require(cond: bool, path, field_name: str, message: str) -> None:
    if not cond:
        raise SceneFormatError(path, field_name, message)


def _resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def load_scene(manifest_path, point_cap: int = DEFAULT_POINT_CAP,
               seed: int = 0) -> Scene:
    """Load and validate a scene manifest.

    Point clouds larger than ``point_cap`` are deterministically
    subsampled with the given seed. Raises SceneFormatError with the
    offending path and field on any violation.
    """
    path = Path(manifest_path)
    if not path.is_file():
        raise SceneFormatError(path, "manifest", "file not found")
    base = path.parent
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneFormatError(path, "manifest", f"invalid JSON: {e}") from e
    _require(isinstance(doc, dict), path, "manifest", "top level must be an object")
    _require(doc.get("version") == MANIFEST_VERSION, path, "version",
             f"expected version {MANIFEST_VERSION}")

    raw_frames = doc.get("frames")
    _require(isinstance(raw_frames, list), path, "frames", "must be a list")
    _require(len(raw_frames) > 0, path, "frames", "no frames")

    frames: list[CameraFrame] = []
    seen_ids: set[int] = set()
    for i, rec in enumerate(raw_frames):
        where = f"frames[{i}]"
        _require(isinstance(rec, dict), path, where, "must be an object")
        fid = rec.get("id")
        _require(isinstance(fid, int), path, f"{where}.id", "must be an integer")
        _require(fid not in seen_ids, path, f"{where}.id", f"duplicate frame id {fid}")
        seen_ids.add(fid)
        pose = rec.get("pose")
        _require(isinstance(pose, list) and len(pose) == 16, path, f"{where}.pose",
                 "must be a list of 16 numbers (row-major world-to-camera)")
        intr = rec.get("intrinsics")
        _require(isinstance(intr, dict) and
                 all(k in intr for k in ("fx", "fy", "cx", "cy")),
                 path, f"{where}.intrinsics", "needs fx, fy, cx, cy")
        width, height = rec.get("width"), rec.get("height")
        _require(isinstance(width, int) and width > 0, path, f"{where}.width",
                 "must be a positive integer")
        _require(isinstance(height, int) and height > 0, path, f"{where}.height",
                 "must be a positive integer")
        depth_rel = rec.get("depth")
        _require(isinstance(depth_rel, str), path, f"{where}.depth",
                 "must be a file path")
        depth_path = _resolve(base, depth_rel)
        _require(depth_path.is_file(), depth_path, f"{where}.depth", "file not found")
        depth = read_depth_png(depth_path)
        _require(depth.shape == (height, width), path, f"{where}.depth",
                 f"depth is {depth.shape}, frame says {height}x{width}")
        pose_mat = np.array(pose, dtype=np.float64).reshape(4, 4)
        _require(abs(np.linalg.det(pose_mat[:3, :3])) > 1e-12, path,
                 f"{where}.pose", "upper-left 3x3 is singular")
        image_rel = rec.get("image")
        image_path = str(_resolve(base, image_rel)) if image_rel else None
        try:
            frame = CameraFrame(
                id=fid,
                intrinsics=(float(intr["fx"]), float(intr["fy"]),
                            float(intr["cx"]), float(intr["cy"])),
                world_to_camera=pose_mat,
                depth=depth,
                width=width,
                height=height,
                image_path=image_path,
            )
        except ValueError as e:
            raise SceneFormatError(path, where, str(e)) from e
        frames.append(frame)
    frames.sort(key=lambda f: f.id)

    cloud_rel = doc.get("point_cloud")
    _require(isinstance(cloud_rel, str), path, "point_cloud", "must be a file path")
    cloud_path = _resolve(base, cloud_rel)
    _require(cloud_path.is_file(), cloud_path, "point_cloud", "file not found")
    cloud = read_ply(cloud_path)
    if len(cloud) > point_cap:
        keep = subsample_indices(len(cloud), point_cap, seed)
        cloud = PointCloud(
            points=cloud.points[keep],
            colors=None if cloud.colors is None else cloud.colors[keep],
        )

    masks_rel = doc.get("masks")
    _require(isinstance(masks_rel, str), path, "masks", "must be a file path")
    masks_path = _resolve(base, masks_rel)
    _require(masks_path.is_file(), masks_path, "masks", "file not found")
    try:
        mask_doc = json.loads(masks_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneFormatError(masks_path, "masks", f"invalid JSON: {e}") from e
    _require(isinstance(mask_doc, list), masks_path, "masks", "must be a list")
    frame_index = {f.id: f for f in frames}
    masks: list[InstanceMask2D] = []
    occupancy: dict[int, np.ndarray] = {}
    seen_mask_ids: set[tuple[int, int]] = set()
    for i, rec in enumerate(mask_doc):
        where = f"masks[{i}]"
        _require(isinstance(rec, dict), masks_path, where, "must be an object")
        fid = rec.get("frame_id")
        _require(fid in frame_index, masks_path, f"{where}.frame_id",
                 f"unknown frame id {fid!r}")
        frame = frame_index[fid]
        mid = rec.get("mask_id")
        _require(isinstance(mid, int), masks_path, f"{where}.mask_id",
                 "must be an integer")
        _require((fid, mid) not in seen_mask_ids, masks_path, f"{where}.mask_id",
                 f"duplicate mask id {mid} in frame {fid}")
        seen_mask_ids.add((fid, mid))
        size = rec.get("size")
        _require(isinstance(size, list) and len(size) == 2, masks_path,
                 f"{where}.size", "must be [height, width]")
        _require(size == [frame.height, frame.width], masks_path, f"{where}.size",
                 f"mask size {size} does not match frame "
                 f"[{frame.height}, {frame.width}]")
        counts = rec.get("counts")
        _require(isinstance(counts, list) and counts, masks_path,
                 f"{where}.counts", "must be a non-empty list")
        try:
            mask = InstanceMask2D(frame_id=fid, mask_id=mid, height=size[0],
                                  width=size[1], counts=counts)
            bitmap = mask.decode()
        except ValueError as e:
            raise SceneFormatError(masks_path, f"{where}.counts", str(e)) from e
        occ = occupancy.setdefault(fid, np.zeros(bitmap.shape, dtype=bool))
        _require(not np.any(occ & bitmap), masks_path, where,
                 f"mask overlaps another mask in frame {fid}")
        occ |= bitmap
        masks.append(mask)
    masks.sort(key=lambda m: (m.frame_id, m.mask_id))

    vocabulary = None
    vocab_rec = doc.get("vocabulary")
    if vocab_rec is not None:
        _require(isinstance(vocab_rec, dict), path, "vocabulary",
                 "must be an object")
        classes = vocab_rec.get("classes")
        _require(isinstance(classes, list) and classes, path,
                 "vocabulary.classes", "must be a non-empty list")
        emb_rel = vocab_rec.get("embeddings")
        _require(isinstance(emb_rel, str), path, "vocabulary.embeddings",
                 "must be a file path")
        emb_path = _resolve(base, emb_rel)
        _require(emb_path.is_file(), emb_path, "vocabulary.embeddings",
                 "file not found")
        emb = read_embeddings(emb_path)
        _require(emb.shape[0] == len(classes), emb_path, "vocabulary.embeddings",
                 f"{emb.shape[0]} embeddings for {len(classes)} classes")
        declared = vocab_rec.get("dim")
        if declared is not None:
            _require(declared == emb.shape[1], path, "vocabulary.dim",
                     f"declared {declared}, file has {emb.shape[1]}")
        template = vocab_rec.get("prompt_template", DEFAULT_PROMPT_TEMPLATE)
        try:
            vocabulary = Vocabulary(classes=tuple(classes), text_embeddings=emb,
                                    prompt_template=template)
        except ValueError as e:
            raise SceneFormatError(path, "vocabulary", str(e)) from e

    scene_id = path.parent.name if path.name == "manifest.json" else path.stem
    return Scene(
        scene_id=scene_id,
        frames=tuple(frames),
        cloud=cloud,
        masks=tuple(masks),
        vocabulary=vocabulary,
        point_cap=int(point_cap),
        sample_seed=int(seed),
    )


def write_scene(scene: Scene, out_dir) -> Path:
    """Write a scene to a directory in the manifest layout; returns the
    manifest path. load_scene(write_scene(s)) reproduces s bit-exactly."""
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    frames_doc = []
    for frame in scene.frames:
        rel = f"depth/{frame.id:06d}.png"
        write_depth_png(out / rel, frame.depth)
        fx, fy, cx, cy = frame.intrinsics
        rec = {
            "id": frame.id,
            "depth": rel,
            "pose": [float(v) for v in frame.world_to_camera.reshape(-1)],
            "intrinsics": {"fx": fx, "fy": fy, "cx": cx, "cy": cy},
            "width": frame.width,
            "height": frame.height,
        }
        if frame.image_path is not None:
            rec["image"] = frame.image_path
        frames_doc.append(rec)
    write_ply(out / "cloud.ply", scene.cloud.points, scene.cloud.colors)
    masks_doc = [
        {"frame_id": m.frame_id, "mask_id": m.mask_id,
         "size": [m.height, m.width], "counts": list(m.counts)}
        for m in scene.masks
    ]
    (out / "masks.json").write_text(
        json.dumps(masks_doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    doc = {
        "version": MANIFEST_VERSION,
        "frames": frames_doc,
        "point_cloud": "cloud.ply",
        "masks": "masks.json",
    }
    if scene.vocabulary is not None:
        write_embeddings(out / "vocab.emb", scene.vocabulary.text_embeddings)
        doc["vocabulary"] = {
            "classes": list(scene.vocabulary.classes),
            "embeddings": "vocab.emb",
            "dim": scene.vocabulary.dim,
            "prompt_template": scene.vocabulary.prompt_template,
        }
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                        encoding="utf-8")
    return manifest


def read_vocabulary_file(path) -> Vocabulary:
    """Read a standalone vocabulary JSON: classes + embeddings file path."""
    path = Path(path)
    if not path.is_file():
        raise SceneFormatError(path, "vocabulary", "file not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneFormatError(path, "vocabulary", f"invalid JSON: {e}") from e
    _require(isinstance(doc, dict), path, "vocabulary", "must be an object")
    classes = doc.get("classes")
    _require(isinstance(classes, list) and classes, path, "classes",
             "must be a non-empty list")
    emb_rel = doc.get("embeddings")
    _require(isinstance(emb_rel, str), path, "embeddings", "must be a file path")
    emb_path = _resolve(path.parent, emb_rel)
    _require(emb_path.is_file(), emb_path, "embeddings", "file not found")
    emb = read_embeddings(emb_path)
    template = doc.get("prompt_template", DEFAULT_PROMPT_TEMPLATE)
    try:
        return Vocabulary(classes=tuple(classes), text_embeddings=emb,
                          prompt_template=template)
    except ValueError as e:
        raise SceneFormatError(path, "vocabulary", str(e)) from e


def write_vocabulary_file(path, classes: Sequence[str], embeddings: np.ndarray,
                          prompt_template: str = DEFAULT_PROMPT_TEMPLATE) -> None:
    path = Path(path)
    emb_name = path.stem + ".emb"
    write_embeddings(path.parent / emb_name, embeddings)
    doc = {
        "classes": list(classes),
        "embeddings": emb_name,
        "dim": int(np.asarray(embeddings).shape[1]),
        "prompt_template": prompt_template,
    }
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# Detection and box output (canonical JSON, 6-decimal floats)
# ---------------------------------------------------------------------------

def _fmt6(value: float) -> str:
    v = float(value)
    if not math.isfinite(v):
        raise ValueError("non-finite value in output")
    return f"{v:.6f}"


def _vec6(values) -> str:
    return "[" + ", ".join(_fmt6(v) for v in values) + "]"


def _dump_rows(rows: list[str], path) -> None:
    text = "[]\n" if not rows else "[\n  " + ",\n  ".join(rows) + "\n]\n"
    Path(path).write_text(text, encoding="utf-8")


def _check_box(box: Box3D) -> None:
    if np.any(box.size <= 0):
        raise ValueError("box sizes must be > 0 for output")


def write_detections(detections: Sequence[Detection], path) -> None:
    """Write labeled detections as a canonical JSON array.

    Keys are sorted and floats use fixed 6-decimal formatting so repeated
    runs are byte-identical and values reread losslessly at 1e-6.
    """
    rows = []
    for det in detections:
        _check_box(det.box)
        rows.append(
            '{"center": %s, "label": %s, "score": %s, "size": %s}'
            % (_vec6(det.box.center), json.dumps(str(det.label)),
               _fmt6(det.score), _vec6(det.box.size)))
    _dump_rows(rows, path)


def read_detections(path) -> list[Detection]:
    path = Path(path)
    if not path.is_file():
        raise SceneFormatError(path, "detections", "file not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneFormatError(path, "detections", f"invalid JSON: {e}") from e
    _require(isinstance(doc, list), path, "detections", "must be a list")
    out = []
    for i, rec in enumerate(doc):
        where = f"detections[{i}]"
        _require(isinstance(rec, dict) and "center" in rec and "size" in rec,
                 path, where, "needs center and size")
        box = Box3D(center=np.array(rec["center"], dtype=np.float64),
                    size=np.array(rec["size"], dtype=np.float64))
        out.append(Detection(box=box, label=str(rec.get("label", "object")),
                             score=float(rec.get("score", 1.0))))
    return out


def write_boxes(boxes: Sequence[Box3D], path,
                num_points: Sequence[int] | None = None) -> None:
    """Write class-agnostic boxes (optionally with their point counts)."""
    rows = []
    for i, box in enumerate(boxes):
        _check_box(box)
        if num_points is None:
            rows.append('{"center": %s, "size": %s}'
                        % (_vec6(box.center), _vec6(box.size)))
        else:
            rows.append('{"center": %s, "num_points": %d, "size": %s}'
                        % (_vec6(box.center), int(num_points[i]),
                           _vec6(box.size)))
    _dump_rows(rows, path)


def read_boxes(path) -> list[Box3D]:
    path = Path(path)
    if not path.is_file():
        raise SceneFormatError(path, "boxes", "file not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneFormatError(path, "boxes", f"invalid JSON: {e}") from e
    _require(isinstance(doc, list), path, "boxes", "must be a list")
    out = []
    for i, rec in enumerate(doc):
        where = f"boxes[{i}]"
        _require(isinstance(rec, dict) and "center" in rec and "size" in rec,
                 path, where, "needs center and size")
        out.append(Box3D(center=np.array(rec["center"], dtype=np.float64),
                         size=np.array(rec["size"], dtype=np.float64)))
    return out


def write_pseudo_labels(boxes: Sequence[Box3D], scene_id: str, path) -> Path:
    """Write class-agnostic boxes as pseudo detections for self-training.

    ``path`` may be a directory, in which case the file is named
    ``<scene_id>.json``. Every box gets label "object" and score 1.
    """
    target = Path(path)
    if target.is_dir():
        target = target / f"{scene_id}.json"
    detections = [Detection(box=b, label="object", score=1.0) for b in boxes]
    write_detections(detections, target)
    return target
