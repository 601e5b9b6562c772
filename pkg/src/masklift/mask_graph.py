"""Class-agnostic 3D detection by view-consensus mask-graph clustering.

Every 2D instance mask is lifted to a world-space point set and becomes a
graph node. For a pair of nodes, the frames where both are visible are the
observers; an observer frame supports the pair when one of its masks
contains the visible portions of both nodes. The consensus rate is the
supporter/observer ratio; pairs above a rate threshold are connected, and
the graph is merged over a schedule of minimum observer counts. Surviving
instances become tight axis-aligned boxes.

Containment is tested against the original per-frame masks in every
iteration; after a merge, a node's visibility and containment sets are
recomputed from scratch by re-projecting its merged point set. Pairwise
scoring parallelizes over a worker pool with results keyed by pair index,
so output is bit-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import (Box3D, VoxelHash, backproject_pixels, box_from_points,
                       visible_points)
from .scene_io import CameraFrame, InstanceMask2D, Scene, decode_rle


@dataclass(frozen=True)
class MergeConfig:
    """Thresholds of the clustering stage. Defaults follow the reference
    hyperparameters where published; the rest are documented choices."""

    tau_rate: float = 0.9
    observer_schedule: tuple[int, ...] = (1, 2, 3)
    tau_contain: float = 0.8
    contain_radius: float = 0.04  # meters
    min_points: int = 50
    min_mask_pixels: int = 100
    min_visible_points: int = 25
    tau_occ: float = 0.10  # meters
    workers: int = 1

    def __post_init__(self):
        if not (0.0 < self.tau_rate <= 1.0):
            raise ValueError("tau_rate must lie in (0, 1]")
        schedule = tuple(int(n) for n in self.observer_schedule)
        if not schedule or any(n < 1 for n in schedule):
            raise ValueError("observer schedule must be non-empty with n >= 1")
        if any(b < a for a, b in zip(schedule, schedule[1:])):
            raise ValueError("observer schedule must be non-decreasing")
        if not (0.0 < self.tau_contain <= 1.0):
            raise ValueError("tau_contain must lie in (0, 1]")
        if self.contain_radius <= 0 or self.tau_occ <= 0:
            raise ValueError("radii must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        object.__setattr__(self, "observer_schedule", schedule)


@dataclass
class MaskNode:
    """A (possibly merged) instance hypothesis.

    points is the union of the member masks' lifted points;
    visible_frames is F(m) and containing_masks is M(m), the original
    masks whose point clouds contain this node's visible portions.
    """

    node_id: int
    members: tuple[tuple[int, int], ...]  # (frame_id, mask_id), sorted
    points: np.ndarray  # (N, 3) world
    visible_frames: frozenset[int]
    containing_masks: frozenset[tuple[int, int]]

    def num_points(self) -> int:
        return self.points.shape[0]


@dataclass
class MaskGraph:
    nodes: list[MaskNode]
    # (node_id_a, node_id_b) with a < b -> (consensus rate, observer count)
    edges: dict[tuple[int, int], tuple[float, int]]
    context: "GraphContext" = field(repr=False)


class GraphContext:
    """Static per-scene data shared across merge iterations: frames, the
    original mask point clouds, and their voxel hashes."""

    def __init__(self, scene: Scene, config: MergeConfig):
        self.scene = scene
        self.config = config
        self.frames: tuple[CameraFrame, ...] = scene.frames
        self.lifted: dict[tuple[int, int], np.ndarray] = {}
        for mask in scene.masks:
            frame = scene.frame_by_id(mask.frame_id)
            pts = lift_mask(mask, frame)
            # live nodes must carry points, whatever the pixel floor is
            if pts.shape[0] >= max(config.min_mask_pixels, 1):
                self.lifted[(mask.frame_id, mask.mask_id)] = pts
        self.containers = {
            key: VoxelHash(pts, config.contain_radius)
            for key, pts in self.lifted.items()
        }
        by_frame: dict[int, list[tuple[int, int]]] = {}
        for key in sorted(self.lifted):
            by_frame.setdefault(key[0], []).append(key)
        self.container_keys_by_frame = by_frame


class UnionFind:
    """Disjoint sets with the minimum element as the representative."""

    def __init__(self):
        self.parent: dict[int, int] = {}

    def find(self, x: int) -> int:
        if x not in self.parent:
            self.parent[x] = x
            return x
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: int, y: int) -> None:
        rx, ry = self.find(x), self.find(y)
        target = min(rx, ry)
        self.parent[rx] = self.parent[ry] = target


def lift_mask(mask: InstanceMask2D, frame: CameraFrame) -> np.ndarray:
    """Backproject every mask pixel with valid depth to a world point."""
    if mask.frame_id != frame.id:
        raise ValueError(
            f"mask belongs to frame {mask.frame_id}, got frame {frame.id}")
    bitmap = decode_rle(mask.counts, mask.height, mask.width)
    keep = bitmap & (frame.depth > 0)
    vs, us = np.nonzero(keep)
    if us.size == 0:
        return np.empty((0, 3), dtype=np.float64)
    pixels = np.stack([us, vs], axis=1).astype(np.float64)
    return backproject_pixels(pixels, frame.depth[vs, us], frame)


def visible_portion(node: MaskNode, frame: CameraFrame,
                    tau_occ: float) -> np.ndarray:
    """Subset of node points passing the occlusion test in a frame."""
    idx, _ = visible_points(node.points, frame, tau_occ)
    return node.points[idx]


def contains(container_points, containee_points, tau_contain: float,
             contain_radius: float) -> bool:
    """Whether at least tau_contain of the containee points lie within
    contain_radius of some container point (voxel-hash accelerated)."""
    containee = np.asarray(containee_points, dtype=np.float64).reshape(-1, 3)
    if containee.shape[0] == 0:
        raise ValueError("containee must be non-empty")
    vh = VoxelHash(container_points, contain_radius)
    return vh.covered_fraction(containee, contain_radius) >= tau_contain


def consensus_rate(a: MaskNode, b: MaskNode) -> tuple[float, int]:
    """View consensus rate and observer count for a node pair.

    Observers are the co-visible frames; supporters are the frames
    contributing a mask that contains both nodes. Zero observers yields
    rate 0 by definition.
    """
    observers = a.visible_frames & b.visible_frames
    if not observers:
        return 0.0, 0
    shared = a.containing_masks & b.containing_masks
    supporter_frames = {frame_id for frame_id, _ in shared}
    return len(supporter_frames) / len(observers), len(observers)


def _frame_relations(points: np.ndarray, ctx: GraphContext):
    """Recompute F (visible frames) and M (containing original masks)."""
    cfg = ctx.config
    visible: set[int] = set()
    containing: set[tuple[int, int]] = set()
    for frame in ctx.frames:
        idx, _ = visible_points(points, frame, cfg.tau_occ)
        if idx.size < cfg.min_visible_points:
            continue
        visible.add(frame.id)
        portion = points[idx]
        for key in ctx.container_keys_by_frame.get(frame.id, ()):
            vh = ctx.containers[key]
            if vh.covered_fraction(portion, cfg.contain_radius) >= cfg.tau_contain:
                containing.add(key)
    return frozenset(visible), frozenset(containing)


def _run_indexed(tasks: Sequence, fn, workers: int) -> list:
    """Evaluate fn over tasks, returning results in task order regardless
    of worker count."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _candidate_pairs(nodes: Sequence[MaskNode]) -> list[tuple[int, int]]:
    """Index pairs of nodes sharing at least one visible frame."""
    by_frame: dict[int, list[int]] = {}
    for i, node in enumerate(nodes):
        for fid in node.visible_frames:
            by_frame.setdefault(fid, []).append(i)
    pairs: set[tuple[int, int]] = set()
    for members in by_frame.values():
        for ai in range(len(members)):
            for bi in range(ai + 1, len(members)):
                pairs.add((members[ai], members[bi]))
    return sorted(pairs)


def _compute_edges(nodes: Sequence[MaskNode], ctx: GraphContext,
                   reuse: dict[tuple[int, int], tuple[float, int]] | None = None,
                   changed: set[int] | None = None):
    """Edges (cr >= tau_rate) over all node pairs; pairs untouched by a
    merge may be copied from the previous edge map."""
    cfg = ctx.config
    pairs = _candidate_pairs(nodes)
    work: list[tuple[int, int]] = []
    edges: dict[tuple[int, int], tuple[float, int]] = {}
    for ai, bi in pairs:
        ida, idb = nodes[ai].node_id, nodes[bi].node_id
        key = (min(ida, idb), max(ida, idb))
        if (reuse is not None and changed is not None
                and ida not in changed and idb not in changed):
            if key in reuse:
                edges[key] = reuse[key]
            continue
        work.append((ai, bi))
    results = _run_indexed(
        work, lambda p: consensus_rate(nodes[p[0]], nodes[p[1]]), cfg.workers)
    for (ai, bi), (cr, observers) in zip(work, results):
        if cr >= cfg.tau_rate:
            ida, idb = nodes[ai].node_id, nodes[bi].node_id
            edges[(min(ida, idb), max(ida, idb))] = (cr, observers)
    return edges


def build_graph(scene: Scene, config: MergeConfig | None = None) -> MaskGraph:
    """Lift masks, compute visibility/containment, and connect pairs whose
    consensus rate reaches tau_rate."""
    cfg = config or MergeConfig()
    ctx = GraphContext(scene, cfg)
    keys = sorted(ctx.lifted)
    relations = _run_indexed(
        keys, lambda k: _frame_relations(ctx.lifted[k], ctx), cfg.workers)
    nodes = [
        MaskNode(node_id=i, members=(key,), points=ctx.lifted[key],
                 visible_frames=rel[0], containing_masks=rel[1])
        for i, (key, rel) in enumerate(zip(keys, relations))
    ]
    edges = _compute_edges(nodes, ctx)
    return MaskGraph(nodes=nodes, edges=edges, context=ctx)


def merge_step(graph: MaskGraph, n_k: int) -> MaskGraph:
    """One merge iteration: drop edges with fewer than n_k observers,
    collapse connected components, recompute relations and edges."""
    if n_k < 1:
        raise ValueError("n_k must be >= 1")
    ctx = graph.context
    uf = UnionFind()
    for node in graph.nodes:
        uf.find(node.node_id)
    for (ida, idb), (_, observers) in graph.edges.items():
        if observers >= n_k:
            uf.union(ida, idb)
    groups: dict[int, list[MaskNode]] = {}
    for node in graph.nodes:
        groups.setdefault(uf.find(node.node_id), []).append(node)

    new_nodes: list[MaskNode] = []
    changed: set[int] = set()
    merge_tasks: list[tuple[int, tuple, np.ndarray]] = []
    for root in sorted(groups):
        members = sorted(groups[root], key=lambda n: n.node_id)
        if len(members) == 1:
            new_nodes.append(members[0])
            continue
        points = np.concatenate([n.points for n in members], axis=0)
        member_masks = tuple(sorted(m for n in members for m in n.members))
        merge_tasks.append((root, member_masks, points))
        changed.add(root)
    relations = _run_indexed(
        merge_tasks, lambda t: _frame_relations(t[2], ctx),
        ctx.config.workers)
    for (root, member_masks, points), (vis, cont) in zip(merge_tasks, relations):
        new_nodes.append(MaskNode(node_id=root, members=member_masks,
                                  points=points, visible_frames=vis,
                                  containing_masks=cont))
    new_nodes.sort(key=lambda n: n.node_id)
    edges = _compute_edges(new_nodes, ctx, reuse=graph.edges, changed=changed)
    return MaskGraph(nodes=new_nodes, edges=edges, context=ctx)


def run_detection(scene: Scene,
                  config: MergeConfig | None = None) -> list[MaskNode]:
    """Full clustering pass; returns final instances ordered by descending
    point count, then node id."""
    cfg = config or MergeConfig()
    graph = build_graph(scene, cfg)
    for n_k in cfg.observer_schedule:
        graph = merge_step(graph, n_k)
    instances = [n for n in graph.nodes if n.num_points() >= cfg.min_points]
    instances.sort(key=lambda n: (-n.num_points(), n.node_id))
    return instances


def detect_class_agnostic(scene: Scene,
                          config: MergeConfig | None = None) -> list[Box3D]:
    """Class-agnostic boxes for a scene (tight box per merged instance)."""
    return [box_from_points(n.points) for n in run_detection(scene, config)]
