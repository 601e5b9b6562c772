import numpy as np
import pytest

from masklift.geometry import Box3D, box_from_points, iou3d
from masklift.mask_graph import (GraphContext, MaskNode, MergeConfig,
                                 build_graph, consensus_rate, contains,
                                 detect_class_agnostic, lift_mask, merge_step,
                                 run_detection, visible_portion)
from masklift.scene_io import CameraFrame, InstanceMask2D
from masklift.synthetic import (SyntheticObject, look_at_pose, make_scene,
                                ring_poses)

from fixture_utils import (MICRO_MERGE, SYNTHETIC_MERGE, oracle_consensus,
                           oracle_visible_indices, random_micro_scene)


def _node(node_id, frames, masks, points=None):
    if points is None:
        points = np.zeros((1, 3))
    return MaskNode(node_id=node_id, members=((0, node_id),), points=points,
                    visible_frames=frozenset(frames),
                    containing_masks=frozenset(masks))


# ---------------------------------------------------------------------------
# MergeConfig validation
# ---------------------------------------------------------------------------

def test_merge_config_validates():
    with pytest.raises(ValueError):
        MergeConfig(tau_rate=0.0)
    with pytest.raises(ValueError):
        MergeConfig(observer_schedule=())
    with pytest.raises(ValueError):
        MergeConfig(observer_schedule=(2, 1))
    with pytest.raises(ValueError):
        MergeConfig(workers=0)


# ---------------------------------------------------------------------------
# lift_mask
# ---------------------------------------------------------------------------

def test_lift_single_pixel_at_principal_point():
    depth = np.full((3, 5), 2.0)
    frame = CameraFrame(id=0, intrinsics=(1.0, 1.0, 2.0, 1.0),
                        world_to_camera=np.eye(4), depth=depth,
                        width=5, height=3)
    # pixel (u=2, v=1): column-major linear index 2*3 + 1 = 7
    mask = InstanceMask2D(frame_id=0, mask_id=0, height=3, width=5,
                          counts=(7, 1, 7))
    points = lift_mask(mask, frame)
    assert points.shape == (1, 3)
    assert np.allclose(points[0], (0.0, 0.0, 2.0), atol=1e-12)


def test_lift_all_invalid_depth_empty():
    frame = CameraFrame(id=0, intrinsics=(1.0, 1.0, 2.0, 1.0),
                        world_to_camera=np.eye(4), depth=np.zeros((3, 5)),
                        width=5, height=3)
    mask = InstanceMask2D(frame_id=0, mask_id=0, height=3, width=5,
                          counts=(0, 15))
    assert lift_mask(mask, frame).shape == (0, 3)


def test_lift_wrong_frame_rejected():
    frame = CameraFrame(id=1, intrinsics=(1.0, 1.0, 2.0, 1.0),
                        world_to_camera=np.eye(4), depth=np.ones((3, 5)),
                        width=5, height=3)
    mask = InstanceMask2D(frame_id=0, mask_id=0, height=3, width=5,
                          counts=(15,))
    with pytest.raises(ValueError, match="belongs to frame"):
        lift_mask(mask, frame)


def test_lift_planar_depth_points_on_plane():
    # slanted world plane n . X = c seen from a generic camera
    w, h = 40, 30
    fx = fy = 30.0
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    pose = look_at_pose((0.3, -0.2, 0.1), (0.1, 0.2, 2.5))
    normal = np.array([0.15, -0.1, 1.0])
    normal /= np.linalg.norm(normal)
    offset = 2.4
    rot = pose[:3, :3]
    origin = -rot.T @ pose[:3, 3]
    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    dirs = np.stack([(us - cx) / fx, (vs - cy) / fy, np.ones_like(us)],
                    axis=-1) @ rot
    t = (offset - normal @ origin) / (dirs @ normal)
    assert (t > 0).all()
    depth = t  # unit camera-space z direction component
    frame = CameraFrame(id=0, intrinsics=(fx, fy, cx, cy),
                        world_to_camera=pose, depth=depth, width=w, height=h)
    mask = InstanceMask2D(frame_id=0, mask_id=0, height=h, width=w,
                          counts=(0, w * h))
    points = lift_mask(mask, frame)
    assert points.shape == (w * h, 3)
    residual = np.abs(points @ normal - offset)
    assert residual.max() < 1e-6


# ---------------------------------------------------------------------------
# visible_portion
# ---------------------------------------------------------------------------

def test_visible_portion_own_frame_complete(cuboid_scene):
    scene, _ = cuboid_scene
    mask = scene.masks[0]
    frame = scene.frame_by_id(mask.frame_id)
    points = lift_mask(mask, frame)
    node = MaskNode(node_id=0, members=((mask.frame_id, mask.mask_id),),
                    points=points, visible_frames=frozenset(),
                    containing_masks=frozenset())
    portion = visible_portion(node, frame, tau_occ=0.04)
    assert portion.shape == points.shape  # every point sees itself


def test_visible_portion_camera_facing_away(cuboid_scene):
    scene, objects = cuboid_scene
    mask = scene.masks[0]
    frame = scene.frame_by_id(mask.frame_id)
    points = lift_mask(mask, frame)
    node = MaskNode(node_id=0, members=(), points=points,
                    visible_frames=frozenset(), containing_masks=frozenset())
    # camera at the scene center looking straight away from the object
    center = points.mean(axis=0)
    away = look_at_pose(center + np.array([0.0, 0.0, 5.0]),
                        center + np.array([0.0, 0.0, 10.0]))
    far_frame = CameraFrame(id=99, intrinsics=frame.intrinsics,
                            world_to_camera=away,
                            depth=np.zeros((frame.height, frame.width)),
                            width=frame.width, height=frame.height)
    assert visible_portion(node, far_frame, tau_occ=0.04).shape[0] == 0


def test_visibility_matches_scalar_oracle():
    scene, _ = random_micro_scene(123)
    cfg = MICRO_MERGE
    ctx = GraphContext(scene, cfg)
    for key in sorted(ctx.lifted)[:6]:
        points = ctx.lifted[key]
        for frame in scene.frames:
            from masklift.geometry import visible_points
            idx, _ = visible_points(points, frame, cfg.tau_occ)
            assert idx.tolist() == oracle_visible_indices(points, frame,
                                                          cfg.tau_occ)


# ---------------------------------------------------------------------------
# contains
# ---------------------------------------------------------------------------

def test_contains_identical_sets():
    pts = np.random.default_rng(0).uniform(-1, 1, (60, 3))
    assert contains(pts, pts, tau_contain=1.0, contain_radius=0.04)


def test_contains_distant_sets():
    pts = np.random.default_rng(1).uniform(-1, 1, (60, 3))
    assert not contains(pts, pts + 1.0, tau_contain=0.8, contain_radius=0.04)


def test_contains_boundary_fraction():
    rng = np.random.default_rng(2)
    container = rng.uniform(-1, 1, (100, 3))
    containee = np.concatenate([container[:80], container[80:] + 1.0])
    assert contains(container, containee, tau_contain=0.8,
                    contain_radius=0.04)
    assert not contains(container, containee, tau_contain=0.85,
                        contain_radius=0.04)


def test_contains_empty_containee_rejected():
    with pytest.raises(ValueError, match="non-empty"):
        contains(np.zeros((3, 3)), np.empty((0, 3)), 0.8, 0.04)


# ---------------------------------------------------------------------------
# consensus_rate
# ---------------------------------------------------------------------------

def test_consensus_self_containing_is_one():
    a = _node(0, frames=(0, 1), masks=((0, 0), (1, 3)))
    cr, observers = consensus_rate(a, a)
    assert cr == 1.0 and observers == 2


def test_consensus_no_covisibility():
    a = _node(0, frames=(0,), masks=((0, 0),))
    b = _node(1, frames=(1,), masks=((1, 0),))
    assert consensus_rate(a, b) == (0.0, 0)


def test_consensus_two_thirds():
    a = _node(0, frames=(0, 1, 2), masks=((0, 5), (1, 6)))
    b = _node(1, frames=(0, 1, 2), masks=((0, 5), (1, 6), (2, 9)))
    cr, observers = consensus_rate(a, b)
    assert observers == 3
    assert cr == 2.0 / 3.0


def test_consensus_symmetric_and_bounded(cuboid_graph):
    nodes = cuboid_graph.nodes
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            cr_ij = consensus_rate(nodes[i], nodes[j])
            cr_ji = consensus_rate(nodes[j], nodes[i])
            assert cr_ij == cr_ji
            assert 0.0 <= cr_ij[0] <= 1.0
            # supporters never exceed observers by construction
            shared = nodes[i].containing_masks & nodes[j].containing_masks
            supporter_frames = {f for f, _ in shared}
            observers = nodes[i].visible_frames & nodes[j].visible_frames
            assert supporter_frames <= observers


# ---------------------------------------------------------------------------
# build_graph / merge_step
# ---------------------------------------------------------------------------

def _single_object_scene(n_frames):
    objects = [SyntheticObject("box", Box3D(center=(0.0, 0.0, 0.4),
                                            size=(0.8, 0.8, 0.8)))]
    poses = ring_poses(n_frames, radius=2.5, height=1.6,
                       target=(0.0, 0.0, 0.4), phase=0.3)
    w, h = 64, 48
    intr = (0.9 * w, 0.9 * w, (w - 1) / 2.0, (h - 1) / 2.0)
    return make_scene(objects, poses, intr, w, h, scene_id="single")


def test_build_graph_single_mask():
    scene = _single_object_scene(1)
    graph = build_graph(scene, SYNTHETIC_MERGE)
    assert len(graph.nodes) == 1
    assert graph.edges == {}


def test_build_graph_edges_match_threshold(cuboid_graph):
    cfg = SYNTHETIC_MERGE
    graph = cuboid_graph
    by_id = {n.node_id: n for n in graph.nodes}
    ids = sorted(by_id)
    for i, ida in enumerate(ids):
        for idb in ids[i + 1:]:
            cr, _ = consensus_rate(by_id[ida], by_id[idb])
            assert ((ida, idb) in graph.edges) == (cr >= cfg.tau_rate)
    for key, (cr, observers) in graph.edges.items():
        expect = consensus_rate(by_id[key[0]], by_id[key[1]])
        assert (cr, observers) == expect


def test_same_object_complete_graph():
    scene = _single_object_scene(3)
    graph = build_graph(scene, SYNTHETIC_MERGE)
    assert len(graph.nodes) == 3
    assert set(graph.edges) == {(0, 1), (0, 2), (1, 2)}


def test_merge_step_high_observer_threshold_is_identity(cuboid_graph):
    graph = cuboid_graph
    merged = merge_step(graph, n_k=99)
    assert len(merged.nodes) == len(graph.nodes)
    assert [n.node_id for n in merged.nodes] == [n.node_id for n in graph.nodes]


def test_merge_step_two_nodes_union():
    scene = _single_object_scene(2)
    graph = build_graph(scene, SYNTHETIC_MERGE)
    assert len(graph.nodes) == 2 and len(graph.edges) == 1
    merged = merge_step(graph, n_k=1)
    assert len(merged.nodes) == 1
    node = merged.nodes[0]
    expected = np.concatenate([graph.nodes[0].points, graph.nodes[1].points])
    assert np.array_equal(node.points, expected)
    assert node.members == tuple(sorted(
        graph.nodes[0].members + graph.nodes[1].members))


def test_merge_invalid_nk():
    scene = _single_object_scene(2)
    graph = build_graph(scene, SYNTHETIC_MERGE)
    with pytest.raises(ValueError):
        merge_step(graph, 0)


def test_full_schedule_three_instances(detected_instances):
    assert len(detected_instances) == 3
    for node in detected_instances:
        assert len(node.members) == 8  # one mask per frame merged in


def test_detection_boxes_match_ground_truth(detected_instances, cuboid_scene):
    _, objects = cuboid_scene
    matched = set()
    for node in detected_instances:
        box = box_from_points(node.points)
        ious = [iou3d(box, o.box) for o in objects]
        best = int(np.argmax(ious))
        assert ious[best] >= 0.9
        matched.add(best)
    assert matched == {0, 1, 2}


def test_merge_monotone_and_partition(cuboid_graph):
    cfg = SYNTHETIC_MERGE
    graph = cuboid_graph
    original = sorted(m for n in graph.nodes for m in n.members)
    counts = [len(graph.nodes)]
    for n_k in cfg.observer_schedule:
        graph = merge_step(graph, n_k)
        counts.append(len(graph.nodes))
        merged_members = sorted(m for n in graph.nodes for m in n.members)
        assert merged_members == original  # partition of surviving masks
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_point_conservation(cuboid_graph):
    cfg = SYNTHETIC_MERGE
    graph = cuboid_graph

    def point_multiset(nodes):
        allpts = np.concatenate([n.points for n in nodes])
        return np.sort(allpts.view([("x", float), ("y", float), ("z", float)]),
                       axis=0)

    before = point_multiset(graph.nodes)
    for n_k in cfg.observer_schedule:
        graph = merge_step(graph, n_k)
    after = point_multiset(graph.nodes)
    assert np.array_equal(before, after)


def test_visible_frames_cover_member_frames(cuboid_graph):
    graph = cuboid_graph
    for n_k in SYNTHETIC_MERGE.observer_schedule:
        graph = merge_step(graph, n_k)
    for node in graph.nodes:
        member_frames = {f for f, _ in node.members}
        assert member_frames <= node.visible_frames


def test_detect_empty_scene():
    poses = ring_poses(2, radius=2.0, height=1.0, target=(0, 0, 0))
    scene = make_scene([], poses, (40.0, 40.0, 19.5, 14.5), 40, 30,
                       scene_id="empty")
    assert detect_class_agnostic(scene, SYNTHETIC_MERGE) == []


def test_min_points_filter(cuboid_scene):
    scene, _ = cuboid_scene
    cfg = MergeConfig(tau_occ=0.04, min_points=10 ** 9)
    assert detect_class_agnostic(scene, cfg) == []


def test_small_masks_dropped():
    scene = _single_object_scene(2)
    total_pixels = {m.pixel_count() for m in scene.masks}
    cfg = MergeConfig(tau_occ=0.04, min_mask_pixels=max(total_pixels) + 1)
    graph = build_graph(scene, cfg)
    assert graph.nodes == []


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------

def test_detection_deterministic_across_runs_and_workers(cuboid_scene):
    scene, _ = cuboid_scene
    base = run_detection(scene, SYNTHETIC_MERGE)
    again = run_detection(scene, SYNTHETIC_MERGE)
    parallel = run_detection(scene, MergeConfig(tau_occ=0.04, workers=4))
    for other in (again, parallel):
        assert len(other) == len(base)
        for n1, n2 in zip(base, other):
            assert n1.node_id == n2.node_id
            assert n1.members == n2.members
            assert np.array_equal(n1.points, n2.points)


# ---------------------------------------------------------------------------
# Consensus oracle on random micro-scenes (subset; full set in acceptance)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_consensus_matches_bruteforce_oracle(seed):
    scene, _ = random_micro_scene(seed)
    cfg = MICRO_MERGE
    graph = build_graph(scene, cfg)
    ctx = graph.context
    cache: dict = {}
    for i in range(len(graph.nodes)):
        for j in range(i + 1, len(graph.nodes)):
            a, b = graph.nodes[i], graph.nodes[j]
            cr, observers = consensus_rate(a, b)
            supporters, obs_oracle = oracle_consensus(
                a, b, scene, ctx.lifted, cfg, cache)
            assert observers == obs_oracle
            expected = supporters / obs_oracle if obs_oracle else 0.0
            assert cr == expected
