from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from masklift.mask_graph import run_detection
from masklift.geometry import box_from_points
from masklift.providers import FakeProvider
from masklift.scene_io import (load_scene, read_boxes, write_boxes,
                               write_scene, write_vocabulary_file)
from masklift.synthetic import three_cuboid_scene

from fixture_utils import (SYNTHETIC_LABEL, SYNTHETIC_MERGE,
                           closed_loop_embeddings, match_to_objects)

FAKE_SEED = 7


@pytest.fixture(scope="session")
def cuboid_scene():
    """In-memory synthetic scene plus its ground-truth objects."""
    return three_cuboid_scene()


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory, cuboid_scene):
    """The synthetic scene written to disk; returns the manifest path."""
    scene, _ = cuboid_scene
    out = tmp_path_factory.mktemp("scene")
    return write_scene(scene, out)


@pytest.fixture(scope="session")
def loaded_scene(scene_dir):
    return load_scene(scene_dir)


@pytest.fixture(scope="session")
def detected_instances(loaded_scene):
    return run_detection(loaded_scene, SYNTHETIC_MERGE)


@pytest.fixture(scope="session")
def cuboid_graph(cuboid_scene):
    """Built (pre-merge) mask graph of the synthetic scene; read-only."""
    from masklift.mask_graph import build_graph

    scene, _ = cuboid_scene
    return build_graph(scene, SYNTHETIC_MERGE)


@pytest.fixture(scope="session")
def detected_boxes(detected_instances, tmp_path_factory):
    """Detected boxes after one trip through the boxes file codec, which is
    exactly what the CLI label stage will read."""
    boxes = [box_from_points(n.points) for n in detected_instances]
    path = tmp_path_factory.mktemp("boxes") / "boxes.json"
    write_boxes(boxes, path, num_points=[n.num_points()
                                         for n in detected_instances])
    return read_boxes(path)


@pytest.fixture(scope="session")
def fixture_vocab(scene_dir, loaded_scene, detected_boxes, cuboid_scene):
    """Closed-loop vocabulary on disk: class i's text embedding equals the
    aggregated fake-crop embedding of the detection matched to object i.

    Returns (vocab_path, expected_labels) where expected_labels[j] is the
    ground-truth class name for detected box j.
    """
    _, objects = cuboid_scene
    provider = FakeProvider(seed=FAKE_SEED, dim=64)
    rows = closed_loop_embeddings(loaded_scene, detected_boxes, provider,
                                  SYNTHETIC_LABEL)
    matches = match_to_objects(detected_boxes, objects)
    assert sorted(matches) == [0, 1, 2], "each box should match one object"
    classes = [objects[m].name for m in matches]
    order = np.argsort(classes)  # stable class list independent of box order
    vocab_path = scene_dir.parent / "vocab.json"
    write_vocabulary_file(vocab_path, [classes[i] for i in order],
                          rows[order])
    expected = [objects[m].name for m in matches]
    return vocab_path, expected
