import numpy as np
import pytest

from sidecar.backend import BackendError, FakeBackend, connected_components
from sidecar.rle import decode, encode


def test_blank_image_no_masks():
    assert connected_components(np.zeros((8, 10, 3), dtype=np.uint8)) == []


def test_two_rectangle_test_card():
    card = np.zeros((12, 16, 3), dtype=np.uint8)
    card[2:6, 1:6] = (200, 30, 30)
    card[7:11, 9:15] = (30, 30, 200)
    masks = connected_components(card)
    assert len(masks) == 2
    # largest first: the 6x4 rectangle, then the 5x4 one
    want_big = np.zeros((12, 16), dtype=bool)
    want_big[7:11, 9:15] = True
    want_small = np.zeros((12, 16), dtype=bool)
    want_small[2:6, 1:6] = True
    assert np.array_equal(masks[0], want_big)
    assert np.array_equal(masks[1], want_small)


def test_touching_different_colors_stay_separate():
    card = np.zeros((6, 8, 3), dtype=np.uint8)
    card[:, 0:4] = (10, 10, 10)
    card[:, 4:8] = (20, 20, 20)
    masks = connected_components(card)
    assert len(masks) == 2
    assert int(masks[0].sum()) == int(masks[1].sum()) == 24


def test_same_color_disconnected_regions_split():
    card = np.zeros((6, 8, 3), dtype=np.uint8)
    card[1:3, 1:3] = (99, 0, 0)
    card[4:6, 5:7] = (99, 0, 0)
    assert len(connected_components(card)) == 2


def test_masks_pairwise_disjoint_and_deterministic():
    rng = np.random.default_rng(0)
    card = (rng.integers(0, 3, (20, 24, 3)) * 90).astype(np.uint8)
    a = connected_components(card)
    b = connected_components(card)
    assert len(a) == len(b)
    occupancy = np.zeros(card.shape[:2], dtype=bool)
    for m1, m2 in zip(a, b):
        assert np.array_equal(m1, m2)
        assert not (occupancy & m1).any()
        occupancy |= m1


def test_refine_mask_fills_prompt_bbox():
    backend = FakeBackend(seed=0, dim=8)
    mask = backend.refine_mask(10, 6, (2, 1, 4, 3))
    assert mask.shape == (6, 10)
    assert int(mask.sum()) == 3 * 3
    assert mask[1:4, 2:5].all()


def test_refine_mask_rejects_outside_bbox():
    backend = FakeBackend(seed=0, dim=8)
    with pytest.raises(BackendError) as err:
        backend.refine_mask(10, 6, (50, 50, 60, 60))
    assert err.value.code == "BOX"


def test_embeddings_unit_norm_and_keyed():
    backend = FakeBackend(seed=4, dim=32)
    chair, table = backend.embed_text(["chair", "table"])
    assert abs(sum(v * v for v in chair) - 1.0) < 1e-9
    assert chair != table
    assert backend.embed_text(["chair"])[0] == chair
    crop_a = backend.embed_crop(0, (1, 2, 3, 4), 0)
    crop_b = backend.embed_crop(0, (1, 2, 3, 4), 1)
    assert crop_a != crop_b  # scale index is part of the key


def test_rle_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(200):
        h, w = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        bitmap = rng.random((h, w)) < 0.4
        runs = encode(bitmap)
        assert np.array_equal(decode(runs, h, w), bitmap)
        assert all(r > 0 for r in runs[1:])
