from dataclasses import replace

import numpy as np
import pytest

from utils.errors import SceneModelError
from utils.synth_world import (
    NUM_CLASSES, SceneSpec, base_trajectory, build_scene, class_embedding, generate_dataset, quantize_image,
)

TINY = SceneSpec(
    seed=3, num_traversals=2, frames_per_traversal=2, image_height=24, image_width=32, feat_height=12,
    feat_width=16, street_length=14.0, cell=0.5, transient_count_range=(1, 2), transient_z_range=(3.0, 9.0),
    seed_count=200,
)


def test_same_seed_gives_identical_scene():
    env_a, tr_a = build_scene(TINY)
    env_b, tr_b = build_scene(TINY)
    assert env_a.equals(env_b)
    assert all(a.equals(b) for a, b in zip(tr_a, tr_b))


def test_no_transients_gives_empty_traversal_maps():
    _, transients = build_scene(replace(TINY, transient_count_range=(0, 0)))
    assert len(transients) == 2
    assert all(len(t) == 0 for t in transients)


def test_environment_does_not_depend_on_traversal_count():
    env_one, _ = build_scene(replace(TINY, num_traversals=1))
    env_ten, transients = build_scene(replace(TINY, num_traversals=10, transient_count_range=(3, 3),
                                                transient_z_range=(3.0, 30.0)))
    assert env_one.equals(env_ten)
    assert len(transients) == 10
    assert all(len(t) > 0 for t in transients)
    assert not np.array_equal(transients[0].mu.mean(axis=0), transients[1].mu.mean(axis=0))


def test_static_transient_repeats_across_traversals():
    _, transients = build_scene(replace(TINY, transient_count_range=(1, 1), static_transient_prob=1.0))
    assert transients[0].equals(transients[1])


def test_infeasible_placement_is_rejected():
    with pytest.raises(SceneModelError, match="infeasible"):
        build_scene(replace(TINY, transient_count_range=(1, 1), transient_x_range=(1.0, 1.2)))


def test_feature_dim_must_cover_material_classes():
    with pytest.raises(SceneModelError, match="material classes"):
        replace(TINY, feat_dim=NUM_CLASSES - 1).validate()
    replace(TINY, feat_dim=NUM_CLASSES - 1, allow_class_collisions=True).validate()


def test_class_embeddings_are_separable():
    rng = np.random.default_rng(0)
    feats = class_embedding(np.repeat([0, 3], 500), 8, 0.05, rng)
    gap = np.linalg.norm(feats[:500].mean(axis=0) - feats[500:].mean(axis=0))
    assert gap > 5 * 0.05


def test_quantized_image_sits_on_byte_grid():
    image = quantize_image(np.random.default_rng(1).uniform(-0.2, 1.2, (4, 4, 3)))
    np.testing.assert_array_equal(image * 255.0, np.round(image * 255.0))
    assert image.min() >= 0.0 and image.max() <= 1.0


def test_base_trajectory_length():
    assert len(base_trajectory(TINY)) == TINY.frames_per_traversal


@pytest.fixture(scope="module")
def generated():
    return generate_dataset(TINY)


def test_generated_dataset_layout(generated):
    dataset, gt = generated
    assert len(dataset) == 4
    assert dataset.num_traversals == 2
    assert len(gt) == 4
    assert [f.name for f in dataset.frames][:2] == ["traversal_0/frame_0", "traversal_0/frame_1"]
    for frame in dataset.frames:
        assert frame.image.shape == (24, 32, 3)
        assert frame.feat_map.shape == (12, 16, TINY.feat_dim)
        assert frame.gt_mask.shape == (24, 32)
        assert frame.sky_mask.dtype == bool
    assert len(gt.seed_points) == 200
    assert dataset.extra["scene_seed"] == 3


def test_background_matches_image_outside_transients(generated):
    dataset, gt = generated
    for frame, background, mask in zip(dataset.frames, gt.backgrounds, gt.transient_masks):
        np.testing.assert_array_equal(background[~mask], frame.image[~mask])


def test_generation_is_deterministic(generated):
    dataset, gt = generated
    again, gt_again = generate_dataset(TINY)
    for a, b in zip(dataset.frames, again.frames):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.feat_map, b.feat_map)
    np.testing.assert_array_equal(gt.seed_points, gt_again.seed_points)


def test_parallel_generation_matches_serial(generated):
    dataset, _ = generated
    parallel, _ = generate_dataset(replace(TINY, workers=3))
    for a, b in zip(dataset.frames, parallel.frames):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.gt_mask, b.gt_mask)
