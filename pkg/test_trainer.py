import numpy as np
import pytest

from utils.errors import NonFiniteGradientError, TrainingError
from utils.gaussian_model import Frame, GaussianMap, MultitraverseDataset, logit
from utils.losses import loss_rgb_l1
from utils.splat_renderer import GradientBuffer, render
from utils.trainer import (
    DensifyConfig, LearningRates, OptimizerState, TrainingSettings, adam_step, densify_and_prune, prune,
    reset_opacity, train_distill, train_env,
)

from conftest import build_camera, build_random_map


def one_gaussian(log_s=(np.log(0.05), np.log(0.02), np.log(0.02)), opacity=0.5):
    return GaussianMap(
        mu=np.array([[0.0, 0.0, 3.0]]), q=np.array([[1.0, 0.0, 0.0, 0.0]]), log_s=np.array([log_s], dtype=float),
        alpha_logit=np.array([logit(opacity)]), sh=np.zeros((1, 1, 3)), feat=np.zeros((1, 2)),
        sh_degree=0, feat_dim=2,
    )


def dataset_from(true_map, cameras):
    frames = []
    for j, cam in enumerate(cameras):
        out = render(true_map, cam)
        frames.append(Frame(image=out.rgb, pose=cam.pose, intrinsics=cam.intrinsics, traversal_id=0, frame_id=j,
                            feat_map=out.feat))
    return MultitraverseDataset(frames, 1, true_map.mu.copy(), np.full((len(true_map), 3), 0.5))


def quiet_settings(**lrs):
    return TrainingSettings(lrs=LearningRates(**lrs), densify=DensifyConfig(from_step=10_000, until_step=10_000),
                            progress=False)


def test_adam_zero_gradient_is_a_no_op():
    gmap = build_random_map(np.random.default_rng(0), 6)
    before = gmap.copy()
    state = OptimizerState.for_map(gmap)
    adam_step(gmap, GradientBuffer.zeros_like(gmap), state)
    for name, value in before.params().items():
        np.testing.assert_allclose(getattr(gmap, name), value, atol=1e-12, err_msg=name)
    assert state.step == 1


def test_adam_first_step_moves_by_learning_rate():
    gmap = one_gaussian()
    gmap.alpha_logit[:] = 1.0
    grads = GradientBuffer.zeros_like(gmap)
    grads.alpha_logit[:] = 2.0 * gmap.alpha_logit
    adam_step(gmap, grads, OptimizerState.for_map(gmap, LearningRates(alpha_logit=0.1)))
    assert gmap.alpha_logit[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_keeps_quaternions_normalized():
    rng = np.random.default_rng(1)
    gmap = build_random_map(rng, 5)
    grads = GradientBuffer.zeros_like(gmap)
    grads.q[:] = rng.normal(size=grads.q.shape)
    state = OptimizerState.for_map(gmap, LearningRates(q=0.3))
    for _ in range(3):
        adam_step(gmap, grads, state)
    np.testing.assert_allclose(np.linalg.norm(gmap.q, axis=1), 1.0, atol=1e-12)


def test_adam_rejects_non_finite_gradient():
    gmap = build_random_map(np.random.default_rng(2), 4)
    grads = GradientBuffer.zeros_like(gmap)
    grads.mu[2, 0] = np.nan
    with pytest.raises(NonFiniteGradientError) as info:
        adam_step(gmap, grads, OptimizerState.for_map(gmap))
    assert info.value.index == 2
    assert info.value.group == "mu"


def test_frozen_group_is_not_updated():
    gmap = build_random_map(np.random.default_rng(3), 3)
    feat = gmap.feat.copy()
    grads = GradientBuffer.zeros_like(gmap)
    grads.feat[:] = 1.0
    adam_step(gmap, grads, OptimizerState.for_map(gmap, frozen=("feat",)))
    np.testing.assert_array_equal(gmap.feat, feat)


def test_mu_learning_rate_decays_log_linearly():
    state = OptimizerState.for_map(one_gaussian(), LearningRates(mu_init=1e-2, mu_final=1e-4), max_steps=10,
                                   extent=2.0)
    assert state.learning_rate("mu") == pytest.approx(2e-2)
    state.step = 5
    assert state.learning_rate("mu") == pytest.approx(2e-3)
    state.step = 10
    assert state.learning_rate("mu") == pytest.approx(2e-4)


def test_densify_without_gradients_changes_nothing():
    gmap = build_random_map(np.random.default_rng(4), 7)
    out, source = densify_and_prune(gmap, np.zeros(7), DensifyConfig())
    assert out.equals(gmap)
    np.testing.assert_array_equal(source, np.arange(7))


def test_small_gaussian_is_cloned_along_its_major_axis():
    gmap = one_gaussian()
    out, source = densify_and_prune(gmap, np.array([1e-3]), DensifyConfig())
    assert len(out) == 2
    np.testing.assert_array_equal(out.mu[0], gmap.mu[0])
    np.testing.assert_allclose(out.mu[1], gmap.mu[0] + [0.05, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(out.log_s[1], gmap.log_s[0])
    np.testing.assert_array_equal(source, [0, -1])


def test_large_gaussian_is_split_into_two_smaller_children():
    gmap = one_gaussian(log_s=(np.log(0.5), np.log(0.2), np.log(0.2)))
    out, source = densify_and_prune(gmap, np.array([1e-3]), DensifyConfig())
    assert len(out) == 2
    np.testing.assert_allclose(out.scales, np.tile(np.array([0.5, 0.2, 0.2]) / 1.6, (2, 1)), rtol=1e-12)
    np.testing.assert_allclose(np.sort(out.mu[:, 0]), [-0.25, 0.25], atol=1e-12)
    np.testing.assert_array_equal(source, [-1, -1])


def test_growth_respects_gaussian_budget():
    gmap = build_random_map(np.random.default_rng(5), 4, log_scale=(0.01, 0.05))
    out, _ = densify_and_prune(gmap, np.array([1.0, 2.0, 3.0, 4.0]), DensifyConfig(max_gaussians=6))
    assert len(out) == 6


def test_prune_never_empties_the_map():
    gmap = build_random_map(np.random.default_rng(6), 5, opacity=(0.001, 0.004))
    out, _ = densify_and_prune(gmap, np.zeros(5), DensifyConfig())
    assert len(out) == 1
    kept, index = prune(gmap, 0.005)
    assert len(kept) == 1
    assert index[0] == np.argmax(gmap.alpha_logit)


def test_densify_rejects_mismatched_accumulator():
    with pytest.raises(TrainingError, match="accumulator"):
        densify_and_prune(one_gaussian(), np.zeros(3), DensifyConfig())


def test_reset_opacity_only_lowers():
    gmap = build_random_map(np.random.default_rng(7), 4, opacity=(0.01, 0.9))
    before = gmap.opacity.copy()
    reset_opacity(gmap, 0.05)
    np.testing.assert_allclose(gmap.opacity, np.minimum(before, 0.05), rtol=1e-9)


def test_optimizer_moments_follow_topology_change():
    gmap = build_random_map(np.random.default_rng(8), 3)
    state = OptimizerState.for_map(gmap)
    state.m["mu"][:] = [[1.0] * 3, [2.0] * 3, [3.0] * 3]
    state.reindex(np.array([2, 0, -1]))
    np.testing.assert_array_equal(state.m["mu"][:, 0], [3.0, 1.0, 0.0])


def test_distill_with_zero_steps_returns_initial_map():
    rng = np.random.default_rng(9)
    true_map = build_random_map(rng, 6, feat_dim=2)
    dataset = dataset_from(true_map, [build_camera(size=16, feat_size=8)])
    out, residuals = train_distill(true_map, dataset, steps=0, settings=quiet_settings())
    assert out.equals(true_map)
    assert len(residuals) == 1
    np.testing.assert_allclose(residuals[0].values, 0.0, atol=1e-12)


def test_distill_requires_feature_maps():
    cam = build_camera(size=8)
    frame = Frame(image=np.zeros((8, 8, 3)), pose=cam.pose, intrinsics=cam.intrinsics, traversal_id=0)
    dataset = MultitraverseDataset([frame], 1, np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(TrainingError, match="feature map"):
        train_distill(one_gaussian(), dataset, steps=1, settings=quiet_settings())


def test_distill_reduces_color_error():
    rng = np.random.default_rng(10)
    true_map = build_random_map(rng, 8, feat_dim=2, log_scale=(0.15, 0.35), opacity=(0.6, 0.9))
    dataset = dataset_from(true_map, [build_camera(size=16, feat_size=8)])
    start = true_map.copy()
    start.sh[:] = 0.0
    settings = quiet_settings(mu_init=0.0, mu_final=0.0, q=0.0, log_s=0.0, alpha_logit=0.0, sh=0.05, feat=0.0)
    frame = dataset.frames[0]
    before = loss_rgb_l1(render(start, frame.camera).rgb, frame.image)
    out, _ = train_distill(start, dataset, steps=60, settings=settings)
    after = loss_rgb_l1(render(out, frame.camera).rgb, frame.image)
    assert after < 0.5 * before


@pytest.mark.slow
def test_distill_rgb_loss_falls_window_by_window():
    rng = np.random.default_rng(14)
    true_map = build_random_map(rng, 20, feat_dim=2)
    dataset = dataset_from(true_map, [build_camera(size=16, feat_size=8)])
    start = true_map.copy()
    start.sh[:] = 0.0
    history = []
    train_distill(start, dataset, steps=500, settings=TrainingSettings(log_every=1, progress=False),
                  history=history)
    rgb = np.array([record["rgb"] for record in history])
    assert len(rgb) == 500
    windows = rgb.reshape(10, 50).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows


def test_env_with_everything_masked_leaves_map_unchanged():
    rng = np.random.default_rng(11)
    true_map = build_random_map(rng, 5, feat_dim=2)
    dataset = dataset_from(true_map, [build_camera(size=16, feat_size=8)])
    start = true_map.copy()
    start.sh[:] = 0.0
    start.alpha_logit[0] = logit(0.003)
    masks = [np.ones((16, 16), dtype=bool)]
    # long enough to reach the default pruning window
    out = train_env(start, dataset, masks, steps=500, settings=TrainingSettings(progress=False))
    assert len(out) == len(start)
    for name, value in start.params().items():
        np.testing.assert_allclose(getattr(out, name), value, atol=1e-12, err_msg=name)


def test_env_rejects_wrong_mask_count():
    true_map = build_random_map(np.random.default_rng(12), 3, feat_dim=2)
    dataset = dataset_from(true_map, [build_camera(size=16, feat_size=8)])
    with pytest.raises(TrainingError, match="2 masks for 1 frames"):
        train_env(true_map, dataset, [np.zeros((16, 16), bool)] * 2, steps=1, settings=quiet_settings())


def test_env_keeps_features_frozen():
    rng = np.random.default_rng(13)
    true_map = build_random_map(rng, 5, feat_dim=2)
    dataset = dataset_from(true_map, [build_camera(size=16, feat_size=8)])
    start = true_map.copy()
    start.sh[:] = 0.0
    history = []
    out = train_env(start, dataset, [np.zeros((16, 16), bool)], steps=3,
                    settings=TrainingSettings(log_every=1, progress=False), history=history)
    np.testing.assert_array_equal(out.feat, start.feat)
    assert [r["step"] for r in history] == [1, 2, 3]
    assert all(r["stage"] == "env" for r in history)
