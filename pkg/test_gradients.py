"""
Analytic renderer gradients against central finite differences.

Thresholds are disabled (alpha_min = transmittance_min = 0) so the forward
map is smooth in every parameter; targets sit 0.05..0.3 away from the
rendered image so the L1 kinks are never crossed.
"""

import numpy as np
import pytest

from utils.gaussian_model import PARAM_GROUPS
from utils.losses import loss_feat_kl, loss_feat_kl_grad, loss_rgb_l1, loss_rgb_l1_grad
from utils.splat_renderer import RenderSettings, render, render_backward

SMOOTH = RenderSettings(alpha_min=0.0, transmittance_min=0.0)
STEP = 1e-4


def offset_target(rng, values):
    return values + rng.choice([-1.0, 1.0], values.shape) * rng.uniform(0.05, 0.3, values.shape)


def numeric_gradient(gmap, loss):
    numeric = {}
    for name in PARAM_GROUPS:
        values = getattr(gmap, name)
        grad = np.zeros_like(values)
        for i in range(values.size):
            plus = gmap.copy()
            getattr(plus, name).flat[i] += STEP
            minus = gmap.copy()
            getattr(minus, name).flat[i] -= STEP
            grad.flat[i] = (loss(plus) - loss(minus)) / (2.0 * STEP)
        numeric[name] = grad
    return numeric


def assert_gradients_match(analytic, numeric):
    for name, value in analytic.items():
        np.testing.assert_allclose(value, numeric[name], rtol=1e-3, atol=1e-7, err_msg=name)


@pytest.mark.parametrize("seed", range(20))
def test_rgb_and_feature_loss_gradients(seed, random_map, camera):
    rng = np.random.default_rng(seed)
    gmap = random_map(rng, int(rng.integers(1, 11)), feat_dim=3, log_scale=(0.15, 0.4))
    cam = camera(size=16, feat_size=8)
    base = render(gmap, cam, SMOOTH)
    target_rgb = offset_target(rng, base.rgb)
    target_feat = rng.normal(size=base.feat.shape)

    def loss(m):
        out = render(m, cam, SMOOTH)
        return loss_rgb_l1(out.rgb, target_rgb) + loss_feat_kl(out.feat, target_feat)[0]

    grads = render_backward(gmap, cam, base, grad_rgb=loss_rgb_l1_grad(base.rgb, target_rgb),
                            grad_feat=loss_feat_kl_grad(base.feat, target_feat), settings=SMOOTH)
    assert_gradients_match(dict(grads.items()), numeric_gradient(gmap, loss))


@pytest.mark.parametrize("seed", range(3))
def test_view_dependent_color_gradients(seed, random_map, camera):
    rng = np.random.default_rng(100 + seed)
    gmap = random_map(rng, 4, feat_dim=2, sh_degree=1, log_scale=(0.15, 0.4))
    cam = camera(size=16, feat_size=8)
    base = render(gmap, cam, SMOOTH)
    target_rgb = offset_target(rng, base.rgb)

    def loss(m):
        return loss_rgb_l1(render(m, cam, SMOOTH, render_features=False).rgb, target_rgb)

    grads = render_backward(gmap, cam, base, grad_rgb=loss_rgb_l1_grad(base.rgb, target_rgb), settings=SMOOTH)
    assert_gradients_match(dict(grads.items()), numeric_gradient(gmap, loss))


@pytest.mark.parametrize("seed", range(3))
def test_depth_opacity_and_background_gradients(seed, random_map, camera):
    rng = np.random.default_rng(200 + seed)
    settings = RenderSettings(alpha_min=0.0, transmittance_min=0.0, background=(0.3, 0.2, 0.1))
    gmap = random_map(rng, 5, feat_dim=1, log_scale=(0.2, 0.5))
    cam = camera(size=16)
    base = render(gmap, cam, settings)
    g_rgb = rng.normal(size=base.rgb.shape)
    g_opacity = rng.normal(size=base.opacity.shape)
    g_depth = rng.normal(size=base.depth.shape) * (base.opacity > 0.2)

    def loss(m):
        out = render(m, cam, settings)
        return float(np.sum(g_rgb * out.rgb) + np.sum(g_opacity * out.opacity) + np.sum(g_depth * out.depth))

    grads = render_backward(gmap, cam, base, grad_rgb=g_rgb, grad_depth=g_depth, grad_opacity=g_opacity,
                            settings=settings)
    numeric = numeric_gradient(gmap, loss)
    for name in ("mu", "q", "log_s", "alpha_logit", "sh"):
        np.testing.assert_allclose(getattr(grads, name), numeric[name], rtol=1e-3, atol=1e-6, err_msg=name)
