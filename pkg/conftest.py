import numpy as np
import pytest

from utils.gaussian_model import (
    Camera, CameraIntrinsics, CameraPose, GaussianMap, logit, rgb_to_sh0, sh_coeff_count,
)


def build_random_map(rng, n, feat_dim=3, sh_degree=0, depth=(2.0, 4.0), spread=0.4, log_scale=(0.1, 0.4),
                     opacity=(0.2, 0.85)):
    """Gaussians in front of an identity camera, projected well inside a square image."""
    z = rng.uniform(*depth, n)
    mu = np.stack([rng.uniform(-spread, spread, n) * z, rng.uniform(-spread, spread, n) * z, z], axis=1)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    log_s = np.log(rng.uniform(*log_scale, (n, 3)))
    alpha_logit = logit(rng.uniform(*opacity, n))
    sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(rng.uniform(0.2, 0.8, (n, 3)))
    if sh_degree:
        sh[:, 1:, :] = rng.uniform(-0.1, 0.1, (n, 3, 3))
    feat = rng.normal(size=(n, feat_dim))
    return GaussianMap(mu, q, log_s, alpha_logit, sh, feat, sh_degree, feat_dim)


def build_camera(size=16, focal=None, feat_size=None, pose=None):
    height, width = (size, size) if np.isscalar(size) else size
    f = float(focal if focal is not None else width)
    intr = CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    fh, fw = (None, None) if feat_size is None else ((feat_size, feat_size) if np.isscalar(feat_size) else feat_size)
    return Camera(pose or CameraPose.identity(), intr, fh, fw)


@pytest.fixture
def random_map():
    return build_random_map


@pytest.fixture
def camera():
    return build_camera
