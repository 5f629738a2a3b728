"""
Rendering losses and their gradients w.r.t. the rendered buffers.

Every loss comes with a `*_grad` companion so the trainer can feed the
renderer's backward pass without an autodiff framework.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from constants.defaults import LAMBDA_DEPTH, LAMBDA_FEAT, LAMBDA_RGB, LAMBDA_SKY
from utils.errors import ShapeMismatchError, TrainingError

logger = logging.getLogger(__name__)


@dataclass
class ResidualMap:
    """Per-pixel feature-rendering loss of one frame at feature resolution."""

    values: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise TrainingError(f"residual map {self.frame_id} must be 2-D, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise TrainingError(f"residual map {self.frame_id} has negative or non-finite values")


@dataclass
class LossWeights:
    rgb: float = LAMBDA_RGB
    feat: float = LAMBDA_FEAT
    depth: float = LAMBDA_DEPTH
    sky: float = LAMBDA_SKY

    def validate(self) -> None:
        for name, value in self.as_dict().items():
            if value < 0:
                raise TrainingError(f"loss weight '{name}' must be non-negative, got {value}")

    def as_dict(self) -> Dict[str, float]:
        return {"rgb": self.rgb, "feat": self.feat, "depth": self.depth, "sky": self.sky}


@dataclass
class LossReport:
    total: float
    rgb: float = 0.0
    feat: float = 0.0
    depth_smooth: float = 0.0
    sky: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    @classmethod
    def combine(cls, weights: LossWeights, rgb: float = 0.0, feat: float = 0.0, depth_smooth: float = 0.0,
                sky: float = 0.0) -> "LossReport":
        total = weights.rgb * rgb + weights.feat * feat + weights.depth * depth_smooth + weights.sky * sky
        return cls(total=total, rgb=rgb, feat=feat, depth_smooth=depth_smooth, sky=sky, weights=weights)

    def as_record(self) -> Dict[str, float]:
        return {"total": self.total, "rgb": self.rgb, "feat": self.feat, "depth": self.depth_smooth, "sky": self.sky}


def _check_shapes(what: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(what, b.shape, a.shape)


def _rgb_weight(rendered: np.ndarray, weight: Optional[np.ndarray]) -> np.ndarray:
    if weight is None:
        return np.ones(rendered.shape[:2])
    weight = np.asarray(weight, dtype=np.float64)
    _check_shapes("rgb loss weight", weight, np.empty(rendered.shape[:2]))
    return weight


def loss_rgb_l1(rendered: np.ndarray, target: np.ndarray, weight: Optional[np.ndarray] = None) -> float:
    """Weighted mean absolute error, normalised by sum(weight) * channels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes("rgb loss", rendered, target)
    w = _rgb_weight(rendered, weight)
    norm = w.sum() * rendered.shape[2]
    if norm <= 0:
        return 0.0
    return float(np.sum(w[..., None] * np.abs(rendered - target)) / norm)


def loss_rgb_l1_grad(rendered: np.ndarray, target: np.ndarray, weight: Optional[np.ndarray] = None) -> np.ndarray:
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes("rgb loss", rendered, target)
    w = _rgb_weight(rendered, weight)
    norm = w.sum() * rendered.shape[2]
    if norm <= 0:
        return np.zeros_like(rendered)
    return w[..., None] * np.sign(rendered - target) / norm


def loss_feat_kl(rendered_feat: np.ndarray, target_feat: np.ndarray, frame_id: str = "") -> Tuple[float, ResidualMap]:
    """KL(softmax(target) || softmax(rendered)) per pixel; returns the mean and the per-pixel map."""
    rendered_feat = np.asarray(rendered_feat, dtype=np.float64)
    target_feat = np.asarray(target_feat, dtype=np.float64)
    _check_shapes("feature loss", rendered_feat, target_feat)
    log_t = log_softmax(target_feat, axis=-1)
    log_r = log_softmax(rendered_feat, axis=-1)
    residual = np.sum(np.exp(log_t) * (log_t - log_r), axis=-1)
    # Gibbs' inequality; rounding can leave tiny negatives
    residual = np.maximum(residual, 0.0)
    return float(residual.mean()), ResidualMap(residual, frame_id)


def loss_feat_kl_grad(rendered_feat: np.ndarray, target_feat: np.ndarray) -> np.ndarray:
    rendered_feat = np.asarray(rendered_feat, dtype=np.float64)
    target_feat = np.asarray(target_feat, dtype=np.float64)
    _check_shapes("feature loss", rendered_feat, target_feat)
    n_pixels = rendered_feat.shape[0] * rendered_feat.shape[1]
    return (softmax(rendered_feat, axis=-1) - softmax(target_feat, axis=-1)) / n_pixels


def _edge_weights(image: np.ndarray):
    wx = np.exp(-np.sum(np.abs(image[:-1, 1:] - image[:-1, :-1]), axis=-1))
    wy = np.exp(-np.sum(np.abs(image[1:, :-1] - image[:-1, :-1]), axis=-1))
    return wx, wy


def loss_depth_smooth(inv_depth: np.ndarray, image: np.ndarray) -> float:
    """Edge-aware disparity smoothness over the interior (last row and column excluded)."""
    D = np.asarray(inv_depth, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    _check_shapes("depth smoothness", D, np.empty(image.shape[:2]))
    if D.shape[0] < 2 or D.shape[1] < 2:
        return 0.0
    wx, wy = _edge_weights(image)
    dx = D[:-1, 1:] - D[:-1, :-1]
    dy = D[1:, :-1] - D[:-1, :-1]
    return float(np.sum(np.abs(dx) * wx + np.abs(dy) * wy) / wx.size)


def loss_depth_smooth_grad(inv_depth: np.ndarray, image: np.ndarray) -> np.ndarray:
    D = np.asarray(inv_depth, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    grad = np.zeros_like(D)
    if D.shape[0] < 2 or D.shape[1] < 2:
        return grad
    wx, wy = _edge_weights(image)
    gx = np.sign(D[:-1, 1:] - D[:-1, :-1]) * wx / wx.size
    gy = np.sign(D[1:, :-1] - D[:-1, :-1]) * wy / wx.size
    grad[:-1, 1:] += gx
    grad[:-1, :-1] -= gx
    grad[1:, :-1] += gy
    grad[:-1, :-1] -= gy
    return grad


def loss_sky(opacity: np.ndarray, sky_mask: np.ndarray) -> float:
    """Mean |M_sky - (1 - O)|: opacity pushed to 0 on sky and to 1 elsewhere."""
    opacity = np.asarray(opacity, dtype=np.float64)
    sky = np.asarray(sky_mask).astype(np.float64)
    _check_shapes("sky loss", opacity, sky)
    return float(np.mean(np.abs(sky - (1.0 - opacity))))


def loss_sky_grad(opacity: np.ndarray, sky_mask: np.ndarray) -> np.ndarray:
    opacity = np.asarray(opacity, dtype=np.float64)
    sky = np.asarray(sky_mask).astype(np.float64)
    _check_shapes("sky loss", opacity, sky)
    return np.sign(sky - 1.0 + opacity) / opacity.size


def disparity_from_depth(depth: np.ndarray, sky_mask: Optional[np.ndarray], eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Disparity 1/depth with sky (and uncovered) pixels at 0; also returns d(disparity)/d(depth)."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > eps
    if sky_mask is not None:
        valid &= ~np.asarray(sky_mask, dtype=bool)
    safe = np.where(valid, depth, 1.0)
    disparity = np.where(valid, 1.0 / safe, 0.0)
    ddepth = np.where(valid, -1.0 / (safe * safe), 0.0)
    return disparity, ddepth
