"""
PCA compression of high-dimensional feature maps at ingestion time.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from sklearn.decomposition import PCA

from utils.errors import PcaError
from utils.gaussian_model import Frame, MultitraverseDataset

logger = logging.getLogger(__name__)


@dataclass
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray

    @property
    def source_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def target_dim(self) -> int:
        return self.basis.shape[1]

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.source_dim:
            raise PcaError(f"features have {features.shape[-1]} channels, model expects {self.source_dim}")
        return (features - self.mean) @ self.basis

    def inverse_transform(self, reduced: np.ndarray) -> np.ndarray:
        return np.asarray(reduced, dtype=np.float64) @ self.basis.T + self.mean

    def save(self, path: str) -> None:
        np.savez(path, mean=self.mean, basis=self.basis)

    @classmethod
    def load(cls, path: str) -> "PcaModel":
        with np.load(path) as data:
            return cls(mean=data["mean"], basis=data["basis"])


def pca_fit_transform(features: np.ndarray, d: int) -> Tuple[PcaModel, np.ndarray]:
    """Fit a d-component PCA; each basis column's largest-magnitude entry is made positive."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise PcaError(f"expected an N x D sample matrix, got shape {features.shape}")
    n, D = features.shape
    if d >= n or d > D or d < 1:
        raise PcaError(f"cannot reduce {n} samples of dimension {D} to {d} components")
    if not np.all(np.isfinite(features)):
        raise PcaError("features contain non-finite values")

    pca = PCA(n_components=d, svd_solver="full")
    pca.fit(features)
    basis = pca.components_.T.copy()
    pivot = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivot, np.arange(d)])
    signs[signs == 0] = 1.0
    basis *= signs
    model = PcaModel(mean=pca.mean_.copy(), basis=basis)
    return model, model.transform(features)


def ingest_feature_maps(dataset: MultitraverseDataset, target_dim: int, model: Optional[PcaModel] = None,
                        max_samples: int = 200_000, seed: int = 0) -> Tuple[MultitraverseDataset, Optional[PcaModel]]:
    """Reduce every frame's feature map to `target_dim` channels when they carry more."""
    source_dim = dataset.feat_dim
    if source_dim is None or source_dim <= target_dim:
        return dataset, None

    if model is None:
        pixels = np.concatenate([f.feat_map.reshape(-1, source_dim) for f in dataset.frames if f.feat_map is not None])
        if pixels.shape[0] > max_samples:
            rng = np.random.default_rng(seed)
            pixels = pixels[np.sort(rng.choice(pixels.shape[0], size=max_samples, replace=False))]
        model, _ = pca_fit_transform(pixels, target_dim)
        logger.info(f"Fitted PCA {source_dim} -> {target_dim} on {pixels.shape[0]} feature pixels")

    frames = []
    for f in dataset.frames:
        feat = None if f.feat_map is None else model.transform(f.feat_map).astype(np.float32).astype(np.float64)
        frames.append(Frame(image=f.image, pose=f.pose, intrinsics=f.intrinsics, traversal_id=f.traversal_id,
                            frame_id=f.frame_id, feat_map=feat, gt_mask=f.gt_mask, gt_depth=f.gt_depth,
                            sky_mask=f.sky_mask))
    reduced = MultitraverseDataset(frames, dataset.num_traversals, dataset.seed_points, dataset.seed_colors,
                                   dict(dataset.extra))
    return reduced, model
