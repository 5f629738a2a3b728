"""
Feature-residual mining: turns per-frame feature residual maps into
ephemerality masks.

    normalize -> activate (delta1) -> outer contours -> drop small (delta2)
    -> drop sky band (delta3) -> merge nearby (delta4) -> convex hulls -> fill

Contour points use OpenCV's (x, y) = (column, row) convention.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from constants.defaults import MINING_DELTA1, MINING_DELTA2, MINING_DELTA3, MINING_DELTA4, MINING_REFERENCE_AREA
from utils.errors import MiningError
from utils.losses import ResidualMap

logger = logging.getLogger(__name__)


@dataclass
class Contour:
    points: np.ndarray
    area: int

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        """(x0, y0, x1, y1), inclusive pixel coordinates."""
        x0, y0 = self.points.min(axis=0)
        x1, y1 = self.points.max(axis=0)
        return int(x0), int(y0), int(x1), int(y1)

    @property
    def top_left(self) -> Tuple[int, int]:
        y0 = self.points[:, 1].min()
        x0 = self.points[self.points[:, 1] == y0, 0].min()
        return int(y0), int(x0)

    @property
    def lowest_row(self) -> int:
        return int(self.points[:, 1].max())


@dataclass
class EphemeralityMask:
    mask: np.ndarray
    frame_id: str = ""

    @property
    def coverage(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


@dataclass
class MiningConfig:
    delta1: float = MINING_DELTA1
    delta2: float = MINING_DELTA2
    delta3: float = MINING_DELTA3
    delta4: float = MINING_DELTA4
    reference_area: float = MINING_REFERENCE_AREA

    def validate(self) -> None:
        if not 0.0 < self.delta1 < 1.0:
            raise MiningError(f"delta1 must lie in (0, 1), got {self.delta1}")
        if self.delta2 <= 0 or self.delta4 <= 0:
            raise MiningError("delta2 and delta4 must be positive")
        if not 0.0 < self.delta3 <= 1.0:
            raise MiningError(f"delta3 must lie in (0, 1], got {self.delta3}")

    def scaled_delta2(self, feat_height: int, feat_width: int) -> float:
        """Area threshold rescaled from the reference feature resolution."""
        return self.delta2 * (feat_height * feat_width) / self.reference_area


def normalize_and_activate(r, delta1: float = MINING_DELTA1) -> np.ndarray:
    values = np.asarray(getattr(r, "values", r), dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values)
    normalized = (values - lo) / (hi - lo)
    normalized[normalized < delta1] = 0.0
    return normalized


def find_contours(activated: np.ndarray) -> List[Contour]:
    """Outer borders of the 8-connected foreground (> 0), in raster order of their top-left pixel."""
    binary = (np.asarray(activated) > 0).astype(np.uint8)
    if not binary.any():
        return []
    raw, _ = cv2.findContours(binary, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    contours = []
    for c in raw:
        points = c.reshape(-1, 2).astype(np.int64)
        if len(points) < 3:
            continue
        canvas = np.zeros_like(binary)
        cv2.drawContours(canvas, [c], -1, 1, thickness=cv2.FILLED)
        contours.append(Contour(points=points, area=int(canvas.sum())))
    contours.sort(key=lambda c: c.top_left)
    return contours


def filter_contours(contours: Sequence[Contour], delta2: float, delta3: float, feat_height: int) -> List[Contour]:
    """Drop contours smaller than delta2 and those whose lowest row stays above (1 - delta3) * height."""
    skyline = (1.0 - delta3) * feat_height
    return [c for c in contours if c.area >= delta2 and c.lowest_row >= skyline]


def merge_contours(contours: Sequence[Contour], delta4: float) -> List[List[Contour]]:
    """Single-link groups of contours whose bounding boxes, grown by delta4/2 per side, touch."""
    n = len(contours)
    if n == 0:
        return []
    boxes = np.array([c.bbox for c in contours], dtype=np.float64)
    half = 0.5 * delta4
    # pixel boxes span [x0, x1 + 1] x [y0, y1 + 1]
    x0, y0 = boxes[:, 0] - half, boxes[:, 1] - half
    x1, y1 = boxes[:, 2] + 1.0 + half, boxes[:, 3] + 1.0 + half
    touch = (
        (x0[:, None] <= x1[None, :]) & (x0[None, :] <= x1[:, None])
        & (y0[:, None] <= y1[None, :]) & (y0[None, :] <= y1[:, None])
    )
    _, labels = connected_components(csr_matrix(touch), directed=False)
    groups: List[List[Contour]] = []
    seen = {}
    for i, label in enumerate(labels):
        if label not in seen:
            seen[label] = len(groups)
            groups.append([])
        groups[seen[label]].append(contours[i])
    return groups


def _fill_convex(hull: np.ndarray, canvas: np.ndarray) -> None:
    """Mark every lattice point inside or on an (x, y) convex polygon given in boundary order."""
    x0, y0 = hull.min(axis=0)
    x1, y1 = hull.max(axis=0)
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    pos = np.ones(xs.shape, dtype=bool)
    neg = np.ones(xs.shape, dtype=bool)
    k = len(hull)
    for i in range(k if k > 1 else 0):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % k]
        cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        pos &= cross >= 0
        neg &= cross <= 0
    canvas[y0:y1 + 1, x0:x1 + 1] |= pos | neg


def hulls_to_mask(groups: Sequence[Sequence[Contour]], feat_dims: Tuple[int, int], image_dims: Tuple[int, int],
                  frame_id: str = "") -> EphemeralityMask:
    hf, wf = feat_dims
    h, w = image_dims
    low = np.zeros((hf, wf), dtype=bool)
    for group in groups:
        points = np.concatenate([c.points for c in group]).astype(np.int32)
        hull = cv2.convexHull(points.reshape(-1, 1, 2)).reshape(-1, 2).astype(np.int64)
        _fill_convex(hull, low)
    rows = (np.arange(h) * hf) // h
    cols = (np.arange(w) * wf) // w
    return EphemeralityMask(mask=low[rows][:, cols], frame_id=frame_id)


def mine_frame(residual: ResidualMap, cfg: MiningConfig, image_dims: Tuple[int, int]) -> EphemeralityMask:
    hf, wf = residual.values.shape
    activated = normalize_and_activate(residual, cfg.delta1)
    contours = find_contours(activated)
    kept = filter_contours(contours, cfg.scaled_delta2(hf, wf), cfg.delta3, hf)
    groups = merge_contours(kept, cfg.delta4)
    logger.debug(f"{residual.frame_id}: {len(contours)} contours, {len(kept)} after filtering, {len(groups)} groups")
    return hulls_to_mask(groups, (hf, wf), image_dims, residual.frame_id)


def mine_masks(residuals: Sequence[ResidualMap], cfg: Optional[MiningConfig] = None,
               image_dims=None) -> List[EphemeralityMask]:
    """
    Máscaras de efímeros para cada mapa de residuales.

    Args:
        residuals (Sequence[ResidualMap]): Residuales de features por frame.
        cfg (MiningConfig): Umbrales delta1..delta4.
        image_dims: Un único (h, w), como tupla o lista, para todos los frames, o un (h, w) por frame.

    Returns:
        list[EphemeralityMask]: Una máscara a resolución de imagen por residual, en el mismo orden.
    """
    cfg = cfg or MiningConfig()
    cfg.validate()
    if image_dims is None:
        raise MiningError("image dimensions are required to upsample the masks")
    if len(image_dims) == 2 and all(np.isscalar(v) for v in image_dims):
        dims = [tuple(int(v) for v in image_dims)] * len(residuals)
    else:
        dims = list(image_dims)
    if len(dims) != len(residuals):
        raise MiningError(f"got {len(dims)} image sizes for {len(residuals)} residual maps")
    masks = [mine_frame(r, cfg, tuple(d)) for r, d in zip(residuals, dims)]
    total = sum(m.mask.any() for m in masks)
    logger.info(f"Mined {len(masks)} masks, {total} with ephemeral regions")
    return masks
