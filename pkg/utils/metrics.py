"""
Evaluation metrics: mask IoU, Chamfer distance, PSNR and SSIM, plus the
per-frame evaluation of a reconstructed map against synthetic ground truth.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity
from tqdm import tqdm

from constants.defaults import (
    CHAMFER_OPACITY_THRESHOLD, PSNR_INF_SENTINEL, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
)
from utils.errors import MetricError, ShapeMismatchError
from utils.gaussian_model import GaussianMap, MultitraverseDataset
from utils.splat_renderer import RenderSettings, render

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    name: str
    per_frame: Dict[str, float] = field(default_factory=dict)
    masked_policy: str = "none"

    @property
    def aggregate(self) -> float:
        if not self.per_frame:
            return float("nan")
        return float(np.mean(list(self.per_frame.values())))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "frame": list(self.per_frame.keys()),
            "metric": self.name,
            "value": list(self.per_frame.values()),
            "masked_policy": self.masked_policy,
        })


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError("iou", gt.shape, pred.shape)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def chamfer(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise MetricError("chamfer distance needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """PSNR over pixels where `mask` is False (mask marks excluded pixels)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError("psnr", b.shape, a.shape)
    keep = np.ones(a.shape[:2], dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    if keep.shape != a.shape[:2]:
        raise ShapeMismatchError("psnr mask", a.shape[:2], keep.shape)
    if not keep.any():
        raise MetricError("psnr: every pixel is masked out")
    mse = float(np.mean((a[keep] - b[keep]) ** 2))
    if mse == 0.0:
        return PSNR_INF_SENTINEL
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM, Gaussian window (sigma 1.5, 11 taps), dynamic range 1, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError("ssim", b.shape, a.shape)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"ssim: image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(structural_similarity(
        a, b, data_range=1.0, channel_axis=-1 if a.ndim == 3 else None, gaussian_weights=True,
        sigma=SSIM_SIGMA, use_sample_covariance=False, K1=SSIM_K1, K2=SSIM_K2,
    ))


def gaussian_points(gmap: GaussianMap, opacity_threshold: float = CHAMFER_OPACITY_THRESHOLD) -> np.ndarray:
    return gmap.mu[gmap.opacity > opacity_threshold]


def evaluate(dataset: MultitraverseDataset, gt, gmap: Optional[GaussianMap] = None, masks: Optional[Sequence] = None,
             settings: Optional[RenderSettings] = None, frame_indices: Optional[Sequence[int]] = None,
             progress: bool = False) -> Dict[str, MetricReport]:
    """
    Métricas de segmentación y de render del entorno para los frames seleccionados.

    Args:
        dataset (MultitraverseDataset): Frames evaluados.
        gt (GroundTruthBundle): Máscaras, fondos y puntos de superficie de referencia.
        gmap (GaussianMap): Mapa del entorno; sin él se omiten psnr, ssim y chamfer.
        masks (Sequence): Máscaras predichas, una por frame; sin ellas se omite iou.
        settings (RenderSettings): Ajustes del render del entorno.
        frame_indices (Sequence[int]): Subconjunto de frames; por defecto todos.
        progress (bool): Muestra la barra de progreso.

    Returns:
        dict: Nombre de métrica -> MetricReport.
    """
    indices = list(range(len(dataset.frames))) if frame_indices is None else list(frame_indices)
    reports: Dict[str, MetricReport] = {}

    if masks is not None:
        if len(masks) != len(dataset.frames):
            raise MetricError(f"got {len(masks)} masks for {len(dataset.frames)} frames")
        seg = MetricReport("iou", masked_policy="gt_transient")
        for i in indices:
            seg.per_frame[dataset.frames[i].name] = iou(getattr(masks[i], "mask", masks[i]), gt.transient_masks[i])
        reports["iou"] = seg

    if gmap is not None:
        env_psnr = MetricReport("psnr", masked_policy="transients_removed")
        hidden_psnr = MetricReport("psnr_transient_regions", masked_policy="gt_transient_only")
        env_ssim = MetricReport("ssim", masked_policy="none")
        for i in tqdm(indices, desc="Evaluating frames", disable=not progress):
            frame = dataset.frames[i]
            out = render(gmap, frame.camera, settings, render_features=False)
            background = gt.backgrounds[i]
            transient = gt.transient_masks[i]
            if not transient.all():
                env_psnr.per_frame[frame.name] = psnr(out.rgb, frame.image, mask=transient)
            if transient.any():
                hidden_psnr.per_frame[frame.name] = psnr(out.rgb, background, mask=~transient)
            if min(frame.height, frame.width) >= SSIM_WINDOW:
                env_ssim.per_frame[frame.name] = ssim(out.rgb, background)
        reports.update({r.name: r for r in (env_psnr, hidden_psnr, env_ssim)})
        if gt.surface_points is not None:
            points = gaussian_points(gmap)
            cd = MetricReport("chamfer", masked_policy="opacity>0.5")
            if len(points):
                cd.per_frame["map"] = chamfer(points, gt.surface_points)
            reports["chamfer"] = cd

    for report in reports.values():
        logger.info(f"{report.name}: {report.aggregate:.4f} over {len(report.per_frame)} entries")
    return reports


def reports_to_frame(reports: Dict[str, MetricReport]) -> pd.DataFrame:
    frames: List[pd.DataFrame] = [r.to_frame() for r in reports.values() if r.per_frame]
    if not frames:
        return pd.DataFrame(columns=["frame", "metric", "value", "masked_policy"])
    return pd.concat(frames, ignore_index=True)
