"""
Differentiable tile-based Gaussian splatting in numpy.

Forward: project every Gaussian to a 2D splat, sort by depth, bin splats into
square pixel tiles, and alpha-blend colour/depth at image resolution and
features at feature resolution with the same per-splat weights.

Backward: analytic adjoint of the blend, of the 2D Gaussian evaluation and of
the projection, chained through the exp / sigmoid / quaternion-normalisation
reparameterisations.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from constants.defaults import (
    ALPHA_MAX, ALPHA_MIN, BACKGROUND, COV2D_DILATION, DEPTH_EPS, NEAR_PLANE, SH_C0, SH_C1,
    TILE_SIZE, TRANSMITTANCE_MIN,
)
from utils.errors import RenderError
from utils.gaussian_model import (
    PARAM_GROUPS, Camera, CameraIntrinsics, CameraPose, Gaussian3D, GaussianMap, normalize_quaternions,
    quaternion_to_rotation, rotation_jacobian, sh_to_colors,
)

logger = logging.getLogger(__name__)


@dataclass
class RenderSettings:
    near: float = NEAR_PLANE
    dilation: float = COV2D_DILATION
    alpha_max: float = ALPHA_MAX
    alpha_min: float = ALPHA_MIN
    transmittance_min: float = TRANSMITTANCE_MIN
    tile_size: int = TILE_SIZE
    background: Tuple[float, float, float] = BACKGROUND
    workers: int = 1

    def validate(self) -> None:
        if self.near <= 0:
            raise RenderError("near plane must be positive")
        if self.dilation < 0:
            raise RenderError("covariance dilation must be non-negative")
        if not 0.0 < self.alpha_max < 1.0:
            raise RenderError("alpha_max must lie in (0, 1)")
        if not 0.0 <= self.alpha_min < self.alpha_max:
            raise RenderError("alpha_min must lie in [0, alpha_max)")
        if self.transmittance_min < 0:
            raise RenderError("transmittance_min must be non-negative")
        if self.tile_size <= 0:
            raise RenderError("tile_size must be positive")


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    feat: np.ndarray
    opacity: float
    source_index: int


@dataclass
class ProjectedSplats:
    """Every visible Gaussian of one pass, sorted front to back (depth, then source index)."""

    index: np.ndarray
    t_cam: np.ndarray
    J: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    opacity: np.ndarray
    radius: np.ndarray
    color: Optional[np.ndarray] = None
    color_raw: Optional[np.ndarray] = None
    view_dirs: Optional[np.ndarray] = None
    view_dist: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.index.shape[0]

    @property
    def depth(self) -> np.ndarray:
        return self.t_cam[:, 2]


@dataclass
class TileRecord:
    y0: int
    y1: int
    x0: int
    x1: int
    ids: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    grad_mask: np.ndarray

    @property
    def final_transmittance(self) -> np.ndarray:
        if self.ids.size == 0:
            return np.ones(self.alpha.shape[0])
        return self.transmittance[:, -1] * (1.0 - self.alpha[:, -1])


@dataclass
class PassRecord:
    height: int
    width: int
    intrinsics: CameraIntrinsics
    splats: ProjectedSplats
    channels: np.ndarray
    tiles: List[TileRecord]
    blended: np.ndarray
    opacity: np.ndarray


@dataclass
class BlendRecords:
    image: PassRecord
    feature: Optional[PassRecord] = None

    def pixel_records(self, y: int, x: int, feature: bool = False) -> List[Tuple[int, float, float]]:
        """Ordered (source_index, alpha, transmittance-before) of the contributions to one pixel."""
        record = self.feature if feature else self.image
        if record is None:
            return []
        for tile in record.tiles:
            if tile.y0 <= y < tile.y1 and tile.x0 <= x < tile.x1:
                row = (y - tile.y0) * (tile.x1 - tile.x0) + (x - tile.x0)
                out = []
                for k in range(tile.ids.size):
                    a = tile.alpha[row, k]
                    if a > 0.0:
                        out.append((int(record.splats.index[tile.ids[k]]), float(a), float(tile.transmittance[row, k])))
                return out
        return []


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    feat: Optional[np.ndarray] = None
    extra: Optional[np.ndarray] = None
    blend_records: Optional[BlendRecords] = None


@dataclass
class GradientBuffer:
    mu: np.ndarray
    q: np.ndarray
    log_s: np.ndarray
    alpha_logit: np.ndarray
    sh: np.ndarray
    feat: np.ndarray
    mean2d_norm: np.ndarray = None
    visible: np.ndarray = None

    @classmethod
    def zeros_like(cls, gmap: GaussianMap) -> "GradientBuffer":
        n = len(gmap)
        return cls(
            mu=np.zeros_like(gmap.mu), q=np.zeros_like(gmap.q), log_s=np.zeros_like(gmap.log_s),
            alpha_logit=np.zeros_like(gmap.alpha_logit), sh=np.zeros_like(gmap.sh), feat=np.zeros_like(gmap.feat),
            mean2d_norm=np.zeros(n), visible=np.zeros(n, dtype=bool),
        )

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        for name in PARAM_GROUPS:
            yield name, getattr(self, name)

    def add_(self, other: "GradientBuffer") -> "GradientBuffer":
        for name in PARAM_GROUPS:
            getattr(self, name).__iadd__(getattr(other, name))
        self.mean2d_norm = self.mean2d_norm + other.mean2d_norm
        self.visible = self.visible | other.visible
        return self

    def scale_(self, factor: float) -> "GradientBuffer":
        for name in PARAM_GROUPS:
            getattr(self, name).__imul__(factor)
        return self

    def is_zero(self) -> bool:
        return all(not np.any(value) for _, value in self.items())


def _max_eigenvalue(cov2d: np.ndarray) -> np.ndarray:
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))


def project_gaussians(gmap: GaussianMap, pose: CameraPose, intr: CameraIntrinsics, settings: RenderSettings,
                      with_color: bool = True) -> ProjectedSplats:
    W = pose.rotation
    t_all = gmap.mu @ W.T + pose.translation
    front = np.flatnonzero(t_all[:, 2] > settings.near)
    t = t_all[front]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    n = front.size

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / tz
    J[:, 0, 2] = -intr.fx * tx / (tz * tz)
    J[:, 1, 1] = intr.fy / tz
    J[:, 1, 2] = -intr.fy * ty / (tz * tz)

    R = quaternion_to_rotation(normalize_quaternions(gmap.q[front]))
    M = R * np.exp(gmap.log_s[front])[:, None, :]
    cov3d = M @ np.transpose(M, (0, 2, 1))
    T = J @ W
    cov2d = T @ cov3d @ np.transpose(T, (0, 2, 1))
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation

    mean2d = np.stack([intr.fx * tx / tz + intr.cx, intr.fy * ty / tz + intr.cy], axis=1)
    lam = _max_eigenvalue(cov2d)
    sigma = np.sqrt(lam)
    inside = (
        (mean2d[:, 0] >= -3.0 * sigma) & (mean2d[:, 0] <= intr.width - 1 + 3.0 * sigma)
        & (mean2d[:, 1] >= -3.0 * sigma) & (mean2d[:, 1] <= intr.height - 1 + 3.0 * sigma)
    )
    keep = np.flatnonzero(inside)
    index = front[keep]
    t, J, cov3d, cov2d, mean2d, sigma = t[keep], J[keep], cov3d[keep], cov2d[keep], mean2d[keep], sigma[keep]

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    opacity = 1.0 / (1.0 + np.exp(-gmap.alpha_logit[index]))

    if settings.alpha_min > 0:
        ratio = np.maximum(opacity / settings.alpha_min, 1.0)
        radius = sigma * np.maximum(3.0, np.sqrt(2.0 * np.log(ratio)))
    else:
        radius = np.full(index.size, np.inf)

    order = np.lexsort((index, t[:, 2]))
    splats = ProjectedSplats(
        index=index[order], t_cam=t[order], J=J[order], cov3d=cov3d[order], cov2d=cov2d[order],
        conic=conic[order], mean2d=mean2d[order], opacity=opacity[order], radius=radius[order],
    )
    if with_color:
        offsets = gmap.mu[splats.index] - pose.center
        dist = np.linalg.norm(offsets, axis=1)
        dirs = offsets / np.maximum(dist, 1e-12)[:, None]
        raw = sh_to_colors(gmap.sh[splats.index], dirs, clamp=False)
        splats.view_dirs = dirs
        splats.view_dist = dist
        splats.color_raw = raw
        splats.color = np.clip(raw, 0.0, 1.0)
    return splats


def project(g: Gaussian3D, pose: CameraPose, intr: CameraIntrinsics, view_dir=None,
            settings: Optional[RenderSettings] = None) -> Optional[Splat2D]:
    """Project one Gaussian; None when it is culled."""
    settings = settings or RenderSettings()
    gmap = GaussianMap.from_gaussians([g])
    splats = project_gaussians(gmap, pose, intr, settings, with_color=view_dir is None)
    if len(splats) == 0:
        return None
    if view_dir is None:
        color = splats.color[0]
    else:
        color = sh_to_colors(gmap.sh, np.asarray(view_dir, dtype=float)[None])[0]
    return Splat2D(
        mean2d=splats.mean2d[0], cov2d=splats.cov2d[0], depth=float(splats.depth[0]), color=color,
        feat=gmap.feat[0].copy(), opacity=float(splats.opacity[0]), source_index=0,
    )


def alpha_at(s: Splat2D, p, settings: Optional[RenderSettings] = None) -> float:
    settings = settings or RenderSettings()
    d = np.asarray(p, dtype=float) - s.mean2d
    power = -0.5 * float(d @ np.linalg.solve(s.cov2d, d))
    alpha = min(s.opacity * np.exp(power), settings.alpha_max)
    if alpha < settings.alpha_min:
        return 0.0
    return float(alpha)


def _splat_alpha(splats: ProjectedSplats, ids: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    dx = xs[:, None] - splats.mean2d[ids, 0][None, :]
    dy = ys[:, None] - splats.mean2d[ids, 1][None, :]
    a = splats.conic[ids, 0][None, :]
    b = splats.conic[ids, 1][None, :]
    c = splats.conic[ids, 2][None, :]
    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
    gauss = np.exp(power)
    return splats.opacity[ids][None, :] * gauss, gauss, dx, dy


def _exclusive_transmittance(alpha: np.ndarray) -> np.ndarray:
    trans = np.ones_like(alpha)
    if alpha.shape[1] > 1:
        trans[:, 1:] = np.cumprod(1.0 - alpha[:, :-1], axis=1)
    return trans


def _tile_grid(height: int, width: int, tile: int) -> List[Tuple[int, int, int, int]]:
    return [(y0, min(y0 + tile, height), x0, min(x0 + tile, width))
            for y0 in range(0, height, tile) for x0 in range(0, width, tile)]


def _bin_splats(splats: ProjectedSplats, height: int, width: int, tile: int):
    """Per-splat inclusive tile ranges; empty ranges have lo > hi."""
    u, v, r = splats.mean2d[:, 0], splats.mean2d[:, 1], splats.radius
    with np.errstate(invalid="ignore"):
        x_lo = np.clip(np.ceil(u - r), 0, width - 1)
        x_hi = np.clip(np.floor(u + r), 0, width - 1)
        y_lo = np.clip(np.ceil(v - r), 0, height - 1)
        y_hi = np.clip(np.floor(v + r), 0, height - 1)
    empty = (np.ceil(u - r) > width - 1) | (np.floor(u + r) < 0) | (np.ceil(v - r) > height - 1) | (np.floor(v + r) < 0)
    tx0 = (x_lo // tile).astype(int)
    tx1 = np.where(empty, -1, (x_hi // tile).astype(int))
    ty0 = (y_lo // tile).astype(int)
    ty1 = np.where(empty, -1, (y_hi // tile).astype(int))
    return tx0, tx1, ty0, ty1


def _map_tiles(func: Callable, items: List, workers: int) -> List:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def _rasterize(splats: ProjectedSplats, channels: np.ndarray, intr: CameraIntrinsics,
               settings: RenderSettings) -> PassRecord:
    height, width = intr.height, intr.width
    ts = settings.tile_size
    tx0, tx1, ty0, ty1 = _bin_splats(splats, height, width, ts)
    n_ch = channels.shape[1]

    def run(bounds):
        y0, y1, x0, x1 = bounds
        ty, tx = y0 // ts, x0 // ts
        ids = np.flatnonzero((tx0 <= tx) & (tx <= tx1) & (ty0 <= ty) & (ty <= ty1))
        ys, xs = np.meshgrid(np.arange(y0, y1, dtype=float), np.arange(x0, x1, dtype=float), indexing="ij")
        ys, xs = ys.ravel(), xs.ravel()
        if ids.size == 0:
            empty = np.zeros((ys.size, 0))
            return TileRecord(y0, y1, x0, x1, ids, empty, empty, empty.astype(bool)), np.zeros((ys.size, n_ch))
        alpha_raw, _, _, _ = _splat_alpha(splats, ids, xs, ys)
        alpha = np.minimum(alpha_raw, settings.alpha_max)
        grad_mask = (alpha_raw < settings.alpha_max) & (alpha >= settings.alpha_min)
        alpha = np.where(alpha >= settings.alpha_min, alpha, 0.0)
        trans = _exclusive_transmittance(alpha)
        if settings.transmittance_min > 0:
            alive = trans >= settings.transmittance_min
            if not alive.all():
                alpha = alpha * alive
                grad_mask &= alive
                trans = _exclusive_transmittance(alpha)
        weights = alpha * trans
        blended = weights @ channels[ids]
        return TileRecord(y0, y1, x0, x1, ids, alpha, trans, grad_mask), blended

    results = _map_tiles(run, _tile_grid(height, width, ts), settings.workers)
    blended = np.zeros((height, width, n_ch))
    opacity = np.zeros((height, width))
    tiles = []
    for record, values in results:
        h, w = record.y1 - record.y0, record.x1 - record.x0
        blended[record.y0:record.y1, record.x0:record.x1] = values.reshape(h, w, n_ch)
        opacity[record.y0:record.y1, record.x0:record.x1] = (1.0 - record.final_transmittance).reshape(h, w)
        tiles.append(record)
    return PassRecord(height, width, intr, splats, channels, tiles, blended, opacity)


def _image_channels(gmap: GaussianMap, splats: ProjectedSplats, extra: Optional[np.ndarray]) -> np.ndarray:
    parts = [splats.color, splats.depth[:, None]]
    if extra is not None:
        parts.append(np.asarray(extra, dtype=float).reshape(len(gmap), -1)[splats.index])
    return np.concatenate(parts, axis=1)


def _finish_image(record: PassRecord, settings: RenderSettings, n_extra: int):
    blended, opacity = record.blended, record.opacity
    background = np.asarray(settings.background, dtype=float)
    rgb = blended[..., :3] + (1.0 - opacity)[..., None] * background
    depth = blended[..., 3] / np.maximum(opacity, DEPTH_EPS)
    extra = blended[..., 4:4 + n_extra] if n_extra else None
    return np.clip(rgb, 0.0, 1.0), depth, extra


def render(gmap: GaussianMap, camera: Camera, settings: Optional[RenderSettings] = None,
           extra: Optional[np.ndarray] = None, render_features: bool = True) -> RenderOutput:
    """
    Renderiza rgb, profundidad y opacidad a resolución de imagen y features a resolución de features.

    Args:
        gmap (GaussianMap): Mapa de Gaussianas a renderizar.
        camera (Camera): Pose e intrínsecos del frame; `feat_h`/`feat_w` fijan la resolución de features.
        settings (RenderSettings): Umbrales del rasterizador, tamaño de tile y workers.
        extra (np.ndarray): Canales opcionales por Gaussiana mezclados con los pesos de la pasada de imagen
            (el generador sintético los usa para medir la cobertura de los transitorios).
        render_features (bool): Si es False se omite la pasada de features.

    Returns:
        RenderOutput: Buffers renderizados y los registros de mezcla que necesita `render_backward`.
    """
    settings = settings or RenderSettings()
    if len(gmap) == 0:
        raise RenderError("cannot render an empty Gaussian map")
    intr = camera.intrinsics
    splats = project_gaussians(gmap, camera.pose, intr, settings)
    n_extra = 0 if extra is None else np.asarray(extra).reshape(len(gmap), -1).shape[1]
    image = _rasterize(splats, _image_channels(gmap, splats, extra), intr, settings)
    rgb, depth, extra_out = _finish_image(image, settings, n_extra)

    feat = None
    feature = None
    feat_intr = camera.feat_intrinsics
    if render_features and feat_intr is not None and gmap.feat_dim > 0:
        fsplats = project_gaussians(gmap, camera.pose, feat_intr, settings, with_color=False)
        feature = _rasterize(fsplats, gmap.feat[fsplats.index], feat_intr, settings)
        feat = feature.blended
    return RenderOutput(rgb=rgb, depth=depth, opacity=image.opacity, feat=feat, extra=extra_out,
                        blend_records=BlendRecords(image, feature))


def _blend_backward(record: PassRecord, grad_blended: np.ndarray, grad_opacity: np.ndarray, settings: RenderSettings):
    """Adjoint of the per-pixel blend: per-splat gradients of mean2d, conic matrix, opacity and channels."""
    splats, channels = record.splats, record.channels
    m = len(splats)
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 2, 2))
    g_op = np.zeros(m)
    g_ch = np.zeros_like(channels)
    gb = grad_blended.reshape(record.height, record.width, -1)
    go = grad_opacity.reshape(record.height, record.width)

    def run(tile: TileRecord):
        if tile.ids.size == 0 or not tile.grad_mask.any() and not np.any(tile.alpha):
            return None
        ids = tile.ids
        gC = gb[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1, channels.shape[1])
        gO = go[tile.y0:tile.y1, tile.x0:tile.x1].ravel()
        alpha, trans = tile.alpha, tile.transmittance
        weights = alpha * trans
        t_final = tile.final_transmittance
        gx = gC @ channels[ids].T
        wgx = weights * gx
        suffix = np.cumsum(wgx[:, ::-1], axis=1)[:, ::-1] - wgx
        one_minus = 1.0 - alpha
        g_alpha = trans * gx - suffix / one_minus + (gO * t_final)[:, None] / one_minus
        g_alpha = np.where(tile.grad_mask, g_alpha, 0.0)

        ys, xs = np.meshgrid(np.arange(tile.y0, tile.y1, dtype=float), np.arange(tile.x0, tile.x1, dtype=float),
                             indexing="ij")
        alpha_raw, gauss, dx, dy = _splat_alpha(splats, ids, xs.ravel(), ys.ravel())
        g_power = g_alpha * alpha_raw
        a = splats.conic[ids, 0][None, :]
        b = splats.conic[ids, 1][None, :]
        c = splats.conic[ids, 2][None, :]
        t_mean = np.stack([np.sum(g_power * (a * dx + b * dy), axis=0),
                           np.sum(g_power * (b * dx + c * dy), axis=0)], axis=1)
        t_conic = np.empty((ids.size, 2, 2))
        t_conic[:, 0, 0] = -0.5 * np.sum(g_power * dx * dx, axis=0)
        t_conic[:, 0, 1] = -0.5 * np.sum(g_power * dx * dy, axis=0)
        t_conic[:, 1, 0] = t_conic[:, 0, 1]
        t_conic[:, 1, 1] = -0.5 * np.sum(g_power * dy * dy, axis=0)
        t_op = np.sum(g_alpha * gauss, axis=0)
        t_ch = weights.T @ gC
        return ids, t_mean, t_conic, t_op, t_ch

    for result in _map_tiles(run, record.tiles, settings.workers):
        if result is None:
            continue
        ids, t_mean, t_conic, t_op, t_ch = result
        g_mean[ids] += t_mean
        g_conic[ids] += t_conic
        g_op[ids] += t_op
        g_ch[ids] += t_ch
    return g_mean, g_conic, g_op, g_ch


def _projection_backward(gmap: GaussianMap, pose: CameraPose, intr: CameraIntrinsics, splats: ProjectedSplats,
                         g_mean: np.ndarray, g_conic: np.ndarray, g_depth: np.ndarray, out: GradientBuffer) -> None:
    """Chain splat-space gradients back to mu, q and log_s."""
    idx = splats.index
    if idx.size == 0:
        return
    W = pose.rotation
    t = splats.t_cam
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = intr.fx, intr.fy

    conic_m = np.empty((idx.size, 2, 2))
    conic_m[:, 0, 0] = splats.conic[:, 0]
    conic_m[:, 0, 1] = splats.conic[:, 1]
    conic_m[:, 1, 0] = splats.conic[:, 1]
    conic_m[:, 1, 1] = splats.conic[:, 2]
    g_cov2d = -conic_m @ g_conic @ conic_m

    T = splats.J @ W
    g_T = 2.0 * g_cov2d @ T @ splats.cov3d
    g_cov3d = np.transpose(T, (0, 2, 1)) @ g_cov2d @ T
    g_J = g_T @ W.T

    g_t = np.zeros((idx.size, 3))
    g_t[:, 0] = g_mean[:, 0] * fx / tz - g_J[:, 0, 2] * fx / (tz * tz)
    g_t[:, 1] = g_mean[:, 1] * fy / tz - g_J[:, 1, 2] * fy / (tz * tz)
    g_t[:, 2] = (
        -g_mean[:, 0] * fx * tx / (tz * tz) - g_mean[:, 1] * fy * ty / (tz * tz)
        - g_J[:, 0, 0] * fx / (tz * tz) + g_J[:, 0, 2] * 2.0 * fx * tx / tz ** 3
        - g_J[:, 1, 1] * fy / (tz * tz) + g_J[:, 1, 2] * 2.0 * fy * ty / tz ** 3
        + g_depth
    )
    np.add.at(out.mu, idx, g_t @ W)

    q = gmap.q[idx]
    q_norm = np.linalg.norm(q, axis=1, keepdims=True)
    q_unit = q / q_norm
    R = quaternion_to_rotation(q_unit)
    s = np.exp(gmap.log_s[idx])
    M = R * s[:, None, :]
    g_M = 2.0 * g_cov3d @ M
    g_s = np.sum(g_M * R, axis=1)
    g_R = g_M * s[:, None, :]
    np.add.at(out.log_s, idx, g_s * s)
    g_q_unit = np.einsum("nkij,nij->nk", rotation_jacobian(q_unit), g_R)
    g_q = (g_q_unit - q_unit * np.sum(q_unit * g_q_unit, axis=1, keepdims=True)) / q_norm
    np.add.at(out.q, idx, g_q)


def _color_backward(gmap: GaussianMap, splats: ProjectedSplats, g_color: np.ndarray, out: GradientBuffer) -> None:
    idx = splats.index
    raw = splats.color_raw
    g_raw = np.where((raw >= 0.0) & (raw <= 1.0), g_color, 0.0)
    g_sh = np.zeros((idx.size,) + gmap.sh.shape[1:])
    g_sh[:, 0, :] = SH_C0 * g_raw
    if gmap.sh.shape[1] > 1:
        dirs = splats.view_dirs
        sh = gmap.sh[idx]
        g_sh[:, 1, :] = -SH_C1 * dirs[:, 1:2] * g_raw
        g_sh[:, 2, :] = SH_C1 * dirs[:, 2:3] * g_raw
        g_sh[:, 3, :] = -SH_C1 * dirs[:, 0:1] * g_raw
        g_dir = np.stack([
            -SH_C1 * np.sum(g_raw * sh[:, 3, :], axis=1),
            -SH_C1 * np.sum(g_raw * sh[:, 1, :], axis=1),
            SH_C1 * np.sum(g_raw * sh[:, 2, :], axis=1),
        ], axis=1)
        g_offset = (g_dir - dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)) / splats.view_dist[:, None]
        np.add.at(out.mu, idx, g_offset)
    np.add.at(out.sh, idx, g_sh)


def render_backward(gmap: GaussianMap, camera: Camera, output: RenderOutput,
                    grad_rgb: Optional[np.ndarray] = None, grad_feat: Optional[np.ndarray] = None,
                    grad_depth: Optional[np.ndarray] = None, grad_opacity: Optional[np.ndarray] = None,
                    settings: Optional[RenderSettings] = None) -> GradientBuffer:
    """
    Gradientes de una pérdida escalar respecto de cada parámetro de las Gaussianas.

    Args:
        gmap (GaussianMap): Mapa usado en el render.
        camera (Camera): Cámara del render.
        output (RenderOutput): Salida de `render` con sus registros de mezcla.
        grad_rgb, grad_feat, grad_depth, grad_opacity (np.ndarray): Gradientes de la pérdida respecto de
            cada buffer; None cuando la pérdida no depende de ese buffer.
        settings (RenderSettings): Los mismos ajustes usados en el render.

    Returns:
        GradientBuffer: Un arreglo de gradientes por grupo de parámetros.
    """
    settings = settings or RenderSettings()
    if output is None or output.blend_records is None:
        raise RenderError("forward pass required")
    records = output.blend_records
    image = records.image
    h, w = image.height, image.width
    out = GradientBuffer.zeros_like(gmap)

    g_rgb = np.zeros((h, w, 3)) if grad_rgb is None else np.asarray(grad_rgb, dtype=float).reshape(h, w, 3)
    g_opacity = np.zeros((h, w)) if grad_opacity is None else np.asarray(grad_opacity, dtype=float).reshape(h, w)
    g_depth_out = np.zeros((h, w)) if grad_depth is None else np.asarray(grad_depth, dtype=float).reshape(h, w)

    # rgb was clamped after blending
    rgb_unclamped = image.blended[..., :3] + (1.0 - image.opacity)[..., None] * np.asarray(settings.background)
    g_rgb = np.where((rgb_unclamped >= 0.0) & (rgb_unclamped <= 1.0), g_rgb, 0.0)

    opacity = image.opacity
    depth_raw = image.blended[..., 3]
    covered = opacity > DEPTH_EPS
    safe = np.where(covered, opacity, DEPTH_EPS)
    g_depth_raw = g_depth_out / safe
    g_opacity_total = (
        g_opacity
        - g_rgb @ np.asarray(settings.background, dtype=float)
        - np.where(covered, g_depth_out * depth_raw / (safe * safe), 0.0)
    )
    grad_blended = np.zeros_like(image.blended)
    grad_blended[..., :3] = g_rgb
    grad_blended[..., 3] = g_depth_raw

    if np.any(grad_blended) or np.any(g_opacity_total):
        splats = image.splats
        g_mean, g_conic, g_op, g_ch = _blend_backward(image, grad_blended, g_opacity_total, settings)
        _color_backward(gmap, splats, g_ch[:, :3], out)
        _projection_backward(gmap, camera.pose, image.intrinsics, splats, g_mean, g_conic, g_ch[:, 3], out)
        op = splats.opacity
        np.add.at(out.alpha_logit, splats.index, g_op * op * (1.0 - op))
        ndc = g_mean * np.array([0.5 * w, 0.5 * h])
        out.mean2d_norm[splats.index] += np.linalg.norm(ndc, axis=1)
        out.visible[splats.index] = True

    feature = records.feature
    if grad_feat is not None and feature is not None:
        g_feat = np.asarray(grad_feat, dtype=float).reshape(feature.height, feature.width, -1)
        if np.any(g_feat):
            fsplats = feature.splats
            g_mean, g_conic, g_op, g_ch = _blend_backward(feature, g_feat, np.zeros((feature.height, feature.width)),
                                                          settings)
            np.add.at(out.feat, fsplats.index, g_ch)
            _projection_backward(gmap, camera.pose, feature.intrinsics, fsplats, g_mean, g_conic,
                                 np.zeros(len(fsplats)), out)
            op = fsplats.opacity
            np.add.at(out.alpha_logit, fsplats.index, g_op * op * (1.0 - op))
    elif grad_feat is not None and np.any(grad_feat):
        raise RenderError("feature gradients supplied but the forward pass rendered no features")
    return out


def _naive_pass(splats: ProjectedSplats, channels: np.ndarray, intr: CameraIntrinsics, settings: RenderSettings,
                rows_per_chunk: int = 32):
    height, width = intr.height, intr.width
    blended = np.zeros((height, width, channels.shape[1]))
    opacity = np.zeros((height, width))
    ids = np.arange(len(splats))
    for y0 in range(0, height, rows_per_chunk):
        y1 = min(y0 + rows_per_chunk, height)
        ys, xs = np.meshgrid(np.arange(y0, y1, dtype=float), np.arange(width, dtype=float), indexing="ij")
        if ids.size == 0:
            continue
        alpha_raw, _, _, _ = _splat_alpha(splats, ids, xs.ravel(), ys.ravel())
        alpha = np.minimum(alpha_raw, settings.alpha_max)
        trans = _exclusive_transmittance(alpha)
        blended[y0:y1] = ((alpha * trans) @ channels).reshape(y1 - y0, width, -1)
        opacity[y0:y1] = (1.0 - trans[:, -1] * (1.0 - alpha[:, -1])).reshape(y1 - y0, width)
    return blended, opacity


def render_naive_oracle(gmap: GaussianMap, camera: Camera, settings: Optional[RenderSettings] = None) -> RenderOutput:
    """Reference renderer: full per-pixel sort and blend, no tiles, no skip threshold, no early termination."""
    settings = settings or RenderSettings()
    if len(gmap) == 0:
        raise RenderError("cannot render an empty Gaussian map")
    intr = camera.intrinsics
    splats = project_gaussians(gmap, camera.pose, intr, settings)
    channels = _image_channels(gmap, splats, None)
    blended, opacity = _naive_pass(splats, channels, intr, settings)
    background = np.asarray(settings.background, dtype=float)
    rgb = np.clip(blended[..., :3] + (1.0 - opacity)[..., None] * background, 0.0, 1.0)
    depth = blended[..., 3] / np.maximum(opacity, DEPTH_EPS)
    feat = None
    feat_intr = camera.feat_intrinsics
    if feat_intr is not None and gmap.feat_dim > 0:
        fsplats = project_gaussians(gmap, camera.pose, feat_intr, settings, with_color=False)
        feat, _ = _naive_pass(fsplats, gmap.feat[fsplats.index], feat_intr, settings)
    return RenderOutput(rgb=rgb, depth=depth, opacity=opacity, feat=feat)
