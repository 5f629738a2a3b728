"""
Optimizer, adaptive density control and the two training stages.

`train_distill` fits colour and features jointly and returns the per-frame
feature residuals; `train_env` fine-tunes colour/geometry on the pixels the
ephemerality masks leave in, with optional depth-smoothness and sky terms.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from constants.defaults import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, DENSIFY_FROM_STEP, DENSIFY_GRAD_THRESHOLD, DENSIFY_INTERVAL,
    DENSIFY_MAX_GAUSSIANS, DENSIFY_OPACITY_RESET_INTERVAL, DENSIFY_PRUNE_OPACITY, DENSIFY_SCALE_SPLIT,
    DENSIFY_UNTIL_STEP, DISTILL_STEPS, ENV_STEPS, INV_DEPTH_EPS, LOG_EVERY, LR_ALPHA_LOGIT, LR_FEAT, LR_LOG_S,
    LR_MU_FINAL, LR_MU_INIT, LR_Q, LR_SH, RESET_OPACITY, SPLIT_SCALE_DIVISOR,
)
from utils.errors import NonFiniteGradientError, TrainingError
from utils.gaussian_model import PARAM_GROUPS, GaussianMap, MultitraverseDataset, logit, normalize_quaternions
from utils.losses import (
    LossReport, LossWeights, ResidualMap, disparity_from_depth, loss_depth_smooth, loss_depth_smooth_grad,
    loss_feat_kl, loss_feat_kl_grad, loss_rgb_l1, loss_rgb_l1_grad, loss_sky, loss_sky_grad,
)
from utils.splat_renderer import GradientBuffer, RenderSettings, render, render_backward

logger = logging.getLogger(__name__)


@dataclass
class LearningRates:
    mu_init: float = LR_MU_INIT
    mu_final: float = LR_MU_FINAL
    q: float = LR_Q
    log_s: float = LR_LOG_S
    alpha_logit: float = LR_ALPHA_LOGIT
    sh: float = LR_SH
    feat: float = LR_FEAT
    scale_mu_by_extent: bool = True

    def validate(self) -> None:
        for name in ("mu_init", "mu_final", "q", "log_s", "alpha_logit", "sh", "feat"):
            if getattr(self, name) < 0:
                raise TrainingError(f"learning rate '{name}' must be non-negative")


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    lrs: LearningRates = field(default_factory=LearningRates)
    step: int = 0
    max_steps: int = 1
    extent: float = 1.0
    frozen: Tuple[str, ...] = ()
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_map(cls, gmap: GaussianMap, lrs: Optional[LearningRates] = None, max_steps: int = 1,
                extent: float = 1.0, frozen: Sequence[str] = ()) -> "OptimizerState":
        params = gmap.params()
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            lrs=lrs or LearningRates(), max_steps=max(int(max_steps), 1), extent=extent, frozen=tuple(frozen),
        )

    def learning_rate(self, group: str) -> float:
        if group != "mu":
            return getattr(self.lrs, group)
        t = min(self.step / self.max_steps, 1.0)
        if self.lrs.mu_init <= 0 or self.lrs.mu_final <= 0:
            lr = self.lrs.mu_init * (1.0 - t) + self.lrs.mu_final * t
        else:
            lr = float(np.exp((1.0 - t) * np.log(self.lrs.mu_init) + t * np.log(self.lrs.mu_final)))
        return lr * self.extent if self.lrs.scale_mu_by_extent else lr

    def reindex(self, source: np.ndarray) -> None:
        """Follow a topology change: row i takes the moments of old row source[i], or zeros when source[i] < 0."""
        source = np.asarray(source, dtype=int)
        fresh = source < 0
        for buffers in (self.m, self.v):
            for name, old in buffers.items():
                new = old[np.where(fresh, 0, source)] if old.shape[0] else np.zeros((source.size,) + old.shape[1:])
                new[fresh] = 0.0
                buffers[name] = new

    def reset_group(self, group: str) -> None:
        self.m[group][...] = 0.0
        self.v[group][...] = 0.0


def _check_finite(grads: GradientBuffer) -> None:
    for name, value in grads.items():
        flat = value.reshape(value.shape[0], -1)
        bad = ~np.isfinite(flat).all(axis=1)
        if bad.any():
            raise NonFiniteGradientError(np.flatnonzero(bad)[0], name)


def adam_step(gmap: GaussianMap, grads: GradientBuffer, state: OptimizerState) -> GaussianMap:
    """One bias-corrected Adam update of every unfrozen group, in place; quaternions renormalised."""
    if len(grads.mu) != len(gmap):
        raise TrainingError(f"gradient buffer covers {len(grads.mu)} Gaussians, map has {len(gmap)}")
    _check_finite(grads)
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if name in state.frozen:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        param = getattr(gmap, name)
        param -= state.learning_rate(name) * m_hat / (np.sqrt(v_hat) + state.eps)
    gmap.q = normalize_quaternions(gmap.q)
    return gmap


@dataclass
class DensifyConfig:
    grad_threshold: float = DENSIFY_GRAD_THRESHOLD
    scale_split_threshold: float = DENSIFY_SCALE_SPLIT
    opacity_prune_threshold: float = DENSIFY_PRUNE_OPACITY
    interval: int = DENSIFY_INTERVAL
    opacity_reset_interval: int = DENSIFY_OPACITY_RESET_INTERVAL
    from_step: int = DENSIFY_FROM_STEP
    until_step: int = DENSIFY_UNTIL_STEP
    max_gaussians: int = DENSIFY_MAX_GAUSSIANS
    reset_opacity: float = RESET_OPACITY

    def validate(self) -> None:
        for name in ("grad_threshold", "scale_split_threshold", "opacity_prune_threshold", "interval",
                     "opacity_reset_interval", "max_gaussians", "reset_opacity"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"densify setting '{name}' must be positive")


class GradientStats:
    """Running sum of screen-space positional gradient norms per Gaussian."""

    def __init__(self, n: int):
        self.accum = np.zeros(n)
        self.count = np.zeros(n)

    def update(self, grads: GradientBuffer) -> None:
        seen = grads.visible
        self.accum[seen] += grads.mean2d_norm[seen]
        self.count[seen] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)


def reset_opacity(gmap: GaussianMap, value: float = RESET_OPACITY) -> GaussianMap:
    gmap.alpha_logit = np.minimum(gmap.alpha_logit, logit(value))
    return gmap


def densify_and_prune(gmap: GaussianMap, grad_norms: np.ndarray, cfg: DensifyConfig,
                      step: Optional[int] = None) -> Tuple[GaussianMap, np.ndarray]:
    """Clone/split high-gradient Gaussians and drop transparent ones.

    Returns the new map and, per new row, the old row it continues (-1 for
    new or modified rows) so optimizer moments can follow.
    """
    n = len(gmap)
    grad_norms = np.asarray(grad_norms, dtype=float)
    if grad_norms.shape != (n,):
        raise TrainingError(f"gradient accumulator covers {grad_norms.shape[0]} Gaussians, map has {n}")

    candidates = np.flatnonzero(grad_norms > cfg.grad_threshold)
    room = max(cfg.max_gaussians - n, 0)
    if candidates.size > room:
        candidates = candidates[np.argsort(-grad_norms[candidates], kind="stable")[:room]]
        candidates.sort()

    scales = gmap.scales
    max_scale = scales.max(axis=1)
    small = max_scale[candidates] < cfg.scale_split_threshold
    clone_idx = candidates[small]
    split_idx = candidates[~small]

    def shifted(index, factor):
        part = gmap.take(index)
        axis = np.argmax(part.scales, axis=1)
        direction = part.rotations()[np.arange(len(part)), :, axis]
        part.mu = part.mu + factor * part.scales[np.arange(len(part)), axis][:, None] * direction
        return part

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    pieces = [gmap.take(keep)]
    sources = [np.flatnonzero(keep)]

    if clone_idx.size:
        pieces.append(shifted(clone_idx, 1.0))
        sources.append(np.full(clone_idx.size, -1))
    if split_idx.size:
        for sign in (1.0, -1.0):
            child = shifted(split_idx, 0.5 * sign)
            child.log_s = child.log_s - np.log(SPLIT_SCALE_DIVISOR)
            pieces.append(child)
            sources.append(np.full(split_idx.size, -1))

    out = pieces[0]
    for piece in pieces[1:]:
        out = out.concat(piece)
    source = np.concatenate(sources)

    alive = out.opacity >= cfg.opacity_prune_threshold
    if not alive.any() and len(out):
        alive[np.argmax(out.alpha_logit)] = True
    out = out.take(alive)
    source = source[alive]

    if step is not None and step > 0 and step % cfg.opacity_reset_interval == 0:
        reset_opacity(out, cfg.reset_opacity)
        source = np.full(len(out), -1)

    logger.debug(f"densify: cloned {clone_idx.size}, split {split_idx.size}, pruned {int((~alive).sum())}, "
                 f"{n} -> {len(out)} Gaussians")
    return out, source


def prune(gmap: GaussianMap, threshold: float) -> Tuple[GaussianMap, np.ndarray]:
    alive = gmap.opacity >= threshold
    if not alive.any():
        alive[np.argmax(gmap.alpha_logit)] = True
    return gmap.take(alive), np.flatnonzero(alive)


@dataclass
class TrainingSettings:
    lrs: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    render: RenderSettings = field(default_factory=RenderSettings)
    seed: int = 0
    log_every: int = LOG_EVERY
    progress: bool = True


def _log_step(stage: str, step: int, report: LossReport, n: int, history: Optional[List[Dict]]) -> None:
    record = {"stage": stage, "step": step, **report.as_record(), "gaussians": n}
    if history is not None:
        history.append(record)
    logger.info(f"[{stage}] step={step} total={report.total:.6f} rgb={report.rgb:.6f} feat={report.feat:.6f} "
                f"depth={report.depth_smooth:.6f} sky={report.sky:.6f} gaussians={n}")


def _frame_schedule(n_frames: int, steps: int, rng: np.random.Generator) -> List[int]:
    order: List[int] = []
    while len(order) < steps:
        order.extend(rng.permutation(n_frames).tolist())
    return order[:steps]


def compute_residuals(gmap: GaussianMap, dataset: MultitraverseDataset,
                      settings: Optional[RenderSettings] = None, progress: bool = False) -> List[ResidualMap]:
    """Re-render every frame once and return its per-pixel feature residual."""
    residuals = []
    for frame in tqdm(dataset.frames, desc="Rendering residuals", disable=not progress):
        out = render(gmap, frame.camera, settings)
        _, residual = loss_feat_kl(out.feat, frame.feat_map, frame.name)
        residuals.append(residual)
    return residuals


def train_distill(gmap: GaussianMap, dataset: MultitraverseDataset, steps: int = DISTILL_STEPS,
                  settings: Optional[TrainingSettings] = None,
                  history: Optional[List[Dict]] = None) -> Tuple[GaussianMap, List[ResidualMap]]:
    """
    Ajuste conjunto de RGB y features con densificación, seguido de un re-render para los residuales.

    Args:
        gmap (GaussianMap): Mapa inicial; no se modifica.
        dataset (MultitraverseDataset): Frames con mapa de features en todos ellos.
        steps (int): Pasos de optimización, uno por frame muestreado.
        settings (TrainingSettings): Tasas de aprendizaje, pesos de pérdida, densificación y render.
        history (list): Si se pasa, recibe un registro por paso logueado.

    Returns:
        tuple: (GaussianMap entrenado, lista de ResidualMap en el orden de `dataset.frames`)
    """
    settings = settings or TrainingSettings()
    missing = [f.name for f in dataset.frames if f.feat_map is None]
    if missing:
        raise TrainingError(f"feature distillation needs a feature map for every frame, missing: {missing[0]}")
    if steps < 0:
        raise TrainingError("steps must be non-negative")
    if not dataset.frames:
        raise TrainingError("dataset has no frames")
    if len(gmap) and gmap.feat_dim != dataset.feat_dim:
        raise TrainingError(f"map feat_dim {gmap.feat_dim} does not match dataset feature dim {dataset.feat_dim}")

    gmap = gmap.copy()
    rng = np.random.default_rng(settings.seed)
    rs, dcfg, weights = settings.render, settings.densify, settings.weights
    state = OptimizerState.for_map(gmap, settings.lrs, steps, dataset.scene_extent())
    stats = GradientStats(len(gmap))

    schedule = _frame_schedule(len(dataset.frames), steps, rng)
    for step, frame_index in enumerate(tqdm(schedule, desc="Distilling features", disable=not settings.progress), 1):
        frame = dataset.frames[frame_index]
        camera = frame.camera
        out = render(gmap, camera, rs)
        rgb = loss_rgb_l1(out.rgb, frame.image)
        feat, _ = loss_feat_kl(out.feat, frame.feat_map)
        report = LossReport.combine(weights, rgb=rgb, feat=feat)
        grads = render_backward(
            gmap, camera, out,
            grad_rgb=weights.rgb * loss_rgb_l1_grad(out.rgb, frame.image),
            grad_feat=weights.feat * loss_feat_kl_grad(out.feat, frame.feat_map),
            settings=rs,
        )
        if step <= dcfg.until_step:
            stats.update(grads)
        adam_step(gmap, grads, state)

        if dcfg.from_step <= step <= dcfg.until_step and step % dcfg.interval == 0:
            gmap, source = densify_and_prune(gmap, stats.mean(), dcfg)
            state.reindex(source)
            stats = GradientStats(len(gmap))
        if step < dcfg.until_step and step % dcfg.opacity_reset_interval == 0:
            reset_opacity(gmap, dcfg.reset_opacity)
            state.reset_group("alpha_logit")

        if step % settings.log_every == 0 or step == steps:
            _log_step("distill", step, report, len(gmap), history)

    residuals = compute_residuals(gmap, dataset, rs, settings.progress)
    logger.info(f"[distill] finished after {steps} steps with {len(gmap)} Gaussians")
    return gmap, residuals


def train_env(gmap: GaussianMap, dataset: MultitraverseDataset, masks: Sequence, steps: int = ENV_STEPS,
              use_depth_sky: bool = False, settings: Optional[TrainingSettings] = None,
              history: Optional[List[Dict]] = None) -> GaussianMap:
    """
    Ajuste fino RGB enmascarado: los píxeles marcados como efímeros tienen peso cero y las features
    quedan congeladas.

    Args:
        gmap (GaussianMap): Mapa destilado; no se modifica.
        dataset (MultitraverseDataset): Frames de entrenamiento.
        masks (Sequence): Una EphemeralityMask (o arreglo booleano h x w) por frame.
        steps (int): Pasos de optimización.
        use_depth_sky (bool): Agrega la suavidad de profundidad y la pérdida de cielo en frames con máscara de cielo.
        settings (TrainingSettings): Tasas de aprendizaje, pesos, poda y render.
        history (list): Si se pasa, recibe un registro por paso logueado.

    Returns:
        GaussianMap: Mapa del entorno.
    """
    settings = settings or TrainingSettings()
    if len(masks) != len(dataset.frames):
        raise TrainingError(f"got {len(masks)} masks for {len(dataset.frames)} frames")
    if steps < 0:
        raise TrainingError("steps must be non-negative")
    mask_arrays = []
    for frame, mask in zip(dataset.frames, masks):
        values = np.asarray(getattr(mask, "mask", mask), dtype=bool)
        if values.shape != (frame.height, frame.width):
            raise TrainingError(f"{frame.name}: mask shape {values.shape} does not match image")
        mask_arrays.append(values)

    gmap = gmap.copy()
    rng = np.random.default_rng(settings.seed)
    rs, dcfg, weights = settings.render, settings.densify, settings.weights
    state = OptimizerState.for_map(gmap, settings.lrs, steps, dataset.scene_extent(), frozen=("feat",))

    schedule = _frame_schedule(len(dataset.frames), steps, rng) if dataset.frames else []
    trained = False
    for step, frame_index in enumerate(tqdm(schedule, desc="Optimizing environment", disable=not settings.progress), 1):
        frame = dataset.frames[frame_index]
        camera = frame.camera
        weight = 1.0 - mask_arrays[frame_index].astype(np.float64)
        out = render(gmap, camera, rs, render_features=False)
        rgb = loss_rgb_l1(out.rgb, frame.image, weight)
        grad_rgb = weights.rgb * loss_rgb_l1_grad(out.rgb, frame.image, weight)
        depth_term = sky_term = 0.0
        grad_depth = grad_opacity = None
        if use_depth_sky and frame.sky_mask is not None:
            disparity, ddepth = disparity_from_depth(out.depth, frame.sky_mask, INV_DEPTH_EPS)
            depth_term = loss_depth_smooth(disparity, frame.image)
            grad_depth = weights.depth * loss_depth_smooth_grad(disparity, frame.image) * ddepth
            sky_term = loss_sky(out.opacity, frame.sky_mask)
            grad_opacity = weights.sky * loss_sky_grad(out.opacity, frame.sky_mask)
        report = LossReport.combine(weights, rgb=rgb, depth_smooth=depth_term, sky=sky_term)
        grads = render_backward(gmap, camera, out, grad_rgb=grad_rgb, grad_depth=grad_depth,
                                grad_opacity=grad_opacity, settings=rs)
        adam_step(gmap, grads, state)
        trained = trained or not grads.is_zero()

        # topology frozen in this stage apart from pruning; a map that never saw a gradient stays as it was
        if trained and dcfg.from_step <= step <= dcfg.until_step and step % dcfg.interval == 0:
            gmap, source = prune(gmap, dcfg.opacity_prune_threshold)
            state.reindex(source)

        if step % settings.log_every == 0 or step == steps:
            _log_step("env", step, report, len(gmap), history)

    logger.info(f"[env] finished after {steps} steps with {len(gmap)} Gaussians")
    return gmap
