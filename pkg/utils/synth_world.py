"""
Procedural multitraverse street scenes with ground truth.

World frame follows the camera convention (x right, y down, z forward): the
ground is the plane y = camera_height, low walls line the street at
x = +-street_half_width and building facades stand behind them. Parked or
passing vehicles are the transients, re-sampled per traversal.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from constants.defaults import (
    GT_MASK_THRESHOLD, SH_C0, SKY_OPACITY_THRESHOLD, SYNTH_BRIGHTNESS_JITTER, SYNTH_FEAT_DIM, SYNTH_FEAT_HEIGHT,
    SYNTH_FEAT_WIDTH, SYNTH_FEATURE_NOISE, SYNTH_FRAMES_PER_TRAVERSAL, SYNTH_IMAGE_HEIGHT, SYNTH_IMAGE_WIDTH,
    SYNTH_POSE_JITTER_R_DEG, SYNTH_POSE_JITTER_T, SYNTH_TRAVERSALS,
)
from utils.errors import SceneModelError
from utils.gaussian_model import (
    Camera, CameraIntrinsics, CameraPose, Frame, GaussianMap, MultitraverseDataset, logit, rgb_to_sh0,
)
from utils.splat_renderer import RenderSettings, render

logger = logging.getLogger(__name__)

GROUND, WALL, BUILDING, VEHICLE = range(4)
NUM_CLASSES = 4
CLASS_NAMES = ("ground", "wall", "building", "vehicle")


@dataclass
class SceneSpec:
    seed: int = 0
    num_traversals: int = SYNTH_TRAVERSALS
    frames_per_traversal: int = SYNTH_FRAMES_PER_TRAVERSAL
    image_height: int = SYNTH_IMAGE_HEIGHT
    image_width: int = SYNTH_IMAGE_WIDTH
    feat_height: int = SYNTH_FEAT_HEIGHT
    feat_width: int = SYNTH_FEAT_WIDTH
    feat_dim: int = SYNTH_FEAT_DIM
    focal_ratio: float = 0.9
    street_length: float = 30.0
    street_half_width: float = 4.0
    wall_height: float = 1.0
    building_depth: float = 1.5
    building_height_range: Tuple[float, float] = (3.0, 6.0)
    building_width_range: Tuple[float, float] = (3.0, 6.0)
    camera_height: float = 1.5
    path_margin: float = 10.0
    cell: float = 0.25
    surface_opacity: float = 0.95
    transient_count_range: Tuple[int, int] = (2, 4)
    transient_size_range: Tuple[float, float] = (0.8, 1.4)
    transient_x_range: Tuple[float, float] = (1.2, 3.2)
    transient_z_range: Tuple[float, float] = (5.0, 28.0)
    static_transient_prob: float = 0.0
    pose_jitter_t: float = SYNTH_POSE_JITTER_T
    pose_jitter_r_deg: float = SYNTH_POSE_JITTER_R_DEG
    brightness_jitter: float = SYNTH_BRIGHTNESS_JITTER
    feature_noise: float = SYNTH_FEATURE_NOISE
    allow_class_collisions: bool = False
    seed_count: int = 2000
    seed_noise: float = 0.02
    workers: int = 1

    def validate(self) -> None:
        if self.num_traversals < 1:
            raise SceneModelError("a scene needs at least one traversal")
        if self.frames_per_traversal < 1:
            raise SceneModelError("a traversal needs at least one frame")
        if self.feat_dim < NUM_CLASSES and not self.allow_class_collisions:
            raise SceneModelError(f"feat_dim {self.feat_dim} is below the {NUM_CLASSES} material classes")
        if self.feat_dim < 1:
            raise SceneModelError("feat_dim must be positive")
        lo, hi = self.transient_count_range
        if lo < 0 or hi < lo:
            raise SceneModelError(f"invalid transient count range {self.transient_count_range}")
        if self.cell <= 0 or self.street_length <= self.path_margin:
            raise SceneModelError("street must be longer than the path margin and cells positive")

    def intrinsics(self) -> CameraIntrinsics:
        f = self.focal_ratio * self.image_width
        return CameraIntrinsics(f, f, (self.image_width - 1) / 2.0, (self.image_height - 1) / 2.0,
                                self.image_width, self.image_height)


@dataclass
class GroundTruthBundle:
    transient_masks: List[np.ndarray] = field(default_factory=list)
    depths: List[np.ndarray] = field(default_factory=list)
    backgrounds: List[np.ndarray] = field(default_factory=list)
    sky_masks: List[np.ndarray] = field(default_factory=list)
    surface_points: np.ndarray = None
    seed_points: np.ndarray = None
    seed_colors: np.ndarray = None

    def __len__(self) -> int:
        return len(self.transient_masks)


def class_embedding(classes: np.ndarray, feat_dim: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    """One-hot of (class mod feat_dim) plus Gaussian noise."""
    classes = np.asarray(classes, dtype=int)
    feat = np.zeros((classes.size, feat_dim))
    feat[np.arange(classes.size), classes % feat_dim] = 1.0
    return feat + rng.normal(0.0, noise, feat.shape)


class _SurfaceBuilder:
    """Collects axis-aligned surface patches as flat Gaussians."""

    def __init__(self, cell: float, opacity: float):
        self.cell = cell
        self.opacity = opacity
        self.mu: List[np.ndarray] = []
        self.log_s: List[np.ndarray] = []
        self.colors: List[np.ndarray] = []
        self.classes: List[np.ndarray] = []

    def plane(self, axis: int, offset: float, u_range, v_range, color_fn, material: int) -> None:
        """Grid of patches on the plane coordinate[axis] = offset, spanned by the two other axes."""
        u_axis, v_axis = [a for a in range(3) if a != axis]
        us = np.arange(u_range[0] + self.cell / 2, u_range[1], self.cell)
        vs = np.arange(v_range[0] + self.cell / 2, v_range[1], self.cell)
        if us.size == 0 or vs.size == 0:
            return
        uu, vv = np.meshgrid(us, vs, indexing="ij")
        pts = np.zeros((uu.size, 3))
        pts[:, axis] = offset
        pts[:, u_axis] = uu.ravel()
        pts[:, v_axis] = vv.ravel()
        scale = np.full((pts.shape[0], 3), 0.5 * self.cell)
        scale[:, axis] = 0.05 * self.cell
        self.mu.append(pts)
        self.log_s.append(np.log(scale))
        self.colors.append(np.clip(color_fn(pts), 0.0, 1.0))
        self.classes.append(np.full(pts.shape[0], material))

    def box(self, lo, hi, color_fn, material: int, bottom: bool = False) -> None:
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            for offset in (lo[axis], hi[axis]):
                # y grows downwards, the bottom face sits at hi[1]
                if axis == 1 and offset == hi[1] and not bottom:
                    continue
                self.plane(axis, offset, (lo[others[0]], hi[others[0]]), (lo[others[1]], hi[others[1]]),
                           color_fn, material)

    def build(self, feat_dim: int, noise: float, rng: np.random.Generator) -> Tuple[GaussianMap, np.ndarray]:
        if not self.mu:
            return GaussianMap.empty(feat_dim), np.zeros(0, dtype=int)
        mu = np.concatenate(self.mu)
        n = mu.shape[0]
        classes = np.concatenate(self.classes)
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        sh = rgb_to_sh0(np.concatenate(self.colors))[:, None, :]
        gmap = GaussianMap(mu, q, np.concatenate(self.log_s), np.full(n, logit(self.opacity)), sh,
                           class_embedding(classes, feat_dim, noise, rng), 0, feat_dim)
        return gmap, classes


def _textured(base, rng: np.random.Generator, period: float = 1.0, contrast: float = 0.15):
    """Colour function: base albedo modulated by a deterministic lattice pattern."""
    base = np.asarray(base, dtype=float)
    phase = rng.uniform(0, 2 * np.pi, 3)

    def color(pts):
        wave = np.sin(pts[:, 0] * 2 * np.pi / period + phase[0]) * np.sin(pts[:, 2] * 2 * np.pi / period + phase[2])
        wave += 0.5 * np.sin(pts[:, 1] * 2 * np.pi / period + phase[1])
        return base[None, :] * (1.0 + contrast * wave[:, None])

    return color


def _ground_color(spec: SceneSpec, rng: np.random.Generator):
    asphalt = _textured((0.35, 0.35, 0.37), rng, period=1.5, contrast=0.2)

    def color(pts):
        out = asphalt(pts)
        stripe = (np.abs(pts[:, 0]) < 0.15) & (np.mod(pts[:, 2], 3.0) < 1.5)
        out[stripe] = (0.9, 0.9, 0.85)
        return out

    return color


def _facade_color(base, rng: np.random.Generator):
    wall = _textured(base, rng, period=2.0, contrast=0.1)

    def color(pts):
        out = wall(pts)
        window = (np.mod(pts[:, 2], 1.5) < 0.7) & (np.mod(pts[:, 1], 1.5) < 0.7) & (pts[:, 1] < 0.0)
        out[window] = out[window] * 0.35
        return out

    return color


def _build_environment(spec: SceneSpec, rng: np.random.Generator) -> Tuple[GaussianMap, np.ndarray]:
    builder = _SurfaceBuilder(spec.cell, spec.surface_opacity)
    ground_y = spec.camera_height
    hw = spec.street_half_width
    builder.plane(1, ground_y, (-hw, hw), (0.0, spec.street_length), _ground_color(spec, rng), GROUND)
    wall_top = ground_y - spec.wall_height
    for side in (-1.0, 1.0):
        builder.plane(0, side * hw, (wall_top, ground_y), (0.0, spec.street_length),
                      _textured((0.6, 0.55, 0.5), rng, period=0.8), WALL)
        z = 0.0
        while z < spec.street_length:
            width = min(rng.uniform(*spec.building_width_range), spec.street_length - z)
            height = rng.uniform(*spec.building_height_range)
            albedo = rng.uniform(0.3, 0.85, 3)
            facade_x = side * (hw + spec.building_depth)
            builder.plane(0, facade_x, (ground_y - height, wall_top), (z, z + width), _facade_color(albedo, rng),
                          BUILDING)
            z += width
    return builder.build(spec.feat_dim, spec.feature_noise, rng)


def _vehicle(spec: SceneSpec, rng: np.random.Generator, placement) -> GaussianMap:
    x, z, width, length, height = placement
    builder = _SurfaceBuilder(spec.cell * 0.6, spec.surface_opacity)
    ground_y = spec.camera_height
    body = rng.uniform(0.1, 0.9, 3)
    body[rng.integers(3)] = rng.uniform(0.8, 1.0)
    builder.box((x - width / 2, ground_y - height, z - length / 2), (x + width / 2, ground_y, z + length / 2),
                _textured(body, rng, period=0.7, contrast=0.1), VEHICLE)
    gmap, _ = builder.build(spec.feat_dim, spec.feature_noise, rng)
    return gmap


def _place_transients(spec: SceneSpec, rng: np.random.Generator, count: int, taken: List) -> List[Tuple]:
    placements = []
    x_lo, x_hi = spec.transient_x_range
    z_lo, z_hi = spec.transient_z_range
    for _ in range(count):
        size = rng.uniform(*spec.transient_size_range)
        width, length, height = 1.2 * size, 2.2 * size, 0.9 * size
        if x_hi - x_lo < width or z_hi - z_lo < length:
            raise SceneModelError(f"infeasible transient placement: region x{spec.transient_x_range} "
                                  f"z{spec.transient_z_range} cannot hold a {width:.2f}x{length:.2f} object")
        for _attempt in range(100):
            side = rng.choice((-1.0, 1.0))
            x = side * rng.uniform(x_lo + width / 2, x_hi - width / 2)
            z = rng.uniform(z_lo + length / 2, z_hi - length / 2)
            clear = all(abs(x - px) > (width + pw) / 2 or abs(z - pz) > (length + pl) / 2
                        for px, pz, pw, pl, _ in taken + placements)
            if clear:
                placements.append((x, z, width, length, height))
                break
        else:
            raise SceneModelError("infeasible transient placement: could not find free space after 100 attempts")
    return placements


def build_scene(spec: SceneSpec) -> Tuple[GaussianMap, List[GaussianMap]]:
    """Ground-truth environment map and one transient map per traversal."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    env, _ = _build_environment(spec, rng)
    parked = None
    transients = []
    for k in range(spec.num_traversals):
        count = int(rng.integers(spec.transient_count_range[0], spec.transient_count_range[1] + 1))
        layout = []
        maps = []
        if count and spec.static_transient_prob > 0 and rng.uniform() < spec.static_transient_prob:
            if parked is None:
                parked_rng = np.random.default_rng([spec.seed, 1])
                placement = _place_transients(spec, parked_rng, 1, [])[0]
                parked = (placement, _vehicle(spec, parked_rng, placement))
            layout.append(parked[0])
            maps.append(parked[1])
            count -= 1
        for placement in _place_transients(spec, rng, count, layout):
            layout.append(placement)
            maps.append(_vehicle(spec, rng, placement))
        merged = GaussianMap.empty(spec.feat_dim)
        for m in maps:
            merged = merged.concat(m)
        transients.append(merged)
    logger.info(f"Built scene seed={spec.seed}: {len(env)} environment Gaussians, "
                f"{sum(len(t) for t in transients)} transient Gaussians over {spec.num_traversals} traversals")
    return env, transients


def base_trajectory(spec: SceneSpec) -> List[CameraPose]:
    zs = np.linspace(0.0, spec.street_length - spec.path_margin, spec.frames_per_traversal)
    return [CameraPose.look_at((0.0, 0.0, z), (0.0, 0.3 * spec.camera_height, z + 10.0)) for z in zs]


def _jitter(pose: CameraPose, spec: SceneSpec, rng: np.random.Generator) -> CameraPose:
    delta = Rotation.from_rotvec(rng.normal(0.0, np.deg2rad(spec.pose_jitter_r_deg), 3)).as_matrix()
    center = pose.center + rng.normal(0.0, spec.pose_jitter_t, 3)
    rotation = delta @ pose.rotation
    return CameraPose(rotation, -rotation @ center)


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG persistence is lossless."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def generate_dataset(spec: SceneSpec, progress: bool = False,
                     settings: Optional[RenderSettings] = None) -> Tuple[MultitraverseDataset, GroundTruthBundle]:
    """
    Genera los frames de todos los recorridos y su verdad de referencia.

    Args:
        spec (SceneSpec): Escena sintética; la misma semilla produce los mismos bytes.
        progress (bool): Muestra la barra de progreso.
        settings (RenderSettings): Ajustes de render de las imágenes y features.

    Returns:
        tuple: (MultitraverseDataset, GroundTruthBundle)
    """
    env, transients = build_scene(spec)
    rng = np.random.default_rng([spec.seed, 2])
    settings = settings or RenderSettings()
    intr = spec.intrinsics()
    base = base_trajectory(spec)

    jobs = []
    for k in range(spec.num_traversals):
        brightness = 1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
        for j, pose in enumerate(base):
            jobs.append((k, j, _jitter(pose, spec, rng), brightness))

    def render_frame(job):
        k, j, pose, brightness = job
        camera = Camera(pose, intr, spec.feat_height, spec.feat_width)
        scene = env.concat(transients[k])
        indicator = np.concatenate([np.zeros(len(env)), np.ones(len(transients[k]))])
        full = render(scene, camera, settings, extra=indicator)
        clean = render(env, camera, settings, render_features=False)
        image = quantize_image(full.rgb * brightness)
        mask = full.extra[..., 0] > GT_MASK_THRESHOLD
        background = np.where(mask[..., None], quantize_image(clean.rgb * brightness), image)
        frame = Frame(
            image=image, pose=pose, intrinsics=intr, traversal_id=k, frame_id=j,
            feat_map=full.feat.astype(np.float32).astype(np.float64), gt_mask=mask,
            gt_depth=full.depth.astype(np.float32).astype(np.float64),
            sky_mask=full.opacity < SKY_OPACITY_THRESHOLD,
        )
        return frame, background

    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            results = list(tqdm(pool.map(render_frame, jobs), total=len(jobs), desc="Rendering frames",
                                disable=not progress))
    else:
        results = [render_frame(job) for job in tqdm(jobs, desc="Rendering frames", disable=not progress)]

    frames = [frame for frame, _ in results]
    count = min(spec.seed_count, len(env))
    pick = np.sort(rng.choice(len(env), size=count, replace=False))
    seed_points = (env.mu[pick] + rng.normal(0.0, spec.seed_noise, (count, 3))).astype(np.float32).astype(np.float64)
    seed_colors = np.clip(env.sh[pick, 0, :] * SH_C0 + 0.5, 0.0, 1.0)
    seed_colors = seed_colors.astype(np.float32).astype(np.float64)

    gt = GroundTruthBundle(
        transient_masks=[f.gt_mask for f in frames], depths=[f.gt_depth for f in frames],
        backgrounds=[bg for _, bg in results], sky_masks=[f.sky_mask for f in frames],
        surface_points=env.mu.astype(np.float32).astype(np.float64), seed_points=seed_points, seed_colors=seed_colors,
    )
    dataset = MultitraverseDataset(frames, spec.num_traversals, seed_points, seed_colors,
                                   {"scene_seed": spec.seed, "feat_dim": spec.feat_dim})
    logger.info(f"Generated {len(frames)} frames over {spec.num_traversals} traversals "
                f"({sum(int(m.any()) for m in gt.transient_masks)} with transients)")
    return dataset, gt
