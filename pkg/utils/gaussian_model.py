"""
Gaussian map, camera model and multitraverse dataset containers.

The map is stored as a structure of arrays (one row per Gaussian) so the
renderer and the optimizer can work on whole parameter groups at once.
`Gaussian3D` is the single-Gaussian view of one row.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from constants.defaults import INIT_KNN, INIT_OPACITY, SH_C0, SH_C1
from utils.errors import SceneModelError

logger = logging.getLogger(__name__)

PARAM_GROUPS = ("mu", "q", "log_s", "alpha_logit", "sh", "feat")
SUPPORTED_SH_DEGREES = (0, 1)


def sh_coeff_count(sh_degree: int) -> int:
    if sh_degree not in SUPPORTED_SH_DEGREES:
        raise SceneModelError(f"unsupported sh_degree {sh_degree}, expected one of {SUPPORTED_SH_DEGREES}")
    return (sh_degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return np.log(p / (1.0 - p))


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions (w, x, y, z), assumed unit length -> (N, 3, 3)."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions: (N, 4) -> (N, 4, 3, 3)."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1),
    ], -2)
    dx = np.stack([
        np.stack([zero, y, z], -1),
        np.stack([y, -2.0 * x, -w], -1),
        np.stack([z, w, -2.0 * x], -1),
    ], -2)
    dy = np.stack([
        np.stack([-2.0 * y, x, w], -1),
        np.stack([x, zero, z], -1),
        np.stack([-w, z, -2.0 * y], -1),
    ], -2)
    dz = np.stack([
        np.stack([-2.0 * z, -w, x], -1),
        np.stack([w, -2.0 * z, y], -1),
        np.stack([x, y, zero], -1),
    ], -2)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1)


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Rotation matrix -> (w, x, y, z) with w >= 0."""
    xyzw = Rotation.from_matrix(R).as_quat()
    wxyz = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    sign = np.where(wxyz[..., :1] < 0, -1.0, 1.0)
    return wxyz * sign


@dataclass
class Gaussian3D:
    mu: np.ndarray
    q: np.ndarray
    log_s: np.ndarray
    alpha_logit: float
    sh: np.ndarray
    feat: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.alpha_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_s)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[0]))) - 1

    def rotation(self) -> np.ndarray:
        return quaternion_to_rotation(normalize_quaternions(np.asarray(self.q, dtype=float)))[0]


def covariance(g: Gaussian3D) -> np.ndarray:
    """Sigma = R diag(s^2) R^T with s = exp(log_s)."""
    R = g.rotation()
    M = R * np.exp(np.asarray(g.log_s, dtype=float))[None, :]
    return M @ M.T


def rotate(g: Gaussian3D, R0: np.ndarray) -> Gaussian3D:
    """Rigidly rotate a Gaussian about the world origin."""
    R = R0 @ g.rotation()
    return Gaussian3D(
        mu=R0 @ np.asarray(g.mu, dtype=float),
        q=matrix_to_quaternion(R),
        log_s=np.array(g.log_s, dtype=float),
        alpha_logit=g.alpha_logit,
        sh=np.array(g.sh, dtype=float),
        feat=np.array(g.feat, dtype=float),
    )


def sh_to_colors(sh: np.ndarray, view_dirs: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Evaluate degree-0/1 SH: sh (N, K, 3), view_dirs (N, 3) unit -> (N, 3)."""
    color = SH_C0 * sh[:, 0, :] + 0.5
    if sh.shape[1] > 1:
        x = view_dirs[:, 0:1]
        y = view_dirs[:, 1:2]
        z = view_dirs[:, 2:3]
        color = color - SH_C1 * y * sh[:, 1, :] + SH_C1 * z * sh[:, 2, :] - SH_C1 * x * sh[:, 3, :]
    if clamp:
        color = np.clip(color, 0.0, 1.0)
    return color


def sh_to_color(g: Gaussian3D, view_dir: Sequence[float]) -> np.ndarray:
    view_dir = np.asarray(view_dir, dtype=float)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise SceneModelError("view_dir must be a unit vector")
    return sh_to_colors(np.asarray(g.sh, dtype=float)[None], view_dir[None])[0]


def rgb_to_sh0(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=float) - 0.5) / SH_C0


class GaussianMap:
    """All Gaussians of one scene, one row per Gaussian."""

    def __init__(self, mu, q, log_s, alpha_logit, sh, feat, sh_degree: int = 0, feat_dim: Optional[int] = None):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n = self.mu.shape[0]
        self.q = np.asarray(q, dtype=np.float64).reshape(n, 4)
        self.log_s = np.asarray(log_s, dtype=np.float64).reshape(n, 3)
        self.alpha_logit = np.asarray(alpha_logit, dtype=np.float64).reshape(n)
        self.sh_degree = int(sh_degree)
        self.sh = np.asarray(sh, dtype=np.float64).reshape(n, sh_coeff_count(self.sh_degree), 3)
        feat = np.asarray(feat, dtype=np.float64)
        self.feat_dim = int(feat_dim if feat_dim is not None else (feat.shape[-1] if feat.ndim == 2 else 0))
        self.feat = feat.reshape(n, self.feat_dim)

    @classmethod
    def empty(cls, feat_dim: int, sh_degree: int = 0) -> "GaussianMap":
        k = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, k, 3)), np.zeros((0, feat_dim)), sh_degree, feat_dim)

    @classmethod
    def from_gaussians(cls, gaussians: List[Gaussian3D], feat_dim: Optional[int] = None, sh_degree: Optional[int] = None):
        if not gaussians:
            return cls.empty(feat_dim or 0, sh_degree or 0)
        degree = gaussians[0].sh_degree if sh_degree is None else sh_degree
        dim = len(gaussians[0].feat) if feat_dim is None else feat_dim
        for i, g in enumerate(gaussians):
            if len(g.feat) != dim or g.sh_degree != degree:
                raise SceneModelError(f"Gaussian {i} does not share feat_dim={dim} / sh_degree={degree}")
        return cls(
            np.stack([g.mu for g in gaussians]),
            np.stack([g.q for g in gaussians]),
            np.stack([g.log_s for g in gaussians]),
            np.array([g.alpha_logit for g in gaussians]),
            np.stack([g.sh for g in gaussians]),
            np.stack([g.feat for g in gaussians]).reshape(len(gaussians), dim),
            degree,
            dim,
        )

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.mu[i].copy(), self.q[i].copy(), self.log_s[i].copy(),
                          float(self.alpha_logit[i]), self.sh[i].copy(), self.feat[i].copy())

    @property
    def gaussians(self) -> List[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.alpha_logit)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_s)

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def rotations(self) -> np.ndarray:
        return quaternion_to_rotation(normalize_quaternions(self.q))

    def covariances(self) -> np.ndarray:
        M = self.rotations() * self.scales[:, None, :]
        return M @ np.transpose(M, (0, 2, 1))

    def copy(self) -> "GaussianMap":
        return GaussianMap(self.mu.copy(), self.q.copy(), self.log_s.copy(), self.alpha_logit.copy(),
                           self.sh.copy(), self.feat.copy(), self.sh_degree, self.feat_dim)

    def take(self, index) -> "GaussianMap":
        """Rows selected by an integer index array or a boolean mask."""
        return GaussianMap(self.mu[index], self.q[index], self.log_s[index], self.alpha_logit[index],
                           self.sh[index], self.feat[index], self.sh_degree, self.feat_dim)

    def concat(self, other: "GaussianMap") -> "GaussianMap":
        if other.feat_dim != self.feat_dim or other.sh_degree != self.sh_degree:
            raise SceneModelError("cannot merge maps with different feat_dim or sh_degree")
        return GaussianMap(
            np.concatenate([self.mu, other.mu]), np.concatenate([self.q, other.q]),
            np.concatenate([self.log_s, other.log_s]), np.concatenate([self.alpha_logit, other.alpha_logit]),
            np.concatenate([self.sh, other.sh]), np.concatenate([self.feat, other.feat]),
            self.sh_degree, self.feat_dim,
        )

    def quantized(self) -> "GaussianMap":
        """Copy whose values are exactly representable in float32 (what PLY persistence keeps)."""
        out = self.copy()
        for name in PARAM_GROUPS:
            setattr(out, name, getattr(out, name).astype(np.float32).astype(np.float64))
        return out

    def validate(self, tol: float = 1e-6) -> None:
        if len(self) == 0:
            raise SceneModelError("Gaussian map is empty")
        norms = np.linalg.norm(self.q, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
        if bad.size:
            raise SceneModelError(f"quaternion of Gaussian {bad[0]} is not normalized (|q|={norms[bad[0]]:.8f})")
        for name in PARAM_GROUPS:
            values = getattr(self, name)
            if not np.all(np.isfinite(values)):
                row = np.flatnonzero(~np.isfinite(values.reshape(len(self), -1)).all(axis=1))[0]
                raise SceneModelError(f"non-finite '{name}' for Gaussian {row}")
        if self.feat.shape[1] != self.feat_dim:
            raise SceneModelError(f"feat has {self.feat.shape[1]} channels, map declares {self.feat_dim}")

    def equals(self, other: "GaussianMap") -> bool:
        if (self.sh_degree, self.feat_dim, len(self)) != (other.sh_degree, other.feat_dim, len(other)):
            return False
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_GROUPS)


def init_from_points(points: np.ndarray, colors: np.ndarray, feat_dim: int, sh_degree: int = 0,
                     fallback_scale: float = 0.1) -> GaussianMap:
    """One isotropic Gaussian per seed point, sized by the mean distance to its nearest seeds."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise SceneModelError("no seed points")
    if colors.shape[0] != n:
        raise SceneModelError(f"{n} seed points but {colors.shape[0]} colors")

    k = min(INIT_KNN, n - 1)
    if k > 0:
        dists, _ = cKDTree(points).query(points, k=k + 1)
        mean_dist = np.mean(dists[:, 1:], axis=1)
        mean_dist = np.maximum(mean_dist, 1e-7)
    else:
        mean_dist = np.full(n, fallback_scale)

    sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    gmap = GaussianMap(
        mu=points.copy(),
        q=q,
        log_s=np.repeat(np.log(mean_dist)[:, None], 3, axis=1),
        alpha_logit=np.full(n, logit(INIT_OPACITY)),
        sh=sh,
        feat=np.zeros((n, feat_dim)),
        sh_degree=sh_degree,
        feat_dim=feat_dim,
    )
    logger.info(f"Initialized {n} Gaussians from seed points (feat_dim={feat_dim}, sh_degree={sh_degree})")
    return gmap


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SceneModelError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise SceneModelError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneModelError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera sampled at another resolution (integer pixel centres)."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=int(width),
            height=int(height),
        )

    def to_dict(self) -> Dict[str, float]:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}


@dataclass
class CameraPose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise SceneModelError("pose rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Camera at `eye` looking at `target`; camera axes x right, y down, z forward."""
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(R, -R @ eye)


@dataclass
class Camera:
    """Frame geometry needed by the renderer."""

    pose: CameraPose
    intrinsics: CameraIntrinsics
    feat_height: Optional[int] = None
    feat_width: Optional[int] = None

    @property
    def feat_intrinsics(self) -> Optional[CameraIntrinsics]:
        if self.feat_height is None or self.feat_width is None:
            return None
        return self.intrinsics.scaled(self.feat_width, self.feat_height)


@dataclass
class Frame:
    image: np.ndarray
    pose: CameraPose
    intrinsics: CameraIntrinsics
    traversal_id: int
    frame_id: int = 0
    feat_map: Optional[np.ndarray] = None
    gt_mask: Optional[np.ndarray] = None
    gt_depth: Optional[np.ndarray] = None
    sky_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.validate()

    @property
    def name(self) -> str:
        return f"traversal_{self.traversal_id}/frame_{self.frame_id}"

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def camera(self) -> Camera:
        if self.feat_map is None:
            return Camera(self.pose, self.intrinsics)
        return Camera(self.pose, self.intrinsics, self.feat_map.shape[0], self.feat_map.shape[1])

    def validate(self) -> None:
        h, w = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise SceneModelError(f"{self.name}: image must be h x w x 3, got {self.image.shape}")
        if (self.intrinsics.height, self.intrinsics.width) != (h, w):
            raise SceneModelError(f"{self.name}: intrinsics size does not match image {w}x{h}")
        if self.feat_map is not None:
            hf, wf = self.feat_map.shape[:2]
            # aspect ratios agree within one pixel of rounding
            if abs(hf * w / h - wf) > 1.0 and abs(wf * h / w - hf) > 1.0:
                raise SceneModelError(f"{self.name}: feature map {hf}x{wf} does not match image aspect {h}x{w}")
        for label in ("gt_mask", "gt_depth", "sky_mask"):
            value = getattr(self, label)
            if value is not None and value.shape[:2] != (h, w):
                raise SceneModelError(f"{self.name}: {label} shape {value.shape} does not match image {h}x{w}")


@dataclass
class MultitraverseDataset:
    frames: List[Frame]
    num_traversals: int
    seed_points: np.ndarray
    seed_colors: np.ndarray
    extra: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.seed_points = np.asarray(self.seed_points, dtype=np.float64).reshape(-1, 3)
        self.seed_colors = np.asarray(self.seed_colors, dtype=np.float64).reshape(-1, 3)
        self.validate()

    def validate(self) -> None:
        if self.seed_points.shape[0] == 0:
            raise SceneModelError("dataset has no seed points")
        for frame in self.frames:
            if not 0 <= frame.traversal_id < self.num_traversals:
                raise SceneModelError(f"{frame.name}: traversal id outside [0, {self.num_traversals})")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def feat_dim(self) -> Optional[int]:
        for frame in self.frames:
            if frame.feat_map is not None:
                return frame.feat_map.shape[2]
        return None

    def traversal_frames(self, traversal_id: int) -> List[Frame]:
        return [f for f in self.frames if f.traversal_id == traversal_id]

    def scene_extent(self) -> float:
        """Radius of the camera centres around their mean, padded like the splatting convention."""
        centers = np.stack([f.pose.center for f in self.frames]) if self.frames else np.zeros((1, 3))
        radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
        return max(radius, 1e-3) * 1.1

    def subset(self, traversal_ids: Sequence[int]) -> "MultitraverseDataset":
        """Frames of the given traversals, renumbered 0..len-1 in the given order."""
        remap = {t: i for i, t in enumerate(traversal_ids)}
        frames = []
        for frame in self.frames:
            if frame.traversal_id in remap:
                frames.append(Frame(
                    image=frame.image, pose=frame.pose, intrinsics=frame.intrinsics,
                    traversal_id=remap[frame.traversal_id], frame_id=frame.frame_id,
                    feat_map=frame.feat_map, gt_mask=frame.gt_mask, gt_depth=frame.gt_depth,
                    sky_mask=frame.sky_mask,
                ))
        return MultitraverseDataset(frames, len(traversal_ids), self.seed_points, self.seed_colors, dict(self.extra))
