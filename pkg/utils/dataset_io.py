"""
On-disk formats: Gaussian-map PLY, F32F feature files, PNG images/masks and
the dataset manifest.

Dataset layout:

    <dir>/manifest.json
    <dir>/seed_points.ply
    <dir>/traversal_<k>/frame_<j>.png
    <dir>/traversal_<k>/frame_<j>.feat
    <dir>/gt/traversal_<k>/frame_<j>_{mask,background,sky}.png, frame_<j>_depth.feat
    <dir>/gt/surface_points.ply
"""

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from plyfile import PlyData, PlyElement
from tqdm import tqdm

from constants.defaults import FEATURE_MAGIC, GT_DIR_NAME, MANIFEST_NAME, SEED_POINTS_NAME, SURFACE_POINTS_NAME
from utils.emerseg import EphemeralityMask
from utils.errors import DatasetError, PlyFormatError, SceneModelError
from utils.file_utility import FileUtility
from utils.gaussian_model import (
    CameraIntrinsics, CameraPose, Frame, GaussianMap, MultitraverseDataset, sh_coeff_count,
)
from utils.losses import ResidualMap
from utils.synth_world import GroundTruthBundle

logger = logging.getLogger(__name__)

FRAME_PATTERN = re.compile(r"traversal_(\d+)[/\\]frame_(\d+)\.png$")
HEADER_FIELDS = ("feat_dim", "sh_degree")


def _gaussian_properties(feat_dim: int, sh_degree: int) -> List[str]:
    names = ["x", "y", "z"] + [f"rot_{i}" for i in range(4)] + [f"scale_{i}" for i in range(3)] + ["opacity"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (sh_coeff_count(sh_degree) - 1))]
    names += [f"feat_{i}" for i in range(feat_dim)]
    return names


def save_gaussians(gmap: GaussianMap, path: str) -> None:
    """Binary little-endian PLY, float32 properties; header comments record feat_dim and sh_degree."""
    FileUtility.ensure_directory_exists(os.path.dirname(os.path.abspath(path)))
    names = _gaussian_properties(gmap.feat_dim, gmap.sh_degree)
    n = len(gmap)
    # f_rest is channel-major: all higher-order coefficients of red, then green, then blue
    rest = np.transpose(gmap.sh[:, 1:, :], (0, 2, 1)).reshape(n, -1)
    columns = np.concatenate([gmap.mu, gmap.q, gmap.log_s, gmap.alpha_logit[:, None], gmap.sh[:, 0, :], rest,
                              gmap.feat], axis=1)
    elements = np.empty(n, dtype=[(name, "<f4") for name in names])
    for i, name in enumerate(names):
        elements[name] = columns[:, i]
    comments = [f"feat_dim {gmap.feat_dim}", f"sh_degree {gmap.sh_degree}"]
    PlyData([PlyElement.describe(elements, "vertex")], byte_order="<", comments=comments).write(path)
    logger.info(f"Saved {n} Gaussians to {path}")


def _header_values(ply: PlyData, path: str) -> Dict[str, int]:
    values = {}
    for comment in ply.comments:
        parts = comment.split()
        if len(parts) == 2 and parts[0] in HEADER_FIELDS:
            try:
                values[parts[0]] = int(parts[1])
            except ValueError:
                raise PlyFormatError("malformed header comment", parts[0], path)
    for name in HEADER_FIELDS:
        if name not in values:
            raise PlyFormatError("malformed header, missing comment", name, path)
    return values


def load_gaussians(path: str) -> GaussianMap:
    if not os.path.exists(path):
        raise DatasetError("Gaussian map file not found", path)
    try:
        ply = PlyData.read(path)
    except Exception as e:
        raise PlyFormatError(f"malformed PLY file: {e}", path=path)
    header = _header_values(ply, path)
    if "vertex" not in [el.name for el in ply.elements]:
        raise PlyFormatError("missing element", "vertex", path)
    vertex = ply["vertex"]
    present = {p.name for p in vertex.properties}
    try:
        names = _gaussian_properties(header["feat_dim"], header["sh_degree"])
    except SceneModelError as e:
        raise PlyFormatError(str(e), "sh_degree", path)

    columns = []
    for name in names:
        if name not in present:
            raise PlyFormatError("missing property", name, path)
        values = np.asarray(vertex[name], dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise PlyFormatError("non-finite values in property", name, path)
        columns.append(values)
    data = np.stack(columns, axis=1) if columns else np.zeros((0, 0))
    n = data.shape[0]
    k = sh_coeff_count(header["sh_degree"])
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = data[:, 11:14]
    sh[:, 1:, :] = np.transpose(data[:, 14:14 + 3 * (k - 1)].reshape(n, 3, k - 1), (0, 2, 1))
    offset = 14 + 3 * (k - 1)
    gmap = GaussianMap(data[:, 0:3], data[:, 3:7], data[:, 7:10], data[:, 10], sh, data[:, offset:],
                       header["sh_degree"], header["feat_dim"])
    if n:
        try:
            gmap.validate()
        except SceneModelError as e:
            raise PlyFormatError(str(e), path=path)
    return gmap


def write_feature_file(path: str, values: np.ndarray) -> None:
    """F32F: magic, u32 height, u32 width, u32 channels, then row-major little-endian float32."""
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[..., None]
    if values.ndim != 3:
        raise DatasetError(f"feature array must be h x w x d, got {values.shape}", path)
    FileUtility.ensure_directory_exists(os.path.dirname(os.path.abspath(path)))
    header = np.array(values.shape, dtype="<u4").tobytes()
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(header)
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_feature_file(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DatasetError("feature file not found", path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != FEATURE_MAGIC:
        raise DatasetError("bad feature file magic", path)
    if len(raw) < 16:
        raise DatasetError("truncated feature file header", path)
    h, w, d = np.frombuffer(raw[4:16], dtype="<u4").astype(int)
    expected = 16 + 4 * h * w * d
    if len(raw) != expected:
        raise DatasetError(f"feature payload is {len(raw) - 16} bytes, header declares {4 * h * w * d}", path)
    return np.frombuffer(raw[16:], dtype="<f4").reshape(h, w, d).astype(np.float64)


def feature_file_size(h: int, w: int, d: int) -> int:
    return 16 + 4 * h * w * d


def write_png(path: str, image: np.ndarray) -> None:
    """RGB floats in [0, 1] or a boolean / single-channel mask."""
    FileUtility.ensure_directory_exists(os.path.dirname(os.path.abspath(path)))
    image = np.asarray(image)
    if image.dtype == bool:
        data = image.astype(np.uint8) * 255
    else:
        data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if data.ndim == 3:
        data = data[..., ::-1]
    if not cv2.imwrite(path, np.ascontiguousarray(data)):
        raise DatasetError("could not write image", path)


def read_png(path: str) -> np.ndarray:
    data = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if data is None:
        raise DatasetError("could not read image", path)
    if data.ndim == 3:
        data = data[..., :3][..., ::-1]
    return data.astype(np.float64) / 255.0


def read_mask_png(path: str) -> np.ndarray:
    data = read_png(path)
    if data.ndim == 3:
        data = data[..., 0]
    return data > 0.5


def save_points(path: str, points: np.ndarray, colors: Optional[np.ndarray] = None) -> None:
    FileUtility.ensure_directory_exists(os.path.dirname(os.path.abspath(path)))
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    names = ["x", "y", "z"] + (["red", "green", "blue"] if colors is not None else [])
    columns = points if colors is None else np.concatenate([points, np.asarray(colors).reshape(-1, 3)], axis=1)
    elements = np.empty(points.shape[0], dtype=[(name, "<f4") for name in names])
    for i, name in enumerate(names):
        elements[name] = columns[:, i]
    PlyData([PlyElement.describe(elements, "vertex")], byte_order="<").write(path)


def load_points(path: str) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if not os.path.exists(path):
        raise DatasetError("point file not found", path)
    vertex = PlyData.read(path)["vertex"]
    present = {p.name for p in vertex.properties}
    for name in ("x", "y", "z"):
        if name not in present:
            raise PlyFormatError("missing property", name, path)
    points = np.stack([np.asarray(vertex[n], dtype=np.float64) for n in ("x", "y", "z")], axis=1)
    colors = None
    if {"red", "green", "blue"} <= present:
        colors = np.stack([np.asarray(vertex[n], dtype=np.float64) for n in ("red", "green", "blue")], axis=1)
        if np.issubdtype(vertex["red"].dtype, np.integer):
            colors /= 255.0
    return points, colors


def frame_stem(traversal_id: int, frame_id: int) -> str:
    return os.path.join(f"traversal_{traversal_id}", f"frame_{frame_id}")


def save_dataset(dataset: MultitraverseDataset, gt, directory: str, workers: int = 1, progress: bool = False) -> None:
    """Write a dataset (and optional ground truth) in the layout `load_dataset` reads."""
    FileUtility.ensure_directory_exists(directory)
    entries = []
    for frame in dataset.frames:
        stem = frame_stem(frame.traversal_id, frame.frame_id)
        entries.append({
            "traversal": frame.traversal_id,
            "frame": frame.frame_id,
            "image": stem + ".png",
            "feat": stem + ".feat" if frame.feat_map is not None else None,
            "intrinsics": frame.intrinsics.to_dict(),
            "rotation": frame.pose.rotation.ravel().tolist(),
            "translation": frame.pose.translation.tolist(),
        })

    def write_frame(i):
        frame = dataset.frames[i]
        stem = os.path.join(directory, frame_stem(frame.traversal_id, frame.frame_id))
        write_png(stem + ".png", frame.image)
        if frame.feat_map is not None:
            write_feature_file(stem + ".feat", frame.feat_map)
        if gt is not None:
            gt_stem = os.path.join(directory, GT_DIR_NAME, frame_stem(frame.traversal_id, frame.frame_id))
            write_png(gt_stem + "_mask.png", gt.transient_masks[i])
            write_png(gt_stem + "_background.png", gt.backgrounds[i])
            write_png(gt_stem + "_sky.png", gt.sky_masks[i])
            write_feature_file(gt_stem + "_depth.feat", gt.depths[i])

    indices = range(len(dataset.frames))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(tqdm(pool.map(write_frame, indices), total=len(dataset.frames), desc="Writing frames",
                      disable=not progress))
    else:
        for i in tqdm(indices, desc="Writing frames", disable=not progress):
            write_frame(i)

    manifest = {"num_traversals": dataset.num_traversals, "extra": dataset.extra, "frames": entries}
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    save_points(os.path.join(directory, SEED_POINTS_NAME), dataset.seed_points, dataset.seed_colors)
    if gt is not None and gt.surface_points is not None:
        save_points(os.path.join(directory, GT_DIR_NAME, SURFACE_POINTS_NAME), gt.surface_points)
    logger.info(f"Wrote {len(dataset.frames)} frames to {directory}")


def _read_manifest(directory: str) -> dict:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DatasetError("manifest not found", path)
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest: {e}", path)


def load_dataset(directory: str, require_features: bool = False, progress: bool = False) -> MultitraverseDataset:
    manifest = _read_manifest(directory)
    by_stem = {}
    for entry in manifest.get("frames", []):
        by_stem[os.path.normpath(entry["image"])] = entry

    on_disk = []
    for root, _, files in os.walk(directory):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), directory)
            if rel.startswith(GT_DIR_NAME + os.sep):
                continue
            match = FRAME_PATTERN.search(rel)
            if match:
                on_disk.append((int(match.group(1)), int(match.group(2)), os.path.normpath(rel)))
    on_disk.sort()

    frames = []
    for traversal_id, frame_id, rel in tqdm(on_disk, desc="Loading frames", disable=not progress):
        image_path = os.path.join(directory, rel)
        entry = by_stem.get(rel)
        if entry is None:
            raise DatasetError("missing pose for image", image_path)
        image = read_png(image_path)
        intr = CameraIntrinsics(**entry["intrinsics"])
        if image.ndim != 3 or (intr.height, intr.width) != image.shape[:2]:
            raise DatasetError(f"image is {image.shape[:2]}, manifest declares {(intr.height, intr.width)}",
                               image_path)
        feat_path = os.path.join(directory, frame_stem(traversal_id, frame_id) + ".feat")
        feat = read_feature_file(feat_path) if os.path.exists(feat_path) else None
        if feat is None and require_features:
            raise DatasetError("missing feature file", feat_path)

        gt_stem = os.path.join(directory, GT_DIR_NAME, frame_stem(traversal_id, frame_id))
        gt_mask = read_mask_png(gt_stem + "_mask.png") if os.path.exists(gt_stem + "_mask.png") else None
        sky = read_mask_png(gt_stem + "_sky.png") if os.path.exists(gt_stem + "_sky.png") else None
        depth = read_feature_file(gt_stem + "_depth.feat")[..., 0] if os.path.exists(gt_stem + "_depth.feat") else None
        try:
            pose = CameraPose(np.array(entry["rotation"]).reshape(3, 3), np.array(entry["translation"]))
            frames.append(Frame(image=image, pose=pose, intrinsics=intr, traversal_id=traversal_id,
                                frame_id=frame_id, feat_map=feat, gt_mask=gt_mask, gt_depth=depth, sky_mask=sky))
        except SceneModelError as e:
            raise DatasetError(str(e), image_path)

    seed_path = os.path.join(directory, SEED_POINTS_NAME)
    points, colors = load_points(seed_path)
    if colors is None:
        colors = np.full_like(points, 0.5)
    try:
        dataset = MultitraverseDataset(frames, int(manifest["num_traversals"]), points, colors,
                                       dict(manifest.get("extra", {})))
    except SceneModelError as e:
        raise DatasetError(str(e), directory)
    logger.info(f"Loaded {len(frames)} frames over {dataset.num_traversals} traversals from {directory}")
    return dataset


def load_ground_truth(directory: str, dataset: MultitraverseDataset):
    """Ground-truth bundle stored next to a dataset, or None when the dataset has none."""
    gt_dir = os.path.join(directory, GT_DIR_NAME)
    if not os.path.isdir(gt_dir):
        return None
    bundle = GroundTruthBundle()
    for frame in dataset.frames:
        stem = os.path.join(gt_dir, frame_stem(frame.traversal_id, frame.frame_id))
        if frame.gt_mask is None:
            raise DatasetError("missing ground-truth mask", stem + "_mask.png")
        bundle.transient_masks.append(frame.gt_mask)
        bundle.depths.append(frame.gt_depth)
        bundle.sky_masks.append(frame.sky_mask)
        bundle.backgrounds.append(read_png(stem + "_background.png"))
    surface = os.path.join(gt_dir, SURFACE_POINTS_NAME)
    if os.path.exists(surface):
        bundle.surface_points, _ = load_points(surface)
    bundle.seed_points, bundle.seed_colors = dataset.seed_points, dataset.seed_colors
    return bundle


def save_masks(masks: Sequence[EphemeralityMask], frames: Sequence[Frame], directory: str) -> None:
    if len(masks) != len(frames):
        raise DatasetError(f"got {len(masks)} masks for {len(frames)} frames", directory)
    for mask, frame in zip(masks, frames):
        write_png(os.path.join(directory, frame_stem(frame.traversal_id, frame.frame_id) + ".png"), mask.mask)
    logger.info(f"Saved {len(masks)} masks to {directory}")


def load_masks(directory: str, frames: Sequence[Frame]) -> List[EphemeralityMask]:
    masks = []
    for frame in frames:
        path = os.path.join(directory, frame_stem(frame.traversal_id, frame.frame_id) + ".png")
        if not os.path.exists(path):
            raise DatasetError("missing mask", path)
        mask = read_mask_png(path)
        if mask.shape != (frame.height, frame.width):
            raise DatasetError(f"mask is {mask.shape}, image is {(frame.height, frame.width)}", path)
        masks.append(EphemeralityMask(mask, frame.name))
    return masks


def save_residuals(residuals: Sequence[ResidualMap], frames: Sequence[Frame], directory: str) -> None:
    if len(residuals) != len(frames):
        raise DatasetError(f"got {len(residuals)} residual maps for {len(frames)} frames", directory)
    for residual, frame in zip(residuals, frames):
        write_feature_file(os.path.join(directory, frame_stem(frame.traversal_id, frame.frame_id) + ".feat"),
                           residual.values)
    logger.info(f"Saved {len(residuals)} residual maps to {directory}")


def load_residuals(directory: str, frames: Sequence[Frame]) -> List[ResidualMap]:
    residuals = []
    for frame in frames:
        path = os.path.join(directory, frame_stem(frame.traversal_id, frame.frame_id) + ".feat")
        values = read_feature_file(path)
        if values.shape[2] != 1:
            raise DatasetError(f"residual file has {values.shape[2]} channels, expected 1", path)
        residuals.append(ResidualMap(values[..., 0], frame.name))
    return residuals
