"""
Ablation harness: regenerate a synthetic scene, run distillation and mining
for each value of one axis, and score the masks on a fixed held-out traversal.
"""

import dataclasses
import logging
import time
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from constants.defaults import DISTILL_STEPS
from utils.dataset_io import feature_file_size
from utils.emerseg import MiningConfig, mine_masks
from utils.errors import ConfigError
from utils.gaussian_model import MultitraverseDataset, init_from_points
from utils.metrics import iou
from utils.synth_world import SceneSpec, generate_dataset
from utils.trainer import TrainingSettings, train_distill

logger = logging.getLogger(__name__)

AXES = ("traversals", "feat_dim", "feat_res", "distill_steps")
COLUMNS = ["axis", "value", "iou", "runtime_s", "storage_bytes", "frames", "gaussians"]


def parse_axis_values(axis: str, values: Sequence) -> List:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis '{axis}', expected one of {', '.join(AXES)}")
    if not values:
        raise ConfigError("ablation needs at least one axis value")
    parsed = []
    for value in values:
        text = str(value).strip().lower()
        try:
            if axis == "feat_res":
                h, w = text.split("x")
                parsed.append((int(h), int(w)))
            else:
                parsed.append(int(text))
        except ValueError:
            raise ConfigError(f"invalid value '{value}' for axis {axis}")
    for value in parsed:
        numbers = value if isinstance(value, tuple) else (value,)
        if min(numbers) < (0 if axis == "distill_steps" else 1):
            raise ConfigError(f"value {value} out of range for axis {axis}")
    return parsed


def _held_out_subset(dataset: MultitraverseDataset, count: int) -> MultitraverseDataset:
    """First `count - 1` traversals plus the last one, which is always the evaluation traversal."""
    last = dataset.num_traversals - 1
    return dataset.subset(list(range(count - 1)) + [last])


def _score(dataset: MultitraverseDataset, steps: int, settings: TrainingSettings, mining: MiningConfig) -> dict:
    start = time.perf_counter()
    gmap = init_from_points(dataset.seed_points, dataset.seed_colors, dataset.feat_dim)
    gmap, residuals = train_distill(gmap, dataset, steps, settings)
    masks = mine_masks(residuals, mining, [(f.height, f.width) for f in dataset.frames])
    runtime = time.perf_counter() - start

    held_out = dataset.num_traversals - 1
    scores = [iou(m.mask, f.gt_mask) for m, f in zip(masks, dataset.frames) if f.traversal_id == held_out]
    storage = sum(feature_file_size(r.values.shape[0], r.values.shape[1], 1) for r in residuals)
    return {
        "iou": float(np.mean(scores)),
        "runtime_s": runtime,
        "storage_bytes": storage,
        "frames": len(dataset.frames),
        "gaussians": len(gmap),
    }


def run_ablation(spec: SceneSpec, axis: str, values: Sequence, settings: Optional[TrainingSettings] = None,
                 mining: Optional[MiningConfig] = None, steps: int = DISTILL_STEPS,
                 progress: bool = False) -> pd.DataFrame:
    """
    One row per axis value with the held-out-traversal IoU, stage-2 runtime and residual storage.

    Args:
        spec (SceneSpec): Base synthetic scene; the axis value overrides one of its fields.
        axis (str): traversals, feat_dim, feat_res ("HxW" values) or distill_steps.
        values (Sequence): Axis values, run in the given order.
        settings (TrainingSettings): Optimizer, loss and renderer settings shared by every run.
        mining (MiningConfig): Mining thresholds.
        steps (int): Distillation steps for every axis except distill_steps.
    """
    parsed = parse_axis_values(axis, values)
    settings = settings or TrainingSettings()
    mining = mining or MiningConfig()
    rows = []

    if axis == "traversals":
        base_spec = dataclasses.replace(spec, num_traversals=max(parsed))
        full, _ = generate_dataset(base_spec, progress=progress, settings=settings.render)

    for value in parsed:
        if axis == "traversals":
            dataset = _held_out_subset(full, value)
            row = _score(dataset, steps, settings, mining)
        elif axis == "distill_steps":
            if not rows:
                dataset, _ = generate_dataset(spec, progress=progress, settings=settings.render)
            row = _score(dataset, value, settings, mining)
        else:
            if axis == "feat_dim":
                run_spec = dataclasses.replace(spec, feat_dim=value, allow_class_collisions=True)
            else:
                run_spec = dataclasses.replace(spec, feat_height=value[0], feat_width=value[1])
            dataset, _ = generate_dataset(run_spec, progress=progress, settings=settings.render)
            row = _score(dataset, steps, settings, mining)

        label = f"{value[0]}x{value[1]}" if isinstance(value, tuple) else str(value)
        rows.append({"axis": axis, "value": label, **row})
        logger.info(f"[ablate] {axis}={label} iou={row['iou']:.4f} runtime={row['runtime_s']:.1f}s "
                    f"storage={row['storage_bytes']} gaussians={row['gaussians']}")

    return pd.DataFrame(rows, columns=COLUMNS)
