"""
Three-stage mapping workflow over on-disk artifacts.

    stage-1 init     seed points -> initial Gaussian map
    stage-2 distill  feature distillation -> residual maps
    stage-2 mine     residual maps -> ephemerality masks
    stage-3 env      masked fine-tuning -> environment map
    eval             metrics against ground truth, when the dataset has it

Every stage reads its inputs from the files its predecessor wrote, so any
stage can be rerun on its own.
"""

import dataclasses
import functools
import logging
import os
from typing import Dict, List, Optional

from constants.defaults import (
    DISTILLED_MAP_NAME, FINAL_MAP_NAME, INITIAL_MAP_NAME, MASK_DIR_NAME, PCA_MODEL_NAME, RENDER_DIR_NAME,
    REPORT_DIR_NAME, RESIDUAL_DIR_NAME, RESOLVED_CONFIG_NAME,
)
from utils.config import PipelineConfig, write_resolved
from utils.csv_utility import CSVUtility
from utils.dataset_io import (
    frame_stem, load_dataset, load_gaussians, load_ground_truth, load_masks, load_residuals, save_dataset,
    save_gaussians, save_masks, save_residuals, write_png,
)
from utils.emerseg import mine_masks
from utils.errors import GaussianMappingError, PipelineError
from utils.file_utility import FileUtility
from utils.gaussian_model import MultitraverseDataset, init_from_points
from utils.metrics import evaluate, reports_to_frame
from utils.pca_reducer import PcaModel, ingest_feature_maps
from utils.splat_renderer import render
from utils.synth_world import generate_dataset
from utils.trainer import train_distill, train_env

logger = logging.getLogger(__name__)

STAGE_SYNTH = "synth"
STAGE_INIT = "stage-1 init"
STAGE_DISTILL = "stage-2 distill"
STAGE_MINE = "stage-2 mine"
STAGE_ENV = "stage-3 env"
STAGE_RENDER = "render"
STAGE_EVAL = "eval"


def pipeline_stage(name: str):
    """Re-raise library errors as PipelineError tagged with the stage name."""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(cfg: PipelineConfig, *args, **kwargs):
            logger.info(f"[{name}] starting")
            try:
                result = func(cfg, *args, **kwargs)
            except PipelineError:
                raise
            except GaussianMappingError as e:
                raise PipelineError(name, str(e)) from e
            if isinstance(result, str) and not FileUtility.check_file_generation(result):
                raise PipelineError(name, f"expected output {result} was not written")
            logger.info(f"[{name}] done")
            return result
        return wrapper
    return decorator


def artifact_path(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


def _require_dataset(cfg: PipelineConfig, stage: str) -> None:
    if not os.path.isdir(cfg.dataset_dir):
        raise PipelineError(stage, f"dataset directory {cfg.dataset_dir} does not exist")


def _training_dataset(cfg: PipelineConfig, stage: str, require_features: bool) -> MultitraverseDataset:
    """The dataset as the trainer sees it: features reduced by the stored PCA model when one applies."""
    _require_dataset(cfg, stage)
    dataset = load_dataset(cfg.dataset_dir, require_features=require_features, progress=cfg.progress)
    if dataset.feat_dim is not None and dataset.feat_dim > cfg.feat_dim:
        model_path = FileUtility.require_file(artifact_path(cfg, PCA_MODEL_NAME), stage)
        dataset, _ = ingest_feature_maps(dataset, cfg.feat_dim, model=PcaModel.load(model_path))
    return dataset


@pipeline_stage(STAGE_SYNTH)
def run_synth(cfg: PipelineConfig) -> str:
    spec = dataclasses.replace(cfg.synth, seed=cfg.seed, workers=cfg.workers)
    dataset, gt = generate_dataset(spec, progress=cfg.progress, settings=cfg.render_settings())
    save_dataset(dataset, gt, cfg.dataset_dir, workers=cfg.workers, progress=cfg.progress)
    return cfg.dataset_dir


@pipeline_stage(STAGE_INIT)
def run_init(cfg: PipelineConfig) -> str:
    _require_dataset(cfg, STAGE_INIT)
    dataset = load_dataset(cfg.dataset_dir, progress=cfg.progress)
    FileUtility.ensure_directory_exists(cfg.output_dir)
    feat_dim = cfg.feat_dim
    if dataset.feat_dim is not None:
        if dataset.feat_dim > cfg.feat_dim:
            _, model = ingest_feature_maps(dataset, cfg.feat_dim, seed=cfg.seed)
            model.save(artifact_path(cfg, PCA_MODEL_NAME))
            logger.info(f"PCA model stored at {artifact_path(cfg, PCA_MODEL_NAME)}")
        else:
            if dataset.feat_dim < cfg.feat_dim:
                logger.warning(f"Dataset features have {dataset.feat_dim} channels, fewer than FEAT_DIM={cfg.feat_dim}; "
                               f"using {dataset.feat_dim}")
            feat_dim = dataset.feat_dim
    gmap = init_from_points(dataset.seed_points, dataset.seed_colors, feat_dim, cfg.sh_degree)
    path = artifact_path(cfg, INITIAL_MAP_NAME)
    save_gaussians(gmap, path)
    logger.info(f"Initial map with {len(gmap)} Gaussians written to {path}")
    return path


@pipeline_stage(STAGE_DISTILL)
def run_distill(cfg: PipelineConfig) -> str:
    gmap = load_gaussians(FileUtility.require_file(artifact_path(cfg, INITIAL_MAP_NAME), STAGE_DISTILL))
    dataset = _training_dataset(cfg, STAGE_DISTILL, require_features=True)
    history: List[Dict] = []
    gmap, residuals = train_distill(gmap, dataset, cfg.distill_steps, cfg.training_settings(), history)
    path = artifact_path(cfg, DISTILLED_MAP_NAME)
    save_gaussians(gmap, path)
    save_residuals(residuals, dataset.frames, artifact_path(cfg, RESIDUAL_DIR_NAME))
    CSVUtility.write_history(history, os.path.join(cfg.output_dir, REPORT_DIR_NAME, "distill_history.parquet"))
    return path


@pipeline_stage(STAGE_MINE)
def run_mine(cfg: PipelineConfig) -> str:
    _require_dataset(cfg, STAGE_MINE)
    residual_dir = FileUtility.require_file(artifact_path(cfg, RESIDUAL_DIR_NAME), STAGE_MINE)
    dataset = load_dataset(cfg.dataset_dir, progress=cfg.progress)
    residuals = load_residuals(residual_dir, dataset.frames)
    masks = mine_masks(residuals, cfg.mining, [(f.height, f.width) for f in dataset.frames])
    mask_dir = artifact_path(cfg, MASK_DIR_NAME)
    save_masks(masks, dataset.frames, mask_dir)
    return mask_dir


@pipeline_stage(STAGE_ENV)
def run_train_env(cfg: PipelineConfig) -> str:
    gmap = load_gaussians(FileUtility.require_file(artifact_path(cfg, DISTILLED_MAP_NAME), STAGE_ENV))
    mask_dir = FileUtility.require_file(artifact_path(cfg, MASK_DIR_NAME), STAGE_ENV)
    _require_dataset(cfg, STAGE_ENV)
    dataset = load_dataset(cfg.dataset_dir, progress=cfg.progress)
    masks = load_masks(mask_dir, dataset.frames)
    history: List[Dict] = []
    gmap = train_env(gmap, dataset, masks, cfg.env_steps, cfg.use_depth_sky, cfg.training_settings(), history)
    path = artifact_path(cfg, FINAL_MAP_NAME)
    save_gaussians(gmap, path)
    CSVUtility.write_history(history, os.path.join(cfg.output_dir, REPORT_DIR_NAME, "env_history.parquet"))
    return path


def _latest_map(cfg: PipelineConfig, stage: str) -> str:
    for name in (FINAL_MAP_NAME, DISTILLED_MAP_NAME, INITIAL_MAP_NAME):
        path = artifact_path(cfg, name)
        if os.path.exists(path):
            return path
    raise PipelineError(stage, f"no Gaussian map found in {cfg.output_dir}")


@pipeline_stage(STAGE_RENDER)
def run_render(cfg: PipelineConfig, map_path: Optional[str] = None) -> str:
    gmap = load_gaussians(map_path or _latest_map(cfg, STAGE_RENDER))
    _require_dataset(cfg, STAGE_RENDER)
    dataset = load_dataset(cfg.dataset_dir, progress=cfg.progress)
    out_dir = artifact_path(cfg, RENDER_DIR_NAME)
    settings = cfg.render_settings()
    for frame in dataset.frames:
        out = render(gmap, frame.camera, settings, render_features=False)
        write_png(os.path.join(out_dir, frame_stem(frame.traversal_id, frame.frame_id) + ".png"), out.rgb)
    logger.info(f"Rendered {len(dataset.frames)} frames to {out_dir}")
    return out_dir


@pipeline_stage(STAGE_EVAL)
def run_eval(cfg: PipelineConfig) -> Optional[str]:
    _require_dataset(cfg, STAGE_EVAL)
    dataset = load_dataset(cfg.dataset_dir, progress=cfg.progress)
    gt = load_ground_truth(cfg.dataset_dir, dataset)
    if gt is None:
        logger.warning(f"{cfg.dataset_dir} has no ground truth; nothing to evaluate")
        return None
    mask_dir = artifact_path(cfg, MASK_DIR_NAME)
    masks = load_masks(mask_dir, dataset.frames) if os.path.isdir(mask_dir) else None
    map_path = artifact_path(cfg, FINAL_MAP_NAME)
    gmap = load_gaussians(map_path) if os.path.exists(map_path) else None
    if masks is None and gmap is None:
        raise PipelineError(STAGE_EVAL, "neither masks nor an environment map to evaluate")

    reports = evaluate(dataset, gt, gmap, masks, cfg.render_settings(), progress=cfg.progress)
    report_dir = os.path.join(cfg.output_dir, REPORT_DIR_NAME)
    table_path = os.path.join(report_dir, "metrics.csv")
    CSVUtility.write_table(reports_to_frame(reports), table_path)
    summary = [{"metric": r.name, "value": r.aggregate, "entries": len(r.per_frame),
                "masked_policy": r.masked_policy} for r in reports.values()]
    jsonl_path = os.path.join(report_dir, "metrics.jsonl")
    if os.path.exists(jsonl_path):
        os.remove(jsonl_path)
    CSVUtility.append_jsonl(summary, jsonl_path)
    return table_path


def run_pipeline(cfg: PipelineConfig) -> Dict[str, str]:
    """Run the enabled stages in order; returns the artifact each stage produced."""
    stages = [
        (cfg.run_init, STAGE_INIT, run_init),
        (cfg.run_distill, STAGE_DISTILL, run_distill),
        (cfg.run_mine, STAGE_MINE, run_mine),
        (cfg.run_env, STAGE_ENV, run_train_env),
        (cfg.run_eval, STAGE_EVAL, run_eval),
    ]
    enabled = [(name, func) for on, name, func in stages if on]
    if not enabled:
        logger.info("No stages enabled")
        return {}
    write_resolved(cfg, artifact_path(cfg, RESOLVED_CONFIG_NAME))
    artifacts = {}
    for name, func in enabled:
        artifacts[name] = func(cfg)
    return artifacts
