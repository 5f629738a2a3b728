import json
import os

import numpy as np
import pandas as pd
import pytest

import main as cli
from constants.defaults import (
    DISTILLED_MAP_NAME, FINAL_MAP_NAME, INITIAL_MAP_NAME, MASK_DIR_NAME, PCA_MODEL_NAME, REPORT_DIR_NAME,
    RESIDUAL_DIR_NAME, RESOLVED_CONFIG_NAME,
)
from utils.config import load_config
from utils.csv_utility import CSVUtility
from utils.dataset_io import load_dataset, load_gaussians
from utils.errors import PipelineError
from utils.pipeline import run_distill, run_eval, run_init, run_pipeline, run_render, run_synth

TINY = {
    "SEED": "2",
    "PROGRESS": "false",
    "DISTILL_STEPS": "4",
    "ENV_STEPS": "3",
    "LOG_EVERY": "2",
    "SYNTH_NUM_TRAVERSALS": "2",
    "SYNTH_FRAMES_PER_TRAVERSAL": "2",
    "SYNTH_IMAGE_HEIGHT": "24",
    "SYNTH_IMAGE_WIDTH": "32",
    "SYNTH_FEAT_HEIGHT": "12",
    "SYNTH_FEAT_WIDTH": "16",
    "SYNTH_STREET_LENGTH": "14",
    "SYNTH_CELL": "0.5",
    "SYNTH_TRANSIENT_COUNT_RANGE": "1,2",
    "SYNTH_TRANSIENT_Z_RANGE": "3.0,9.0",
    "SYNTH_SEED_COUNT": "100",
}


def tiny_config(dataset_dir, output_dir, **extra):
    overrides = dict(TINY, DATASET_DIR=str(dataset_dir), OUTPUT_DIR=str(output_dir))
    overrides.update({k.upper(): str(v) for k, v in extra.items()})
    return load_config(overrides=overrides, environ={})


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    run_synth(tiny_config(root, root / "unused"))
    return root


def test_all_stages_disabled_does_nothing(tmp_path):
    cfg = tiny_config(tmp_path / "data", tmp_path / "out", run_init="false", run_distill="false",
                      run_mine="false", run_env="false", run_eval="false")
    assert run_pipeline(cfg) == {}
    assert not os.path.exists(tmp_path / "out" / RESOLVED_CONFIG_NAME)


def test_missing_predecessor_output_names_the_stage(tmp_path):
    with pytest.raises(PipelineError, match=r"\[stage-2 distill\] missing input"):
        run_distill(tiny_config(tmp_path / "data", tmp_path / "out"))


def test_library_errors_are_tagged_with_the_stage(tmp_path):
    (tmp_path / "data").mkdir()
    with pytest.raises(PipelineError, match=r"\[stage-1 init\] manifest not found") as info:
        run_init(tiny_config(tmp_path / "data", tmp_path / "out"))
    assert info.value.stage == "stage-1 init"


@pytest.mark.slow
def test_synthetic_dataset_on_disk(dataset_dir):
    dataset = load_dataset(str(dataset_dir), require_features=True)
    assert len(dataset) == 4
    assert dataset.feat_dim == 8
    assert os.path.isdir(dataset_dir / "gt")


@pytest.mark.slow
def test_full_pipeline_writes_every_artifact(dataset_dir, tmp_path):
    cfg = tiny_config(dataset_dir, tmp_path)
    artifacts = run_pipeline(cfg)
    assert list(artifacts) == ["stage-1 init", "stage-2 distill", "stage-2 mine", "stage-3 env", "eval"]
    for name in (INITIAL_MAP_NAME, DISTILLED_MAP_NAME, FINAL_MAP_NAME, RESIDUAL_DIR_NAME, MASK_DIR_NAME,
                 RESOLVED_CONFIG_NAME):
        assert os.path.exists(tmp_path / name), name
    assert not os.path.exists(tmp_path / PCA_MODEL_NAME)

    history = CSVUtility.read_history(str(tmp_path / REPORT_DIR_NAME / "distill_history.parquet"))
    assert list(history["step"]) == [2, 4]
    metrics = pd.read_csv(tmp_path / REPORT_DIR_NAME / "metrics.csv")
    assert {"iou", "psnr", "ssim"} <= set(metrics["metric"])
    assert metrics.loc[metrics["metric"] == "iou", "value"].between(0, 1).all()

    run_eval(cfg)
    with open(tmp_path / REPORT_DIR_NAME / "metrics.jsonl") as f:
        lines = [json.loads(line) for line in f]
    assert len(lines) == len({line["metric"] for line in lines})


@pytest.mark.slow
def test_pipeline_is_deterministic(dataset_dir, tmp_path):
    first = run_pipeline(tiny_config(dataset_dir, tmp_path / "a", run_eval="false"))
    second = run_pipeline(tiny_config(dataset_dir, tmp_path / "b", run_eval="false"))
    with open(first["stage-3 env"], "rb") as a, open(second["stage-3 env"], "rb") as b:
        assert a.read() == b.read()


@pytest.mark.slow
def test_wide_features_are_reduced_with_a_stored_pca_model(dataset_dir, tmp_path):
    cfg = tiny_config(dataset_dir, tmp_path, feat_dim=4, run_mine="false", run_env="false", run_eval="false")
    run_pipeline(cfg)
    assert os.path.exists(tmp_path / PCA_MODEL_NAME)
    assert load_gaussians(str(tmp_path / DISTILLED_MAP_NAME)).feat_dim == 4


@pytest.mark.slow
def test_render_uses_latest_map(dataset_dir, tmp_path):
    cfg = tiny_config(dataset_dir, tmp_path)
    run_init(cfg)
    out_dir = run_render(cfg)
    assert sorted(os.listdir(out_dir)) == ["traversal_0", "traversal_1"]
    assert os.path.exists(os.path.join(out_dir, "traversal_1", "frame_1.png"))


def test_cli_synth_requires_seed(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["synth", "--output-dir", str(tmp_path)])
    assert info.value.code == 2


def test_cli_reports_stage_failure(tmp_path):
    code = cli.main(["distill", "--output-dir", str(tmp_path / "out"), "--dataset-dir", str(tmp_path / "none"),
                     "--set", "PROGRESS=false"])
    assert code == 1
    assert os.path.exists(tmp_path / "out" / "gaussian_mapping.log")


def test_cli_rejects_unknown_setting(tmp_path):
    assert cli.main(["init", "--output-dir", str(tmp_path), "--set", "BOGUS=1"]) == 1


def test_cli_plot(tmp_path):
    table = tmp_path / "ablation.csv"
    pd.DataFrame({"axis": ["traversals"] * 3, "value": [1, 2, 3], "iou": [0.2, 0.4, 0.5]}).to_csv(table, index=False)
    out = tmp_path / "iou.png"
    assert cli.main(["plot", "--output-dir", str(tmp_path), "--table", str(table), "--out", str(out)]) == 0
    assert out.stat().st_size > 0


@pytest.mark.slow
def test_cli_end_to_end(tmp_path):
    settings = [arg for key, value in TINY.items() if key != "SEED" for arg in ("--set", f"{key}={value}")]
    data, out = str(tmp_path / "data"), str(tmp_path / "out")
    common = ["--dataset-dir", data, "--output-dir", out] + settings
    assert cli.main(["synth", "--seed", "5"] + common) == 0
    assert cli.main(["run", "--seed", "5", "--steps", "3"] + common) == 0
    assert cli.main(["train-env", "--seed", "5", "--steps", "2"] + common) == 0
    gmap = load_gaussians(os.path.join(out, FINAL_MAP_NAME))
    assert len(gmap) > 0 and np.all(np.isfinite(gmap.mu))
