import numpy as np
import pytest

from utils.ablation import COLUMNS, _held_out_subset, parse_axis_values, run_ablation
from utils.errors import ConfigError
from utils.gaussian_model import CameraIntrinsics, CameraPose, Frame, MultitraverseDataset
from utils.synth_world import SceneSpec
from utils.trainer import DensifyConfig, TrainingSettings

TINY = SceneSpec(
    seed=4, num_traversals=2, frames_per_traversal=2, image_height=24, image_width=32, feat_height=12,
    feat_width=16, street_length=14.0, cell=0.5, transient_count_range=(1, 2), transient_z_range=(3.0, 9.0),
    seed_count=100,
)
QUIET = TrainingSettings(densify=DensifyConfig(from_step=10_000, until_step=10_000), progress=False)


def test_parse_axis_values():
    assert parse_axis_values("traversals", ["1", " 5", 10]) == [1, 5, 10]
    assert parse_axis_values("feat_res", ["55x90", "110X180"]) == [(55, 90), (110, 180)]
    assert parse_axis_values("distill_steps", ["0"]) == [0]


@pytest.mark.parametrize("axis, values, message", [
    ("resolution", ["1"], "unknown ablation axis"),
    ("traversals", [], "at least one"),
    ("feat_res", ["55-90"], "invalid value"),
    ("feat_dim", ["two"], "invalid value"),
    ("traversals", ["0"], "out of range"),
])
def test_invalid_axis_values(axis, values, message):
    with pytest.raises(ConfigError, match=message):
        parse_axis_values(axis, values)


def three_traversals():
    intr = CameraIntrinsics(4.0, 4.0, 1.5, 1.5, 4, 4)
    frames = [Frame(image=np.zeros((4, 4, 3)), pose=CameraPose.identity(), intrinsics=intr, traversal_id=k,
                    frame_id=j) for k in range(3) for j in range(2)]
    return MultitraverseDataset(frames, 3, np.zeros((1, 3)), np.zeros((1, 3)))


def test_held_out_traversal_is_always_last():
    dataset = three_traversals()
    single = _held_out_subset(dataset, 1)
    assert single.num_traversals == 1
    assert [f.traversal_id for f in single.frames] == [0, 0]
    assert all(a.image is b.image for a, b in zip(single.frames, dataset.frames[4:]))
    pair = _held_out_subset(dataset, 2)
    assert [f.traversal_id for f in pair.frames] == [0, 0, 1, 1]
    assert pair.frames[2].image is dataset.frames[4].image


@pytest.mark.slow
def test_traversal_sweep_evaluates_the_same_held_out_traversal():
    table = run_ablation(TINY, "traversals", ["1", "2"], QUIET, steps=2)
    assert list(table.columns) == COLUMNS
    assert list(table["value"]) == ["1", "2"]
    assert list(table["frames"]) == [2, 4]
    assert table["iou"].between(0.0, 1.0).all()


@pytest.mark.slow
def test_feature_resolution_sweep_reports_storage():
    table = run_ablation(TINY, "feat_res", ["6x8", "12x16"], QUIET, steps=1)
    frames = TINY.num_traversals * TINY.frames_per_traversal
    assert list(table["storage_bytes"]) == [frames * (16 + 4 * 48), frames * (16 + 4 * 192)]


@pytest.mark.slow
def test_single_value_gives_one_row():
    table = run_ablation(TINY, "feat_dim", ["3"], QUIET, steps=1)
    assert len(table) == 1
    assert table["axis"].iloc[0] == "feat_dim"
