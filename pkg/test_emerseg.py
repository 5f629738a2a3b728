import numpy as np
import pytest

from utils.emerseg import (
    Contour, MiningConfig, filter_contours, find_contours, hulls_to_mask, merge_contours, mine_frame, mine_masks,
    normalize_and_activate,
)
from utils.errors import MiningError
from utils.losses import ResidualMap


def square(x0, y0, size):
    xs = np.arange(x0, x0 + size)
    ys = np.arange(y0, y0 + size)
    ring = [(x, y0) for x in xs] + [(xs[-1], y) for y in ys[1:]] + [(x, ys[-1]) for x in xs[-2::-1]] \
        + [(x0, y) for y in ys[-2:0:-1]]
    return Contour(points=np.array(ring, dtype=np.int64), area=size * size)


def test_constant_residual_activates_nothing():
    np.testing.assert_array_equal(normalize_and_activate(np.full((4, 4), 3.0)), np.zeros((4, 4)))


def test_activation_zeroes_values_below_threshold():
    np.testing.assert_allclose(normalize_and_activate(np.array([[0.0, 0.2, 1.0]]), 0.3), [[0.0, 0.0, 1.0]])
    np.testing.assert_allclose(normalize_and_activate(np.array([[0.0, 0.5, 1.0]]), 0.3), [[0.0, 0.5, 1.0]])


def test_raising_threshold_never_grows_activation():
    values = np.random.default_rng(0).uniform(size=(20, 30))
    active = [normalize_and_activate(values, delta1) > 0 for delta1 in np.linspace(0.0, 1.0, 11)]
    for low, high in zip(active, active[1:]):
        assert not np.any(high & ~low)
        assert high.sum() <= low.sum()


def test_blank_map_has_no_contours():
    assert find_contours(np.zeros((10, 10))) == []


def test_filled_square_contour():
    activated = np.zeros((12, 12))
    activated[3:8, 4:9] = 1.0
    (contour,) = find_contours(activated)
    assert len(contour.points) == 16
    assert contour.area == 25
    assert contour.bbox == (4, 3, 8, 7)


def test_contours_come_in_raster_order():
    activated = np.zeros((20, 20))
    activated[10:14, 2:6] = 1.0
    activated[3:7, 12:16] = 1.0
    contours = find_contours(activated)
    assert [c.top_left for c in contours] == [(3, 12), (10, 2)]


def test_small_contour_is_removed():
    assert filter_contours([Contour(square(0, 6, 3).points, 99)], 100, 0.7, 10) == []
    kept = filter_contours([Contour(square(0, 6, 3).points, 100)], 100, 0.7, 10)
    assert len(kept) == 1


def test_sky_band_contour_is_removed():
    in_sky = square(0, 0, 3)
    straddling = square(5, 1, 5)
    kept = filter_contours([in_sky, straddling], 1, 0.7, 10)
    assert len(kept) == 1 and kept[0] is straddling


def test_permissive_filter_is_identity():
    contours = [square(0, 0, 3), square(5, 5, 4)]
    kept = filter_contours(contours, 0, 1.0, 10)
    assert len(kept) == 2 and all(a is b for a, b in zip(kept, contours))


@pytest.mark.parametrize("gap, groups", [(5, 1), (9, 1), (10, 1), (11, 2)])
def test_merge_by_gap(gap, groups):
    left = square(0, 0, 5)
    right = square(5 + gap, 0, 5)
    assert len(merge_contours([left, right], 10)) == groups


def test_merge_is_transitive():
    chain = [square(0, 0, 3), square(10, 0, 3), square(20, 0, 3)]
    assert len(merge_contours(chain, 10)) == 1
    assert merge_contours([], 10) == []


def test_triangle_hull_fills_lattice_points():
    triangle = Contour(points=np.array([[0, 0], [10, 0], [0, 10]]), area=66)
    mask = hulls_to_mask([[triangle]], (12, 12), (12, 12)).mask
    assert mask.sum() == 66
    assert mask[0, 10] and mask[10, 0] and not mask[10, 10]


def test_hull_of_l_shape_is_its_convex_closure():
    activated = np.zeros((12, 12))
    activated[2:10, 2:4] = 1.0
    activated[8:10, 2:10] = 1.0
    groups = merge_contours(find_contours(activated), 10)
    mask = hulls_to_mask(groups, (12, 12), (12, 12)).mask
    assert np.all(mask[activated > 0])
    assert mask.sum() > (activated > 0).sum()
    assert mask[6, 5] and not mask[2, 9]


def test_mask_is_upsampled_by_nearest_neighbour():
    residual = np.zeros((8, 8))
    residual[4:7, 2:5] = 1.0
    cfg = MiningConfig(delta2=4, reference_area=64)
    mask = mine_frame(ResidualMap(residual, "f"), cfg, (16, 16)).mask
    assert mask.shape == (16, 16)
    expected = np.zeros((16, 16), dtype=bool)
    expected[8:14, 4:10] = True
    np.testing.assert_array_equal(mask, expected)


def test_single_blob_gives_one_hull():
    residual = np.zeros((22, 36))
    residual[8:20, 10:22] = 2.0
    cfg = MiningConfig(reference_area=22 * 36)
    (mask,) = mine_masks([ResidualMap(residual, "f")], cfg, (22, 36))
    np.testing.assert_array_equal(mask.mask, residual > 0)
    assert mask.frame_id == "f"


def test_mask_ignores_residual_scale():
    rng = np.random.default_rng(1)
    residual = rng.uniform(size=(22, 36)) ** 4
    residual[10:18, 5:15] += 1.0
    cfg = MiningConfig(reference_area=22 * 36)
    a = mine_frame(ResidualMap(residual), cfg, (44, 72)).mask
    b = mine_frame(ResidualMap(residual * 7.3), cfg, (44, 72)).mask
    np.testing.assert_array_equal(a, b)


def test_zero_residuals_give_empty_masks():
    masks = mine_masks([ResidualMap(np.zeros((6, 9))) for _ in range(3)], MiningConfig(), (12, 18))
    assert len(masks) == 3
    assert not any(m.mask.any() for m in masks)
    assert all(m.coverage == 0.0 for m in masks)


def test_mining_is_deterministic():
    residuals = [ResidualMap(np.random.default_rng(s).uniform(size=(22, 36)) ** 3) for s in range(3)]
    cfg = MiningConfig(reference_area=22 * 36)
    first = mine_masks(residuals, cfg, (44, 72))
    second = mine_masks(residuals, cfg, (44, 72))
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.mask, b.mask)


def test_per_frame_image_sizes():
    residuals = [ResidualMap(np.zeros((4, 6))), ResidualMap(np.zeros((4, 6)))]
    masks = mine_masks(residuals, MiningConfig(), [(8, 12), (4, 6)])
    assert [m.mask.shape for m in masks] == [(8, 12), (4, 6)]
    with pytest.raises(MiningError, match="image sizes"):
        mine_masks(residuals, MiningConfig(), [(8, 12)])


@pytest.mark.parametrize("dims", [[8, 12], (8, 12), np.array([8, 12])])
def test_single_image_size_in_any_sequence_applies_to_every_frame(dims):
    residuals = [ResidualMap(np.zeros((4, 6))), ResidualMap(np.zeros((4, 6)))]
    masks = mine_masks(residuals, MiningConfig(), dims)
    assert [m.mask.shape for m in masks] == [(8, 12), (8, 12)]


def test_scaled_size_threshold():
    assert MiningConfig().scaled_delta2(110, 180) == pytest.approx(100.0)
    assert MiningConfig().scaled_delta2(55, 90) == pytest.approx(25.0)


@pytest.mark.parametrize("kwargs", [{"delta1": 0.0}, {"delta1": 1.0}, {"delta2": 0.0}, {"delta3": 1.5}])
def test_invalid_mining_config(kwargs):
    with pytest.raises(MiningError):
        MiningConfig(**kwargs).validate()
