import json
import math
import warnings

import numpy as np
import pytest
from scipy.stats import foldnorm
from shapely.geometry import Point, Polygon

from sarbbr.boxes import Box
from sarbbr.dataset import (
    EmptyFootprintError,
    EmptyMaskWarning,
    Normalization,
    build_dataset,
    building_bbox,
    building_targets,
    crop_patches,
    draw_offset,
    filter_stale,
    fit_normalization,
    footprint_bbox,
    inject_positioning_errors,
    intensity_mode,
    load_dataset,
    patch_origins,
    rasterize_footprint,
    read_manifest,
    split,
    write_dataset,
)
from sarbbr.geometry import SensorModel, layover_px, project
from sarbbr.scene import BuildingRecord, base_polygon, render
from sarbbr.synthetic import preset_sensor, random_city, random_star_polygon, rectangle

HS = SensorModel(36.08, 0.455, 0.871)


# ---------------------------------------------------------------- footprint masks and boxes


def test_small_square_matches_scanline_oracle():
    # spacings put the 2 m square on a roughly 3 x 3 pixel quadrilateral
    sensor = SensorModel(36.08, 0.5, 0.7, rg_origin=0.3, az_origin=0.4)
    b = BuildingRecord("s", [[0, 0], [2, 0], [2, 2], [0, 2]], 5.0)
    mask = rasterize_footprint(b, sensor, (4, 4))
    poly = Polygon(base_polygon(b, sensor))
    ref = np.array([[poly.contains(Point(j + 0.5, i + 0.5)) for j in range(4)] for i in range(4)])
    np.testing.assert_array_equal(mask.astype(bool), ref)
    assert mask.sum() > 0


def test_random_polygon_masks_match_point_oracle():
    rng = np.random.default_rng(4)
    sensor = SensorModel(36.08, 0.455, 0.871, rg_origin=60.0, az_origin=35.0)
    for _ in range(20):
        b = BuildingRecord("r", random_star_polygon(rng, r_max=20.0), 1.0)
        mask = rasterize_footprint(b, sensor, (70, 120))
        poly = Polygon(base_polygon(b, sensor))
        jj, ii = np.meshgrid(np.arange(120) + 0.5, np.arange(70) + 0.5)
        ref = np.vectorize(lambda x, y: poly.contains(Point(x, y)))(jj, ii)
        np.testing.assert_array_equal(mask.astype(bool), ref)


def test_sliver_gives_empty_mask_warning():
    sensor = SensorModel(36.08, 1.0, 1.0)
    # 0.2 m tall sliver sitting between two rows of pixel centers
    b = BuildingRecord("sliver", [[1, 1.55], [8, 1.55], [8, 1.75], [1, 1.75]], 3.0)
    with pytest.warns(EmptyMaskWarning):
        mask = rasterize_footprint(b, sensor, (6, 10))
    assert not mask.any()


def test_polygon_outside_grid_is_error():
    b = BuildingRecord("far", rectangle(1000, 1000, 5, 5), 3.0)
    with pytest.raises(EmptyFootprintError):
        rasterize_footprint(b, HS, (16, 16))


def test_azimuth_shift_moves_mask_one_row():
    b = BuildingRecord("s", rectangle(10, 10, 6, 5, 20), 3.0)
    m0 = rasterize_footprint(b, HS, (40, 40))
    m1 = rasterize_footprint(b.translated(0.0, HS.spacing_az), HS, (40, 40))
    np.testing.assert_array_equal(m1[1:], m0[:-1])


def test_footprint_bbox_examples():
    assert footprint_bbox([[91.1, 45], [111.1, 45], [111.1, 55], [91.1, 55]]) == pytest.approx((101.1, 50, 20, 10))
    quad = np.array([[3.0, 1.0], [7.5, 2.0], [6.0, 9.0], [1.0, 4.0]])
    assert footprint_bbox(quad) == pytest.approx((4.25, 5.0, 6.5, 8.0))
    tiny = footprint_bbox([[5.2, 5.2], [5.6, 5.2], [5.6, 5.5]])
    assert tiny.w > 0 and tiny.h > 0
    with pytest.raises(EmptyFootprintError):
        footprint_bbox(np.zeros((0, 2)))


def test_building_bbox_examples():
    fb = Box(100, 50, 20, 10)
    assert building_bbox(fb, 0.0, HS) == fb
    assert building_bbox(fb, 10.0, HS) == pytest.approx((91.1185, 50, 37.763, 10), abs=5e-4)
    with pytest.raises(ValueError):
        building_bbox(fb, -1.0, HS)


def test_building_bbox_equals_corner_projection_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        ring = random_star_polygon(rng, center=rng.uniform(-50, 50, 2))
        h = rng.uniform(0, 80)
        fb = footprint_bbox(np.column_stack(project(ring[:, 0], ring[:, 1], 0.0, HS)))
        got = building_bbox(fb, h, HS)
        rg0, az0 = project(ring[:, 0], ring[:, 1], 0.0, HS)
        rg1, az1 = project(ring[:, 0], ring[:, 1], h, HS)
        rg, az = np.concatenate([rg0, rg1]), np.concatenate([az0, az1])
        ref = ((rg.min() + rg.max()) / 2, (az.min() + az.max()) / 2, rg.max() - rg.min(), az.max() - az.min())
        worst = max(worst, float(np.max(np.abs(np.array(got) - ref))))
    assert worst <= 1e-6


# ---------------------------------------------------------------- stale filter


def test_intensity_mode_constant_image():
    assert intensity_mode(np.full((4, 4), 2.0)) == 4.0


def test_filter_empty_box_list():
    kept, report = filter_stale({}, np.ones((4, 4)))
    assert kept == {} and report["dropped"] == []


def test_filter_constant_image_keeps_equal_means():
    kept, report = filter_stale({"a": Box(2, 2, 2, 2)}, np.full((4, 4), 3.0))
    assert "a" in kept


def _two_building_scene(seed, angle=0.0):
    # axis-aligned footprints: the gt box then holds only the building's own pixels
    sensor = SensorModel(36.08, 0.455, 0.871, rg_origin=60.0, az_origin=20.0)
    a = BuildingRecord("live", rectangle(30, 25, 20, 18, angle), 15.0)
    b = BuildingRecord("gone", rectangle(30, 80, 20, 18, angle), 15.0)
    scene = render([a, b], sensor, speckle_seed=seed, grid_dims=(140, 160), zero_reflectivity_ids=["gone"])
    targets, _ = building_targets([a, b], sensor, scene.dims)
    return scene, {t.id: t.gt_box for t in targets}


@pytest.mark.parametrize("seed", range(10))
def test_stale_building_dropped_live_kept(seed):
    scene, boxes = _two_building_scene(seed)
    kept, report = filter_stale(boxes, scene.amplitude)
    assert report["dropped"] == ["gone"]
    assert set(kept) == {"live"}


def test_threshold_sits_in_lowest_bin_for_speckle():
    # single-look intensity is exponential, so its histogram peaks at the bottom
    scene, _ = _two_building_scene(0, angle=10.0)
    inten = np.square(scene.amplitude)
    width = (inten.max() - inten.min()) / 256
    assert intensity_mode(scene.amplitude) == pytest.approx(inten.min() + width / 2)


def test_filter_idempotent():
    scene, boxes = _two_building_scene(0)
    kept, _ = filter_stale(boxes, scene.amplitude)
    again, _ = filter_stale(kept, scene.amplitude)
    assert again == kept


# ---------------------------------------------------------------- cropping and split


def test_patch_grid_counts():
    cols = {c for _, c in patch_origins((256, 1024), 256, 150)}
    assert len(cols) == 6
    assert len(patch_origins((300, 1024), 256, 150)) == 6
    with pytest.raises(ValueError):
        patch_origins((100, 100), 128, 70)


def _targets(buildings, sensor, dims):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return building_targets(buildings, sensor, dims)[0]


def test_building_in_two_overlapping_patches():
    sensor = SensorModel(36.08, 0.455, 0.871)
    dims = (100, 160)
    amp = np.ones(dims)
    # building box spans columns ~68..82, inside both [0, 100) and [60, 160)
    b = BuildingRecord("x", rectangle(60, 25, 6, 10), 3.0)
    t = _targets([b], sensor, dims)[0]
    samples, uncovered = crop_patches(amp, [t], 100, 60)
    assert uncovered == []
    assert sorted(s.patch_origin for s in samples) == [(0, 0), (0, 60)]


def test_building_straddling_every_patch_is_uncovered():
    dims = (64, 200)
    b = BuildingRecord("edge", rectangle(170, 25, 40, 10), 3.0)
    t = _targets([b], HS, dims)[0]
    with pytest.warns(UserWarning, match="not fully inside"):
        samples, uncovered = crop_patches(np.ones(dims), [t], 64, 64)
    assert samples == [] and uncovered == ["edge"]


@pytest.fixture(scope="module")
def city():
    recs, sensor, dims = random_city(120, preset_sensor("berlin-sm"), seed=11)
    scene = render(recs, sensor, speckle_seed=11, grid_dims=dims)
    return recs, sensor, scene


def test_sample_invariants(city):
    recs, sensor, scene = city
    ds, report = build_dataset(scene.amplitude, sensor, recs, 128, 70, 0.8)
    heights = {b.id: b.height for b in recs}
    assert report["n_train"] > 0 and report["n_test"] > 0
    for s in ds.samples:
        fb, gb = s.footprint_box, s.gt_box
        assert gb.w - fb.w == pytest.approx(layover_px(heights[s.building_id], sensor), abs=1e-6)
        assert gb.cy == fb.cy and gb.h == fb.h
        n = s.patch.shape[0]
        assert gb.x0 >= 1 and gb.y0 >= 1 and gb.x1 <= n - 1 and gb.y1 <= n - 1
        rows, cols = np.nonzero(s.mask)
        assert rows.min() >= 1 and cols.min() >= 1 and rows.max() <= n - 2 and cols.max() <= n - 2
        assert set(np.unique(s.mask)) <= {0, 1}
        assert 0.0 <= s.patch.min() and s.patch.max() <= 1.0


def test_split_disjoint_and_near_fraction(city):
    recs, sensor, scene = city
    targets = _targets(recs, sensor, scene.dims)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        samples, _ = crop_patches(scene.amplitude, targets, 128, 70)
    n_ids = len({s.building_id for s in samples})
    for fraction in (0.5, 0.8):
        train, test, boundary = split(samples, fraction, 0.0, scene.dims[0], 128)
        tr_ids = {s.building_id for s in train}
        te_ids = [s.building_id for s in test]
        assert tr_ids.isdisjoint(te_ids)
        assert len(te_ids) == len(set(te_ids))
        assert abs(len(tr_ids) / n_ids - fraction) < 0.15
        assert all(s.gt_box.cy + s.patch_origin[0] < boundary for s in train)


def test_split_guard_excludes_boundary_buildings(city):
    recs, sensor, scene = city
    targets = _targets(recs, sensor, scene.dims)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        samples, _ = crop_patches(scene.amplitude, targets, 128, 70)
    train, test, boundary = split(samples, 0.8, 20.0, scene.dims[0], 128)
    for s in train:
        assert s.gt_box.y1 + s.patch_origin[0] <= boundary - 20.0
    for s in test:
        assert s.gt_box.y0 + s.patch_origin[0] >= boundary + 20.0
    with pytest.raises(ValueError):
        split(samples, 0.8, scene.dims[0], scene.dims[0], 128)
    with pytest.raises(ValueError):
        split(samples, 1.0, 0.0, scene.dims[0], 128)


def test_test_side_keeps_nearest_center_patch():
    dims = (64, 160)
    amp = np.ones(dims)
    train_b = BuildingRecord("t", rectangle(60, 8, 6, 6), 3.0)
    test_b = BuildingRecord("x", rectangle(60, 40, 6, 10), 3.0)
    targets = _targets([train_b, test_b], HS, dims)
    samples, _ = crop_patches(amp, targets, 60, 30)
    x_samples = [s for s in samples if s.building_id == "x"]
    assert len(x_samples) >= 2
    _, test, _ = split(samples, 0.5, 0.0, dims[0], 60)
    (chosen,) = test

    def dist(s):
        return math.hypot(s.gt_box.cx - 30, s.gt_box.cy - 30)

    assert dist(chosen) == min(dist(s) for s in x_samples)


# ---------------------------------------------------------------- normalisation


def test_normalization_endpoints():
    n = Normalization(2.0, 4.0)
    np.testing.assert_array_equal(n.apply([2.0, 3.0, 4.0, 10.0, -1.0]), [0.0, 0.5, 1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        Normalization(1.0, 1.0)


def test_normalization_uses_distinct_train_patches():
    from sarbbr.dataset import Sample

    p = np.arange(100.0).reshape(10, 10)
    s = Sample("a", p, np.zeros((10, 10)), Box(5, 5, 2, 2), Box(5, 5, 2, 2), 1.0, (0, 0))
    n1 = fit_normalization([s])
    n2 = fit_normalization([s, s])
    assert n1 == n2
    assert n1.lo == pytest.approx(np.percentile(p, 1)) and n1.hi == pytest.approx(np.percentile(p, 99))


def test_rescale_keeps_boxes_consistent(city):
    recs, sensor, scene = city
    ds, _ = build_dataset(scene.amplitude, sensor, recs, 128, 70, 0.8, input_size=256)
    for s in ds.samples[:20]:
        assert s.patch.shape == (256, 256) and s.mask.shape == (256, 256)
        assert s.scale == 2.0
        assert set(np.unique(s.mask)) <= {0, 1}


# ---------------------------------------------------------------- positioning errors


def test_sigma_zero_gives_exact_mu():
    recs = [BuildingRecord(f"b{i}", rectangle(0, 0, 5, 5), 3.0) for i in range(20)]
    moved = inject_positioning_errors(recs, 4.13, 0.0, seed=1)
    for a, b in zip(recs, moved):
        d = b.footprint - a.footprint
        assert np.allclose(d, d[0])
        assert math.hypot(*d[0]) == pytest.approx(4.13, abs=1e-12)
        assert b.height == a.height


def test_alpha_zero_points_along_range():
    class Fixed:
        def normal(self, mu, sigma):
            return mu

        def integers(self, lo, hi):
            return 0

    mag, alpha = draw_offset(Fixed(), 4.13, 1.71)
    assert (mag, alpha) == (4.13, 0)
    b = BuildingRecord("a", rectangle(0, 0, 5, 5), 3.0)
    rad = math.radians(alpha)
    moved = b.translated(mag * math.cos(rad), mag * math.sin(rad))
    np.testing.assert_allclose(moved.footprint - b.footprint, [[4.13, 0.0]] * 4)


def test_offset_magnitude_monte_carlo():
    rng = np.random.default_rng(0)
    mags = [draw_offset(rng, 4.13, 1.71)[0] for _ in range(100_000)]
    assert 4.10 <= np.mean(mags) <= 4.16
    assert min(mags) > 0
    # independent reference: mean of the folded normal
    assert np.mean(mags) == pytest.approx(foldnorm.mean(4.13 / 1.71, scale=1.71), abs=0.02)


def test_injection_deterministic_and_keyed_by_id():
    recs = [BuildingRecord(f"b{i}", rectangle(10 * i, 0, 5, 5), 3.0) for i in range(5)]
    a = inject_positioning_errors(recs, seed=3)
    b = inject_positioning_errors(list(reversed(recs)), seed=3)
    by_id = {r.id: r.footprint for r in b}
    for r in a:
        np.testing.assert_array_equal(r.footprint, by_id[r.id])
    with pytest.raises(ValueError):
        inject_positioning_errors(recs, mu=0.0)


# ---------------------------------------------------------------- manifest


def test_manifest_round_trip(tmp_path, city):
    recs, sensor, scene = city
    ds, _ = build_dataset(scene.amplitude, sensor, recs, 128, 70, 0.8)
    path = write_dataset(ds, tmp_path / "a")
    back = load_dataset(path)
    path2 = write_dataset(back, tmp_path / "b")
    assert path.read_bytes() == path2.read_bytes()
    man = read_manifest(path)
    assert {"sensor", "patch_size", "stride", "normalization", "samples"} <= set(man)
    e = man["samples"][0]
    assert {"id", "split", "patch", "mask", "footprint_box", "gt_box", "height_m", "patch_origin"} <= set(e)
    assert json.loads(path.read_text()) == man
    for s, t in zip(ds.samples, back.samples):
        np.testing.assert_array_equal(np.asarray(s.patch, dtype=np.float32), t.patch)
        assert tuple(s.gt_box) == tuple(t.gt_box)
