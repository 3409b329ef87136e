from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sarbbr.dataset import building_bbox, footprint_bbox
from sarbbr.geometry import SensorModel
from sarbbr.heights import HeightResult, error_histogram, extrude_lod1, height_from_boxes, metrics, write_obj
from sarbbr.scene import base_polygon
from sarbbr.synthetic import preset_sensor, random_city

HS = SensorModel(36.08, 0.455, 0.871)


def test_equal_widths_give_zero():
    r = height_from_boxes((10, 10, 20, 5), (12, 10, 20, 5), HS)
    assert r.predicted_height == 0.0
    assert not r.clamped


def test_worked_height():
    r = height_from_boxes((91.1181, 50, 37.763, 10), (101.0, 50, 20, 10), HS)
    assert r.predicted_height == pytest.approx(10.0, abs=1e-3)


def test_negative_layover_clamped():
    r = height_from_boxes((10, 10, 19, 5), (10, 10, 20, 5), HS, "b1")
    assert r.predicted_height == 0.0
    assert r.clamped


def test_invalid_box_rejected():
    with pytest.raises(ValueError):
        height_from_boxes((0, 0, -1, 1), (0, 0, 1, 1), HS)


def test_perfect_prediction_identity():
    recs, sensor, dims = random_city(500, preset_sensor("berlin-sm"), seed=0)
    results = []
    for b in recs:
        fb = footprint_bbox(base_polygon(b, sensor))
        gt = building_bbox(fb, b.height, sensor)
        results.append(height_from_boxes(gt, fb, sensor, b.id, b.height))
    assert max(abs(r.error) for r in results) <= 1e-6
    m = metrics(results)
    assert (m.he_mean, m.he_std) == (0.0, 0.0)


def test_metrics_examples():
    def res(errors):
        return [HeightResult(str(i), 10.0 - e, 10.0) for i, e in enumerate(errors)]

    m = metrics(res([0.0, 0.0]))
    assert (m.he_mean, m.he_std) == (0.0, 0.0)
    m = metrics(res([1.0, -1.0, 2.0]))
    assert m.he_mean == pytest.approx(0.6667, abs=1e-4)
    assert m.he_std == pytest.approx(1.2472, abs=1e-4)
    assert m.mae == pytest.approx(4 / 3)
    m = metrics(res([5.0]))
    assert (m.he_mean, m.he_std) == (pytest.approx(5.0), 0.0)


def test_metrics_empty_and_missing_truth():
    with pytest.raises(ValueError):
        metrics([])
    with pytest.raises(ValueError):
        metrics([HeightResult("a", 3.0)])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_metrics_sign_symmetry(errors):
    pos = metrics([HeightResult(str(i), 100.0 - e, 100.0) for i, e in enumerate(errors)])
    neg = metrics([HeightResult(str(i), 100.0 + e, 100.0) for i, e in enumerate(errors)])
    assert neg.he_mean == pytest.approx(-pos.he_mean, abs=1e-9)
    assert neg.he_std == pytest.approx(pos.he_std, abs=1e-9)


def test_histogram_clamps_to_end_bins():
    edges, counts = error_histogram([-100.0, -0.5, 0.5, 29.99, 31.0])
    assert len(edges) == 61 and edges[0] == -30 and edges[-1] == 30
    assert counts.sum() == 5
    assert counts[0] == 1 and counts[-1] == 2
    assert counts[29] == 1 and counts[30] == 1


def test_report_keys():
    d = metrics([HeightResult("a", 1.0, 2.0)]).to_dict()
    assert set(d) == {"he_mean_m", "he_std_m", "mae_m", "n", "clamped_count", "histogram"}
    assert set(d["histogram"]) == {"bin_edges_m", "counts"}


def _closed(mesh):
    edges = Counter(frozenset(e) for e in mesh.edges())
    directed = Counter(mesh.edges())
    return all(c == 2 for c in edges.values()) and all(c == 1 for c in directed.values())


def test_unit_square_prism():
    m = extrude_lod1([[0, 0], [1, 0], [1, 1], [0, 1]], 3.0)
    assert m.vertices.shape == (8, 3)
    assert len(m.faces) == 6
    assert m.vertices[:, 2].max() - m.vertices[:, 2].min() == 3.0
    assert _closed(m)


def test_pentagon_prism():
    ang = np.linspace(0, 2 * np.pi, 6)[:-1]
    m = extrude_lod1(np.column_stack([np.cos(ang), np.sin(ang)]), 5.0)
    assert m.vertices.shape == (10, 3)
    assert len(m.faces) == 7
    assert _closed(m)


def test_zero_height_rejected():
    with pytest.raises(ValueError, match="zero height"):
        extrude_lod1([[0, 0], [1, 0], [1, 1]], 0.0)


def test_self_intersecting_rejected():
    with pytest.raises(ValueError, match="self-intersecting"):
        extrude_lod1([[0, 0], [1, 1], [1, 0], [0, 1]], 2.0)


def test_clockwise_footprint_gets_outward_faces():
    cw = extrude_lod1([[0, 1], [1, 1], [1, 0], [0, 0]], 2.0)
    ccw = extrude_lod1([[0, 0], [1, 0], [1, 1], [0, 1]], 2.0)
    assert _closed(cw) and _closed(ccw)
    # the bottom face normal points down
    v = cw.vertices[list(cw.faces[0])]
    normal = np.cross(v[1] - v[0], v[2] - v[0])
    assert normal[2] < 0


def test_obj_output(tmp_path):
    a = extrude_lod1([[0, 0], [1, 0], [1, 1], [0, 1]], 3.0, building_id="a")
    b = extrude_lod1([[5, 5], [6, 5], [6, 6]], 2.0, building_id="b")
    write_obj(tmp_path / "m.obj", [a, b])
    lines = (tmp_path / "m.obj").read_text().splitlines()
    assert lines[0] == "o a"
    assert sum(line.startswith("v ") for line in lines) == 14
    faces = [line for line in lines if line.startswith("f ")]
    assert len(faces) == 6 + 5
    idx = [int(t) for f in faces for t in f.split()[1:]]
    assert min(idx) == 1 and max(idx) == 14
