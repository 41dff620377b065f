import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectsense.scene import (
    AnchorSet,
    DegenerateGeometryError,
    SceneError,
    derive_grid,
    load_floorplan,
    load_pointcloud,
    load_scene,
    validate_anchor_geometry,
)


def write_json(tmp_path, doc, name="scene.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_load_floorplan_without_obstacles(tmp_path):
    p = write_json(tmp_path, {"bounds": {"min": [0, 0, 0], "max": [10, 5, 3]}})
    plan = load_floorplan(p)
    assert plan.bounds_min == (0, 0, 0)
    assert plan.bounds_max == (10, 5, 3)
    assert plan.obstacles == ()


def test_obstacle_outside_bounds(tmp_path):
    doc = {"bounds": {"min": [0, 0, 0], "max": [10, 5, 3]}, "obstacles": [{"min": [9, 0, 0], "max": [11, 1, 1]}]}
    with pytest.raises(SceneError, match="obstacle outside bounds"):
        load_floorplan(write_json(tmp_path, doc))


def test_empty_file_is_parse_error(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("")
    with pytest.raises(SceneError, match="parse error"):
        load_floorplan(p)


def test_inverted_bounds_names_field(tmp_path):
    p = write_json(tmp_path, {"bounds": {"min": [0, 5, 0], "max": [10, 0, 3]}})
    with pytest.raises(SceneError, match="bounds"):
        load_floorplan(p)


def test_full_scene_schema(sessions_dir):
    scene = load_scene(sessions_dir / "scene1.json")
    assert len(scene.anchors) == 4
    assert scene.anchors.ids == ("A0", "A1", "A2", "A3")
    assert scene.cell_size == 0.5
    assert len(scene.floorplan.obstacles) == 1


def test_duplicate_anchor_ids(tmp_path):
    doc = {
        "bounds": {"min": [0, 0, 0], "max": [1, 1, 1]},
        "anchors": [{"id": "A", "pos": [0, 0, 0]}, {"id": "A", "pos": [1, 0, 0]}],
    }
    with pytest.raises(SceneError, match="unique"):
        load_scene(write_json(tmp_path, doc))


def test_pointcloud_two_points(tmp_path):
    p = tmp_path / "pc.xyz"
    p.write_text("0 0 0\n10 5 3\n")
    lo, hi = load_pointcloud(p)
    assert lo.tolist() == [0, 0, 0]
    assert hi.tolist() == [10, 5, 3]


def test_pointcloud_single_point(tmp_path):
    p = tmp_path / "pc.xyz"
    p.write_text("1 2 3\n")
    lo, hi = load_pointcloud(p)
    assert lo.tolist() == hi.tolist() == [1, 2, 3]


def test_pointcloud_bad_token_reports_line(tmp_path):
    p = tmp_path / "pc.xyz"
    p.write_text("0 0 0\n1 1 1\na b c\n")
    with pytest.raises(SceneError, match=":3:"):
        load_pointcloud(p)


def test_pointcloud_empty(tmp_path):
    p = tmp_path / "pc.xyz"
    p.write_text("\n")
    with pytest.raises(SceneError, match="empty"):
        load_pointcloud(p)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-1e3, 1e3, allow_nan=False)] * 3), min_size=1, max_size=40))
def test_pointcloud_box_contains_points(tmp_path_factory, points):
    p = tmp_path_factory.mktemp("pc") / "pc.xyz"
    p.write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in points))
    lo, hi = load_pointcloud(p)
    pts = np.array(points)
    assert np.all(pts >= lo) and np.all(pts <= hi)


@pytest.mark.parametrize(
    "hi, cell, dims",
    [((10, 5, 3), 0.5, (20, 10, 6)), ((1, 1, 1), 0.3, (4, 4, 4))],
)
def test_derive_grid_dims(hi, cell, dims):
    g = derive_grid(((0, 0, 0), hi), cell)
    assert g.dims == dims
    assert g.origin == (0, 0, 0)


def test_derive_grid_exact_multiple_does_not_gain_cell():
    assert derive_grid(((0, 0, 0), (1.1, 0.7, 0.3)), 0.1).dims == (11, 7, 3)


@pytest.mark.parametrize("cell", [0, -0.5])
def test_derive_grid_rejects_cell_size(cell):
    with pytest.raises(SceneError):
        derive_grid(((0, 0, 0), (1, 1, 1)), cell)


def test_derive_grid_rejects_flat_bounds():
    with pytest.raises(SceneError, match="degenerate"):
        derive_grid(((0, 0, 0), (1, 1, 0)), 0.5)


@pytest.mark.parametrize(
    "hi, cell", [((10, 5, 3), 0.5), ((1, 1, 1), 0.3), ((7.3, 2.9, 2.2), 0.45), ((3, 3, 3), 1.0)]
)
def test_every_interior_point_maps_inside_grid(hi, cell):
    g = derive_grid(((0, 0, 0), hi), cell)
    lattice = [np.linspace(0, h, 23) for h in hi]
    for x in lattice[0]:
        for y in lattice[1]:
            for z in lattice[2]:
                idx = g.cell_index((x, y, z))
                assert idx is not None
                assert all(0 <= i < d for i, d in zip(idx, g.dims))
    assert np.all(g.extent_max >= np.array(hi) - 1e-9)


def test_anchor_geometry_examples():
    assert validate_anchor_geometry(np.array([(0, 0), (4, 0), (0, 4)], float), 2) == "ok"
    assert validate_anchor_geometry(np.array([(0, 0), (1, 0), (2, 0)], float), 2) == "degenerate"
    with pytest.raises(DegenerateGeometryError, match="need ≥3"):
        validate_anchor_geometry(np.array([(0, 0), (1, 0)], float), 2)


def test_anchor_geometry_3d_coplanar():
    flat = np.array([(0, 0, 1), (5, 0, 1), (0, 5, 1), (5, 5, 1)], float)
    assert validate_anchor_geometry(flat, 3) == "degenerate"
    assert validate_anchor_geometry(flat, 2) == "ok"
    lifted = flat.copy()
    lifted[3, 2] = 2.5
    assert validate_anchor_geometry(AnchorSet(("a", "b", "c", "d"), lifted), 3) == "ok"


def _rotation(rng, dim):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


@pytest.mark.parametrize("seed", range(20))
def test_anchor_geometry_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    for dim in (2, 3):
        anchors = rng.uniform(-5, 5, size=(dim + 2, dim))
        if seed % 2:  # make it degenerate: squash onto a line / plane
            anchors[:, -1] = 0.5 * anchors[:, 0]
        moved = anchors @ _rotation(rng, dim).T + rng.uniform(-100, 100, size=dim)
        assert validate_anchor_geometry(anchors, dim) == validate_anchor_geometry(moved, dim)
