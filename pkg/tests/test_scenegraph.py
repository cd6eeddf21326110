import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asymplay.dynamics import ActorState, box_corners
from asymplay.scenegraph import (
    LaneGraph,
    LaneNode,
    MergeSpec,
    build_highway_map,
    compose,
    is_offroad,
    nearest_nodes,
    pairpose,
    pairpose_tensor,
    wrap_angle,
)

finite = st.floats(-200, 200, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
pose = st.tuples(finite, finite, angle)


def test_single_straight_lane():
    g = build_highway_map(1, 100.0, 0.0, 10.0)
    assert len(g) == 11
    np.testing.assert_allclose(g.positions[:, 0], np.arange(0, 101, 10))
    np.testing.assert_allclose(g.positions[:, 1], 0.0)
    assert all(n.heading == 0.0 for n in g.nodes)


def test_three_lane_connectivity():
    g = build_highway_map(3, 200.0, 0.0, 10.0)
    assert len(g) == 63
    per_lane = 21
    for n in g.nodes:
        j = n.id % per_lane
        if j < per_lane - 1:
            assert n.successors == (n.id + 1,)
        else:
            assert n.successors == ()
    # lateral neighbours are one lane apart
    for n in g.nodes:
        if n.left_neighbor is not None:
            assert n.left_neighbor == n.id + per_lane


def test_curved_heading_increment():
    g = build_highway_map(1, 100.0, 0.01, 10.0)
    d = np.diff(np.unwrap(g.headings))
    np.testing.assert_allclose(d, 0.1, atol=1e-12)


def test_curved_nodes_lie_on_arc():
    kappa = 0.01
    g = build_highway_map(1, 100.0, kappa, 10.0)
    # centre of curvature at (0, 1/kappa) for a left-turning road starting at the origin heading 0
    r = np.hypot(g.positions[:, 0], g.positions[:, 1] - 1.0 / kappa)
    np.testing.assert_allclose(r, 1.0 / kappa, atol=1e-9)


@pytest.mark.parametrize("bad", [dict(lanes=0), dict(length=0.0), dict(length=-5.0), dict(node_spacing=0.0)])
def test_rejects_bad_dimensions(bad):
    kw = dict(lanes=2, length=100.0, node_spacing=10.0)
    kw.update(bad)
    with pytest.raises(ValueError):
        build_highway_map(**kw)


def test_map_deterministic_and_polygons_ccw():
    a = build_highway_map(3, 300.0, 0.002, merge=MergeSpec(start=150.0), seed=5, width_jitter=0.3)
    b = build_highway_map(3, 300.0, 0.002, merge=MergeSpec(start=150.0), seed=5, width_jitter=0.3)
    assert a.to_dict() == b.to_dict()
    assert a.has_merge
    assert len(a.drivable_polygons) == 2
    assert LaneGraph.from_dict(a.to_dict()).to_dict() == a.to_dict()


def test_drivable_area_covers_all_lane_nodes():
    g = build_highway_map(3, 300.0, 0.003, merge=MergeSpec(start=150.0))
    assert g.contains_points(g.positions).all()


def test_graph_invariants_rejected():
    with pytest.raises(ValueError):
        LaneNode(0, (0.0, 0.0), 0.0, width=0.0)
    with pytest.raises(ValueError):
        LaneGraph(nodes=(LaneNode(0, (0.0, 0.0), 0.0, 3.7, successors=(3,)),), drivable_polygons=())
    cw = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ValueError):
        LaneGraph(nodes=(LaneNode(0, (0.5, 0.5), 0.0, 1.0),), drivable_polygons=(cw,))


def test_nearest_nodes_examples():
    g = build_highway_map(1, 100.0, 0.0, 10.0)
    assert nearest_nodes(g, g.positions[7], 1) == [7]
    assert nearest_nodes(g, (14.9, 0.0), 2) == [1, 2]
    assert nearest_nodes(g, (35.0, 0.0), 1) == [3]
    assert nearest_nodes(g, (0.0, 0.0), 100) == list(range(11))


@given(st.floats(-50, 150), st.floats(-20, 20), st.integers(1, 30))
def test_nearest_nodes_sorted(x, y, k):
    g = build_highway_map(2, 100.0, 0.0, 10.0)
    idx = nearest_nodes(g, (x, y), k)
    assert len(idx) == min(k, len(g))
    d = np.hypot(g.positions[idx, 0] - x, g.positions[idx, 1] - y)
    assert np.all(np.diff(d) >= 0)


def test_is_offroad_examples():
    g = build_highway_map(1, 100.0, 0.0, 10.0)
    assert not is_offroad(g, ActorState(50.0, 0.0, 0.0, 10.0))
    assert is_offroad(g, ActorState(50.0, 50.0, 0.0, 10.0))
    # top edge of the box 0.1 m past the lane edge at y = 1.85
    st_ = ActorState(50.0, 1.85 - 1.0 + 0.1, 0.0, 10.0, width=2.0)
    corners = box_corners(st_.x, st_.y, st_.theta, st_.length, st_.width, st_.wheelbase)
    outside = [abs(c[1]) > 1.85 for c in corners]
    assert any(outside)
    assert is_offroad(g, st_)


@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(-5, 105), st.floats(-4, 4), angle)
def test_is_offroad_translation_equivariant(tx, ty, x, y, th):
    base = build_highway_map(1, 100.0, 0.0, 10.0)
    d = base.to_dict()
    for n in d["nodes"]:
        n["x"] += tx
        n["y"] += ty
    d["drivable_polygons"] = [(np.asarray(p) + [tx, ty]).tolist() for p in d["drivable_polygons"]]
    moved = LaneGraph.from_dict(d)
    a = is_offroad(base, ActorState(x, y, th, 5.0))
    b = is_offroad(moved, ActorState(x + tx, y + ty, th, 5.0))
    # skip points sitting within rounding distance of the boundary
    corners = box_corners(x, y, th, 4.5, 2.0, 2.8)
    if np.min(np.abs(np.abs(corners[:, 1]) - 1.85)) > 1e-9 and np.min(np.abs(corners[:, 0] - 50) - 50) != 0:
        assert a == b


def test_pairpose_examples():
    assert pairpose((1.0, 2.0, 0.3), (1.0, 2.0, 0.3)).as_tuple() == (0.0, 0.0, 0.0, 1.0, 0.0)
    p = pairpose((0, 0, 0), (3, 4, 0))
    assert (p.dx, p.dy, p.dist, p.cos_dtheta) == (3.0, 4.0, 5.0, 1.0)
    q = pairpose((0, 0, math.pi / 2), (0, 2, math.pi / 2))
    assert q.dx == pytest.approx(2.0, abs=1e-12)
    assert q.dy == pytest.approx(0.0, abs=1e-12)
    assert q.cos_dtheta == 1.0
    with pytest.raises(ValueError):
        pairpose((0, 0, math.nan), (0, 0, 0))


def _rigid(p, tx, ty, rot):
    c, s = math.cos(rot), math.sin(rot)
    return (c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty, p[2] + rot)


@given(pose, pose)
def test_pairpose_invariants(a, b):
    ab = pairpose(a, b)
    assert abs(ab.sin_dtheta**2 + ab.cos_dtheta**2 - 1) < 1e-9
    assert abs(ab.dist - math.hypot(ab.dx, ab.dy)) < 1e-9
    ident = compose(ab, pairpose(b, a))
    np.testing.assert_allclose(ident.as_tuple(), (0, 0, 0, 1, 0), atol=1e-9)


@given(pose, pose, finite, finite, angle)
def test_pairpose_viewpoint_invariant(a, b, tx, ty, rot):
    p = pairpose(a, b).as_tuple()
    q = pairpose(_rigid(a, tx, ty, rot), _rigid(b, tx, ty, rot)).as_tuple()
    np.testing.assert_allclose(p, q, atol=1e-9)


@given(pose, pose)
def test_pairpose_tensor_matches_scalar(a, b):
    import torch

    t = pairpose_tensor(torch.tensor(a), torch.tensor(b)).numpy()
    np.testing.assert_allclose(t, pairpose(a, b).as_tuple(), atol=1e-9)


@given(st.floats(-100, 100, allow_nan=False))
def test_wrap_angle_range(th):
    w = wrap_angle(th)
    assert -math.pi < w <= math.pi
    assert abs(math.sin(w) - math.sin(th)) < 1e-9 and abs(math.cos(w) - math.cos(th)) < 1e-9
