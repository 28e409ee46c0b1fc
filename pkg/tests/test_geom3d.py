import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvdet.geom3d import (BevBox, Box3D, box_to_corners, convex_intersection, corners_to_box, iou_3d,
                          iou_3d_matrix, iou_bev, iou_bev_matrix, nms_bev, normalize_angle,
                          polygon_area, polygon_intersection_area, rigid_transform)
from oracles import brute_nms, raster_intersection, raster_iou_bev, voxel_iou_3d

coord = st.floats(-20, 20, allow_nan=False)
extent = st.floats(0.2, 6, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)
boxes3d = st.builds(Box3D, coord, coord, st.floats(-3, 3), extent, extent, extent, angle)
bevboxes = st.builds(BevBox, st.floats(-3, 3), st.floats(-3, 3), extent, extent, angle)


def square(cx, cy, side, yaw=0.0):
    return BevBox(cx, cy, side, side, yaw)


def test_normalize_angle_range():
    assert normalize_angle(math.pi) == math.pi
    assert normalize_angle(-math.pi) == math.pi
    assert normalize_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


def test_box_validation():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        Box3D(0, 0, float("nan"), 1, 1, 1)
    assert Box3D(0, 0, 0, 1, 1, 1, 2 * math.pi).yaw == pytest.approx(0.0)


# ---------------------------------------------------------------- corners


def test_cube_corners():
    c = box_to_corners(Box3D(0, 0, 0, 2, 2, 2, 0))
    expected = [(1, 1), (-1, 1), (-1, -1), (1, -1)]
    np.testing.assert_allclose(c[:4, :2], expected)
    np.testing.assert_allclose(c[4:, :2], expected)
    assert np.all(c[:4, 2] == -1) and np.all(c[4:, 2] == 1)


def test_square_corners_invariant_to_quarter_turn():
    a = box_to_corners(Box3D(0, 0, 0, 2, 2, 2, 0))
    b = box_to_corners(Box3D(0, 0, 0, 2, 2, 2, math.pi / 2))
    key = lambda p: tuple(np.round(p, 9))
    assert sorted(map(key, a)) == sorted(map(key, b))


def test_corners_hand_computed():
    # independent rotation-matrix evaluation for one box
    cx, cy, cz, l, w, h, yaw = 5, 3, -1, 3.9, 1.6, 1.56, 0.3
    c = box_to_corners(Box3D(cx, cy, cz, l, w, h, yaw))
    R = np.array([[math.cos(yaw), -math.sin(yaw)], [math.sin(yaw), math.cos(yaw)]])
    for k, (sx, sy) in enumerate([(1, 1), (-1, 1), (-1, -1), (1, -1)]):
        xy = R @ np.array([sx * l / 2, sy * w / 2]) + [cx, cy]
        np.testing.assert_allclose(c[k], [*xy, cz - h / 2], atol=1e-12)
        np.testing.assert_allclose(c[k + 4], [*xy, cz + h / 2], atol=1e-12)
    np.testing.assert_allclose(c.mean(axis=0), [cx, cy, cz], atol=1e-12)


def test_corners_to_box_round_trip_example():
    b = Box3D(5, 3, -1, 3.9, 1.6, 1.56, 0.3)
    r = corners_to_box(box_to_corners(b))
    np.testing.assert_allclose(r.to_array(), b.to_array(), rtol=1e-9, atol=1e-12)
    assert corners_to_box(box_to_corners(Box3D(1, 2, 3, 4, 2, 1, 0))).yaw == pytest.approx(0.0, abs=1e-12)


@given(boxes3d)
def test_corners_round_trip(b):
    r = corners_to_box(box_to_corners(b))
    np.testing.assert_allclose(r.to_array()[:6], b.to_array()[:6], rtol=1e-9, atol=1e-9)
    assert abs(normalize_angle(r.yaw - b.yaw)) < 1e-9


def test_corners_top_face_offset(rng):
    for _ in range(20):
        b = Box3D(*rng.uniform(-5, 5, 3), *rng.uniform(0.5, 4, 3), rng.uniform(-3, 3))
        c = box_to_corners(b)
        np.testing.assert_allclose(c[4:] - c[:4], np.tile([0, 0, b.h], (4, 1)), atol=1e-12)


def test_corners_to_box_noise_monte_carlo():
    rng = np.random.default_rng(2024)
    worst_pos = worst_yaw = 0.0
    for _ in range(1000):
        b = Box3D(*rng.uniform(-30, 30, 2), rng.uniform(-2, 0), rng.uniform(3, 5), rng.uniform(1.4, 2),
                  rng.uniform(1.3, 1.8), rng.uniform(-math.pi, math.pi))
        r = corners_to_box(box_to_corners(b) + rng.uniform(-0.01, 0.01, (8, 3)))
        worst_pos = max(worst_pos, np.abs(r.to_array()[:6] - b.to_array()[:6]).max())
        worst_yaw = max(worst_yaw, abs(normalize_angle(r.yaw - b.yaw)))
    assert worst_pos < 0.02 and worst_yaw < 0.02


def test_corners_to_box_degenerate():
    c = np.zeros((8, 3))
    with pytest.raises(ValueError, match="degenerate corners"):
        corners_to_box(c)
    with pytest.raises(ValueError):
        corners_to_box(np.zeros((7, 3)))


# ---------------------------------------------------------------- polygons and IoU


def test_polygon_area_sign():
    sq = [(0, 0), (1, 0), (1, 1), (0, 1)]
    assert polygon_area(sq) == 1.0
    assert polygon_area(sq[::-1]) == -1.0
    assert polygon_area(sq[:2]) == 0.0


def test_intersection_trivial():
    s = square(0, 0, 2).polygon()
    assert polygon_intersection_area(s, s) == pytest.approx(4.0)
    assert polygon_intersection_area(s, square(10, 10, 2).polygon()) == 0.0
    assert len(convex_intersection(s, square(10, 10, 2).polygon())) == 0


def test_intersection_rotated_square_matches_raster():
    a, b = (0, 0, 1, 1, 0.0), (0, 0, 1, 1, math.pi / 4)
    exact = polygon_intersection_area(BevBox(*a).polygon(), BevBox(*b).polygon())
    assert exact == pytest.approx(2 * (math.sqrt(2) - 1), abs=1e-12)  # regular octagon
    assert abs(exact - raster_intersection(a, b, 2000)) < 1e-3


@given(bevboxes, bevboxes)
def test_intersection_symmetric_and_bounded(a, b):
    ab = polygon_intersection_area(a.polygon(), b.polygon())
    ba = polygon_intersection_area(b.polygon(), a.polygon())
    assert ab == pytest.approx(ba, abs=1e-9)
    assert 0 <= ab <= min(a.area, b.area) + 1e-9


def test_iou_bev_examples():
    assert iou_bev(square(0, 0, 2), square(0, 0, 2)) == 1.0
    assert iou_bev(square(0, 0, 2), square(1, 0, 2)) == pytest.approx(1 / 3)
    assert iou_bev(square(0, 0, 2), square(10, 10, 2)) == 0.0


def test_iou_bev_matches_raster_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a = (*rng.uniform(-2, 2, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-math.pi, math.pi))
        b = (*rng.uniform(-2, 2, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-math.pi, math.pi))
        assert abs(iou_bev(BevBox(*a), BevBox(*b)) - raster_iou_bev(a, b)) < 1e-3


def test_iou_3d_examples():
    a = Box3D(0, 0, 0, 2, 2, 2)
    assert iou_3d(a, a) == 1.0
    assert iou_3d(a, Box3D(0, 0, 1, 2, 2, 2)) == pytest.approx(1 / 3)
    assert iou_3d(a, Box3D(0, 0, 5, 2, 2, 2)) == 0.0


def test_iou_3d_matches_voxel_oracle():
    rng = np.random.default_rng(12)
    for _ in range(40):
        a = (*rng.uniform(-2, 2, 2), rng.uniform(-1, 1), *rng.uniform(0.5, 4, 2), rng.uniform(0.5, 2),
             rng.uniform(-math.pi, math.pi))
        b = (*rng.uniform(-2, 2, 2), rng.uniform(-1, 1), *rng.uniform(0.5, 4, 2), rng.uniform(0.5, 2),
             rng.uniform(-math.pi, math.pi))
        assert abs(iou_3d(Box3D(*a), Box3D(*b)) - voxel_iou_3d(a, b)) < 2e-3


@given(boxes3d, boxes3d)
def test_iou_properties(a, b):
    for f, x, y in ((iou_bev, a.bev(), b.bev()), (iou_3d, a, b)):
        v = f(x, y)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(f(y, x), abs=1e-12)
    assert iou_bev(a.bev(), a.bev()) == 1.0
    assert iou_3d(a, a) == 1.0


@given(boxes3d, boxes3d, angle, coord, coord, st.floats(-2, 2))
def test_iou_rigid_invariance(a, b, theta, tx, ty, tz):
    a2, b2 = (rigid_transform(x, theta, tx, ty, tz) for x in (a, b))
    assert iou_bev(a2.bev(), b2.bev()) == pytest.approx(iou_bev(a.bev(), b.bev()), abs=1e-9)
    assert iou_3d(a2, b2) == pytest.approx(iou_3d(a, b), abs=1e-9)


def test_axis_aligned_fast_path_agrees_with_clipping():
    # quarter-turn footprints take the rectangle route; a tiny yaw forces polygon clipping
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = BevBox(*rng.uniform(-2, 2, 2), *rng.uniform(0.5, 4, 2), rng.integers(4) * math.pi / 2)
        b = BevBox(*rng.uniform(-2, 2, 2), *rng.uniform(0.5, 4, 2), rng.integers(4) * math.pi / 2)
        clipped = polygon_intersection_area(a.polygon(), b.polygon())
        union = a.area + b.area - clipped
        assert iou_bev(a, b) == pytest.approx(clipped / union, abs=1e-9)


def test_iou_matrices_match_pairwise(rng):
    a = [Box3D(*rng.uniform(-3, 3, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-3, 3)) for _ in range(7)]
    b = [Box3D(*rng.uniform(-3, 3, 3), *rng.uniform(0.5, 3, 3), rng.uniform(-3, 3)) for _ in range(5)]
    m2, m3 = iou_bev_matrix(a, b), iou_3d_matrix(a, b)
    assert m2.shape == (7, 5)
    for i in range(7):
        for j in range(5):
            assert m2[i, j] == pytest.approx(iou_bev(a[i].bev(), b[j].bev()), abs=1e-12)
            assert m3[i, j] == pytest.approx(iou_3d(a[i], b[j]), abs=1e-12)
    assert iou_bev_matrix([], b).shape == (0, 5)


# ---------------------------------------------------------------- NMS


def test_nms_examples():
    assert nms_bev([square(0, 0, 2)], [0.3], 0.7) == [0]
    assert nms_bev([square(0, 0, 2), square(0, 0, 2)], [0.9, 0.8], 0.7) == [0]
    assert nms_bev([square(0, 0, 2), square(0, 0, 2)], [0.8, 0.9], 0.7) == [1]
    assert nms_bev([square(0, 0, 2), square(0, 0, 2)], [0.5, 0.5], 0.7) == [0]  # lower index wins ties
    assert nms_bev([], [], 0.7) == []


@pytest.mark.parametrize("seed", range(5))
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    boxes = [BevBox(*rng.uniform(0, 8, 2), *rng.uniform(0.5, 3, 2), rng.uniform(-math.pi, math.pi))
             for _ in range(50)]
    scores = rng.random(50)
    iou = np.array([[iou_bev(a, b) for b in boxes] for a in boxes])
    for thr in (0.1, 0.3, 0.7):
        assert nms_bev(boxes, scores, thr) == brute_nms(iou, scores, thr)


@given(st.lists(st.tuples(bevboxes, st.floats(0, 1)), min_size=1, max_size=25, unique_by=lambda t: t[1]),
       st.randoms())
def test_nms_order_independent(items, rnd):
    boxes, scores = zip(*items)
    kept = {(boxes[i], scores[i]) for i in nms_bev(list(boxes), list(scores), 0.5)}
    perm = list(range(len(items)))
    rnd.shuffle(perm)
    kept2 = {(boxes[i], scores[i]) for i in nms_bev([boxes[i] for i in perm], [scores[i] for i in perm], 0.5)
             for i in [perm[i]]}
    assert kept == kept2
    ks = [boxes[i] for i in nms_bev(list(boxes), list(scores), 0.5)]
    for i in range(len(ks)):
        for j in range(i + 1, len(ks)):
            assert iou_bev(ks[i], ks[j]) <= 0.5


def test_nms_max_keep():
    boxes = [square(3 * i, 0, 2) for i in range(10)]
    assert nms_bev(boxes, np.arange(10.0), 0.7, max_keep=3) == [9, 8, 7]
