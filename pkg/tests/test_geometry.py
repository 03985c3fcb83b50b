"""Tests for the signed-distance geometry layer."""

import math

import numpy as np
import pytest

from qtsbfem.geometry import (
    Circle,
    CircleCurve,
    ConvexPolygon,
    CrackPath,
    Difference,
    GeometryError,
    HalfPlane,
    Intersection,
    PointClass,
    Polyline,
    Rectangle,
    RectanglePerimeter,
    Segment,
    Union,
    classify_point,
    generate_seeds,
    intersect_edge,
    project_to_boundary,
    sdf_eval,
    sdf_gradient,
)


class TestSdfEval:
    def test_circle_centre(self):
        assert sdf_eval(Circle((0, 0), 1.0), (0.0, 0.0)) == pytest.approx(-1.0)

    def test_circle_outside(self):
        assert sdf_eval(Circle((0, 0), 1.0), (2.0, 0.0)) == pytest.approx(1.0)

    def test_difference_inside_hole(self):
        region = Difference((Rectangle((0, 0), (10, 10)), Circle((5, 5), 1.0)))
        assert sdf_eval(region, (5.0, 5.0)) == pytest.approx(1.0)

    def test_union_is_min(self):
        region = Union((Circle((0, 0), 1.0), Circle((4, 0), 1.0)))
        assert sdf_eval(region, (2.0, 0.0)) == pytest.approx(1.0)

    def test_intersection_is_max(self):
        region = Intersection((Circle((0, 0), 2.0), Circle((2, 0), 2.0)))
        assert sdf_eval(region, (1.0, 0.0)) == pytest.approx(-1.0)

    def test_malformed_tree(self):
        with pytest.raises(GeometryError):
            Union((Circle((0, 0), 1.0), "not a region"))
        with pytest.raises(GeometryError):
            Circle((0, 0), -1.0)

    def test_vectorised(self):
        region = Circle((0, 0), 1.0)
        d = sdf_eval(region, np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(d, [-1.0, 1.0, 0.0], atol=1e-15)

    def test_primitive_distance_is_exact(self):
        # |sdf(p)| equals the distance to a dense boundary sampling
        rng = np.random.default_rng(7)
        prims = [
            Circle((0.3, -0.2), 0.8),
            Rectangle((-1.0, -0.5), (0.7, 1.1)),
            ConvexPolygon(((0, 0), (2, 0), (2.5, 1.5), (1, 2.4), (-0.5, 1))),
        ]
        for region in prims:
            boundary = _dense_boundary(region)
            for p in rng.uniform(-3, 3, size=(40, 2)):
                d = sdf_eval(region, p)
                ref = np.min(np.hypot(boundary[:, 0] - p[0], boundary[:, 1] - p[1]))
                assert abs(abs(d) - ref) < 1e-8

    def test_boolean_sign_correctness(self):
        rng = np.random.default_rng(21)
        rect = Rectangle((0, 0), (2, 1))
        hole = Circle((1.0, 0.5), 0.3)
        region = Difference((rect, hole))
        for p in rng.uniform(-0.5, 2.5, size=(300, 2)):
            in_rect = (0 < p[0] < 2) and (0 < p[1] < 1)
            in_hole = math.hypot(p[0] - 1.0, p[1] - 0.5) < 0.3
            expected_inside = in_rect and not in_hole
            d = sdf_eval(region, p)
            if abs(d) < 1e-9:
                continue
            assert (d < 0) == expected_inside


def _dense_boundary(region, n=300000):
    if isinstance(region, Circle):
        t = np.linspace(0, 2 * math.pi, n, endpoint=False)
        c = np.asarray(region.center)
        return c + region.radius * np.column_stack([np.cos(t), np.sin(t)])
    if isinstance(region, Rectangle):
        lo, hi = np.asarray(region.lo), np.asarray(region.hi)
        verts = [lo, [hi[0], lo[1]], hi, [lo[0], hi[1]]]
    else:
        verts = [np.asarray(v, float) for v in region.vertices]
    # sample edge by edge with corner points included: the nearest-point
    # error is then quadratic in the spacing everywhere
    per_edge = n // len(verts)
    chunks = []
    for k, a in enumerate(verts):
        b = np.asarray(verts[(k + 1) % len(verts)], float)
        t = np.linspace(0.0, 1.0, per_edge, endpoint=False)
        chunks.append(np.asarray(a, float) + t[:, None] * (b - np.asarray(a, float)))
    return np.vstack(chunks)


class TestGradient:
    def test_circle_radial(self):
        g = sdf_gradient(Circle((0, 0), 1.0), (2.0, 0.0), step=1e-6)
        np.testing.assert_allclose(g, [1.0, 0.0], atol=1e-9)

    def test_rect_below(self):
        g = sdf_gradient(Rectangle((0, 0), (1, 1)), (0.5, -1.0), step=1e-6)
        np.testing.assert_allclose(g, [0.0, -1.0], atol=1e-9)

    def test_union_selects_nearer_child(self):
        a = Circle((0, 0), 1.0)
        b = Circle((10, 0), 1.0)
        g = sdf_gradient(Union((a, b)), (2.0, 0.5), step=1e-6)
        ga = sdf_gradient(a, (2.0, 0.5), step=1e-6)
        np.testing.assert_allclose(g, ga, atol=1e-9)

    def test_unit_norm(self):
        g = sdf_gradient(Circle((0.3, 0.4), 0.7), (1.8, -0.2), step=1e-6)
        assert abs(np.hypot(*g) - 1.0) < 1e-8

    def test_degenerate(self):
        from qtsbfem.geometry import DegenerateGradientError

        with pytest.raises(DegenerateGradientError):
            sdf_gradient(Circle((0, 0), 1.0), (0.0, 0.0), step=1e-9)


class TestClassify:
    def test_inside(self):
        assert classify_point(-0.5, 1e-6) is PointClass.INSIDE

    def test_zero(self):
        assert classify_point(0.0, 1e-6) is PointClass.ON_BOUNDARY

    def test_within_tolerance(self):
        assert classify_point(1e-7, 1e-6) is PointClass.ON_BOUNDARY

    def test_outside(self):
        assert classify_point(0.5, 1e-6) is PointClass.OUTSIDE

    def test_bad_tolerance(self):
        with pytest.raises(GeometryError):
            classify_point(0.1, 0.0)


class TestIntersectEdge:
    def test_circle_horizontal(self):
        x = intersect_edge((0, 0), (2, 0), Circle((0, 0), 1.0))
        np.testing.assert_allclose(x, [1.0, 0.0], atol=1e-10)

    def test_half_plane(self):
        region = HalfPlane((0.0, 0.0), (0.0, -1.0))  # inside is y > 0
        x = intersect_edge((0.5, 0.5), (0.5, -0.5), region)
        np.testing.assert_allclose(x, [0.5, 0.0], atol=1e-10)

    def test_diagonal_closed_form(self):
        x = intersect_edge((0, 0), (2, 2), Circle((0, 0), 1.0))
        np.testing.assert_allclose(x, [math.sqrt(2) / 2, math.sqrt(2) / 2], atol=1e-10)

    def test_same_sign_rejected(self):
        with pytest.raises(GeometryError):
            intersect_edge((2, 0), (3, 0), Circle((0, 0), 1.0))

    def test_residual_bound(self):
        region = Circle((0.2, -0.1), 0.73)
        p0, p1 = np.array([0.2, -0.1]), np.array([1.7, 0.9])
        x = intersect_edge(p0, p1, region)
        assert abs(sdf_eval(region, x)) < 1e-10 * np.hypot(*(p1 - p0))

    def test_idempotent_under_projection(self):
        region = Circle((0.0, 0.0), 1.0)
        x = intersect_edge((0.1, 0.2), (1.9, 1.1), region)
        y = project_to_boundary(x, region, tol=1e-12, grad_step=1e-7)
        assert np.hypot(*(y - x)) < 1e-9


class TestProject:
    def test_circle_outside(self):
        x = project_to_boundary((2.0, 0.0), Circle((0, 0), 1.0), tol=1e-10, grad_step=1e-6)
        np.testing.assert_allclose(x, [1.0, 0.0], atol=1e-9)

    def test_circle_inside_radial(self):
        x = project_to_boundary((0.5, 0.0), Circle((0, 0), 1.0), tol=1e-10, grad_step=1e-6)
        np.testing.assert_allclose(x, [1.0, 0.0], atol=1e-9)

    def test_rectangle_above(self):
        x = project_to_boundary((0.5, 1.2), Rectangle((0, 0), (1, 1)), tol=1e-10, grad_step=1e-6)
        np.testing.assert_allclose(x, [0.5, 1.0], atol=1e-9)


class TestSeeds:
    def test_circle_four(self):
        cloud = generate_seeds([(CircleCurve((0, 0), 1.0), 4)])
        expected = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], dtype=float)
        np.testing.assert_allclose(cloud.points, expected, atol=1e-12)

    def test_segment_three(self):
        cloud = generate_seeds([], roi=[(Segment((0, 0), (1, 0)), 3)])
        np.testing.assert_allclose(cloud.points, [[0, 0], [0.5, 0], [1, 0]], atol=1e-14)
        assert cloud.tags == ["roi"] * 3

    def test_tip_circle_eight(self):
        crack = CrackPath(
            points=np.array([[0.0, 0.0], [1.0, 0.0]]),
            tip_flags=(False, True),
            tip_radius=0.2,
            tip_seeds=8,
            path_seeds=4,
        )
        cloud = generate_seeds([], cracks=[crack])
        ring = cloud.points[np.array(cloud.tags) == "tip"]
        assert len(ring) == 8
        radii = np.hypot(ring[:, 0] - 1.0, ring[:, 1])
        np.testing.assert_allclose(radii, 0.2, atol=1e-12)
        angles = np.sort(np.degrees(np.arctan2(ring[:, 1], ring[:, 0] - 1.0)) % 360)
        np.testing.assert_allclose(np.diff(angles), 45.0, atol=1e-9)

    def test_closed_needs_four(self):
        with pytest.raises(GeometryError):
            generate_seeds([(CircleCurve((0, 0), 1.0), 3)])

    def test_zero_length_curve(self):
        with pytest.raises(GeometryError):
            generate_seeds([], roi=[(Segment((0, 0), (0, 0)), 3)])


class TestCrackPath:
    def test_needs_a_tip(self):
        with pytest.raises(GeometryError):
            CrackPath(points=np.array([[0, 0], [1, 0]]), tip_flags=(False, False), tip_radius=0.1)

    def test_self_intersection_rejected(self):
        pts = np.array([[0, 0], [1, 0], [1, 1], [0.5, -0.5]])
        with pytest.raises(GeometryError):
            CrackPath(points=pts, tip_flags=(True, True), tip_radius=0.1)

    def test_tip_direction_points_ahead(self):
        crack = CrackPath(points=np.array([[0, 0], [2, 0]]), tip_flags=(True, True), tip_radius=0.1)
        tips = crack.tips()
        np.testing.assert_allclose(tips[0][2], [-1, 0])
        np.testing.assert_allclose(tips[1][2], [1, 0])

    def test_side_sign(self):
        crack = CrackPath(points=np.array([[0, 0], [2, 0]]), tip_flags=(True, True), tip_radius=0.1)
        assert crack.side_of((1.0, 0.5)) > 0
        assert crack.side_of((1.0, -0.5)) < 0
