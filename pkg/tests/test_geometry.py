import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadrl.errors import DegenerateInput, OffCorridor
from roadrl.geometry import (CellPoint, CurvilinearPoint, RoadCurve,
                             arc_length_advance, cartesian_to_curvilinear,
                             cell_to_curvilinear, curvilinear_to_cartesian,
                             curvilinear_to_cell, fit_road_curve,
                             fit_trajectory_spline, layer_spacing)

from oracles import dense_closest_point, polyline_arc_length


def random_curve(rng):
    coeffs = (rng.uniform(-3, 3), rng.uniform(-0.5, 0.5),
              rng.uniform(-0.05, 0.05), rng.uniform(-0.005, 0.005))
    return RoadCurve(coeffs)


# -- fitting -----------------------------------------------------------------


def test_fit_flat_road_is_exact():
    curve = fit_road_curve([(float(x), 0.0) for x in range(8)])
    assert curve.coeffs == pytest.approx((0.0, 0.0, 0.0, 0.0), abs=1e-12)


def test_fit_linear_road_is_exact():
    curve = fit_road_curve([(float(x), 1.0 + 2.0 * x) for x in range(-2, 4)])
    assert curve.coeffs == pytest.approx((1.0, 2.0, 0.0, 0.0), abs=1e-10)


def test_fit_matches_normal_equations_oracle():
    rng = np.random.default_rng(7)
    xs = rng.uniform(-20, 20, size=20)
    ys = 0.01 * xs ** 3 + rng.normal(0, 0.3, size=20)
    curve = fit_road_curve(np.stack([xs, ys], axis=1))
    # independent dense solve of the normal equations
    vander = np.vander(xs, 4, increasing=True)
    oracle = np.linalg.solve(vander.T @ vander, vander.T @ ys)
    assert curve.coeffs == pytest.approx(tuple(oracle), rel=1e-8, abs=1e-10)


def test_fit_rejects_too_few_distinct_abscissae():
    with pytest.raises(DegenerateInput):
        fit_road_curve([(0.0, 0.0), (0.0, 1.0), (1.0, 2.0), (2.0, 1.0)])
    with pytest.raises(DegenerateInput):
        fit_road_curve([(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)])


def test_road_curve_validation():
    with pytest.raises(DegenerateInput):
        RoadCurve((0.0, 0.0, 0.0, 0.0), lane_width=-1.0)
    with pytest.raises(DegenerateInput):
        RoadCurve((0.0, 0.0, 0.0, 0.0), num_lanes=0)


# -- cartesian <-> curvilinear --------------------------------------------------


def test_straight_road_identity():
    curve = RoadCurve((0.0, 0.0, 0.0, 0.0))
    q = cartesian_to_curvilinear(curve, (5.0, 2.0))
    assert q.s == pytest.approx(5.0, abs=1e-9)
    assert q.n == pytest.approx(2.0, abs=1e-9)
    x, y = curvilinear_to_cartesian(curve, CurvilinearPoint(5.0, 2.0))
    assert (x, y) == pytest.approx((5.0, 2.0), abs=1e-9)


def test_centerline_point_has_zero_offset():
    curve = RoadCurve((1.0, 0.2, -0.01, 0.001))
    x = 3.0
    q = cartesian_to_curvilinear(curve, (x, curve.y(x)))
    assert q.n == pytest.approx(0.0, abs=1e-9)


def test_left_of_travel_is_positive():
    curve = RoadCurve((0.0, 0.0, 0.0, 0.0))
    assert cartesian_to_curvilinear(curve, (1.0, 0.5)).n > 0
    assert cartesian_to_curvilinear(curve, (1.0, -0.5)).n < 0


def test_off_corridor_raises():
    curve = RoadCurve((0.0, 0.0, 0.0, 0.0), lane_width=3.5, num_lanes=3)
    with pytest.raises(OffCorridor):
        cartesian_to_curvilinear(curve, (0.0, 50.0))


def test_closest_point_matches_dense_sampling_oracle():
    rng = np.random.default_rng(11)
    for _ in range(5):
        curve = random_curve(rng)
        ch = 2.0 * curve.half_width
        px = rng.uniform(-15, 15)
        py = curve.y(px) + rng.uniform(-0.8, 0.8) * curve.half_width
        q = cartesian_to_curvilinear(curve, (px, py))
        x_star, _ = dense_closest_point(curve, (px, py), (px - ch, px + ch))
        s_oracle = polyline_arc_length(curve, x_star, samples=200_000)
        assert abs(q.s - s_oracle) < 1e-3


def test_round_trip_1000_points():
    rng = np.random.default_rng(23)
    curve = random_curve(rng)
    for _ in range(1000):
        s = rng.uniform(-25, 25)
        n = rng.uniform(-curve.half_width, curve.half_width)
        x, y = curvilinear_to_cartesian(curve, CurvilinearPoint(s, n))
        q = cartesian_to_curvilinear(curve, (x, y))
        assert abs(q.s - s) < 1e-6 and abs(q.n - n) < 1e-6


@settings(max_examples=30, deadline=None)
@given(
    c0=st.floats(-3, 3), c1=st.floats(-0.4, 0.4), c2=st.floats(-0.04, 0.04),
    c3=st.floats(-0.004, 0.004), s=st.floats(-20, 20), frac=st.floats(-0.95, 0.95),
)
def test_round_trip_property(c0, c1, c2, c3, s, frac):
    curve = RoadCurve((c0, c1, c2, c3))
    n = frac * curve.half_width
    x, y = curvilinear_to_cartesian(curve, CurvilinearPoint(s, n))
    q = cartesian_to_curvilinear(curve, (x, y))
    assert abs(q.s - s) < 1e-6 and abs(q.n - n) < 1e-6


# -- arc length ------------------------------------------------------------------


def test_arc_length_straight_road():
    curve = RoadCurve((0.0, 0.0, 0.0, 0.0))
    assert arc_length_advance(curve, 7.5) == pytest.approx(7.5, abs=1e-9)
    assert arc_length_advance(curve, 0.0) == 0.0


def test_arc_length_matches_polyline_oracle():
    curve = RoadCurve((0.0, 0.3, -0.02, 0.002))
    for x in (3.0, 11.0, 24.0):
        impl_s = 0.0
        t = arc_length_advance(curve, polyline_arc_length(curve, x))
        assert abs(t - x) < 1e-4


# -- cell coordinates -------------------------------------------------------------


def test_cell_conversion_divides_componentwise():
    curve = RoadCurve((0.0, 0.0, 0.0, 0.0), lane_width=3.5, layer_spacing_L=10.0)
    c = curvilinear_to_cell(CurvilinearPoint(20.0, 1.75), curve)
    assert (c.layer, c.lane_offset) == (2.0, 0.5)
    assert curvilinear_to_cell(CurvilinearPoint(0.0, 0.0), curve) == CellPoint(0.0, 0.0)


def test_cell_round_trip_exact():
    curve = RoadCurve((0.0, 0.0, 0.0, 0.0), lane_width=3.5, layer_spacing_L=10.0)
    q = cell_to_curvilinear(CellPoint(2.0, 0.5), curve)
    assert (q.s, q.n) == (20.0, 1.75)
    rng = np.random.default_rng(3)
    for _ in range(100):
        c = CellPoint(rng.uniform(0, 50), rng.uniform(-2, 2))
        back = curvilinear_to_cell(cell_to_curvilinear(c, curve), curve)
        assert back.layer == pytest.approx(c.layer, rel=1e-15, abs=0.0)
        assert back.lane_offset == pytest.approx(c.lane_offset, rel=1e-15, abs=0.0)


# -- spline ------------------------------------------------------------------------


def test_spline_two_points_is_straight():
    sp = fit_trajectory_spline([(0.0, 1.0), (2.0, 5.0)])
    xs = np.linspace(0.0, 2.0, 9)
    assert np.allclose(sp(xs), 1.0 + 2.0 * xs, atol=1e-12)


def test_spline_on_line_has_zero_second_derivative():
    pts = [(float(x), 3.0 - 0.5 * x) for x in range(6)]
    sp = fit_trajectory_spline(pts)
    xs = np.linspace(0.0, 5.0, 50)
    assert np.max(np.abs(sp(xs, 2))) < 1e-10


def test_spline_interpolates_and_is_c2():
    rng = np.random.default_rng(5)
    xs = np.sort(rng.uniform(0, 10, size=5))
    xs += np.arange(5) * 1e-3  # enforce strict increase
    ys = rng.normal(0, 2, size=5)
    sp = fit_trajectory_spline(np.stack([xs, ys], axis=1))
    assert np.allclose(sp(xs), ys, atol=1e-9)
    for knot in xs[1:-1]:
        left = sp(knot - 1e-9, 2)
        right = sp(knot + 1e-9, 2)
        assert abs(left - right) < 1e-5


def test_spline_matches_tridiagonal_oracle():
    rng = np.random.default_rng(9)
    xs = np.sort(rng.uniform(0, 10, size=5))
    ys = rng.normal(0, 2, size=5)
    sp = fit_trajectory_spline(np.stack([xs, ys], axis=1))

    # natural-spline second derivatives from the explicit tridiagonal system
    h = np.diff(xs)
    n = len(xs)
    a = np.zeros((n, n))
    rhs = np.zeros(n)
    a[0, 0] = a[-1, -1] = 1.0
    for i in range(1, n - 1):
        a[i, i - 1] = h[i - 1]
        a[i, i] = 2.0 * (h[i - 1] + h[i])
        a[i, i + 1] = h[i]
        rhs[i] = 3.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1])
    c = np.linalg.solve(a, rhs)  # c_i = s''(x_i) / 2

    for i in range(n - 1):
        for frac in (0.25, 0.5, 0.75):
            x = xs[i] + frac * h[i]
            b = (ys[i + 1] - ys[i]) / h[i] - h[i] * (2.0 * c[i] + c[i + 1]) / 3.0
            d = (c[i + 1] - c[i]) / (3.0 * h[i])
            dx = x - xs[i]
            oracle = ys[i] + b * dx + c[i] * dx ** 2 + d * dx ** 3
            assert sp(x) == pytest.approx(oracle, abs=1e-9)


def test_spline_rejects_bad_abscissae():
    with pytest.raises(DegenerateInput):
        fit_trajectory_spline([(0.0, 1.0), (0.0, 2.0), (1.0, 3.0)])
    with pytest.raises(DegenerateInput):
        fit_trajectory_spline([(0.0, 1.0)])


def test_layer_spacing_rule():
    assert layer_spacing(0.0) == 5.0
    assert layer_spacing(4.0) == 5.0
    assert layer_spacing(7.0) == 7.0
    assert layer_spacing(2.0, l_min=1.0, t_layer=2.0) == 4.0
