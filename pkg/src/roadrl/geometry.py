"""Road-frame coordinate machinery.

Three frames are used throughout the project:

* Cartesian ``(x, y)`` in meters, with the road centerline given by a cubic
  polynomial ``y = c0 + c1*x + c2*x^2 + c3*x^3``.
* Curvilinear ``(s, n)``: arc length along the centerline (measured from the
  point at ``x = 0``) and signed perpendicular offset.  ``n > 0`` is to the
  left of the direction of increasing ``s``.
* Cell ``(layer, lane_offset)``: curvilinear coordinates divided by the layer
  spacing ``L`` and the lane width.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import DegenerateInput, OffCorridor

__all__ = [
    "RoadCurve",
    "CurvilinearPoint",
    "CellPoint",
    "fit_road_curve",
    "cartesian_to_curvilinear",
    "curvilinear_to_cartesian",
    "curvilinear_to_cell",
    "cell_to_curvilinear",
    "arc_length_advance",
    "fit_trajectory_spline",
    "layer_spacing",
]

# Arc-length integrals use 20-node Gauss-Legendre panels of at most 5 m; the
# integrand sqrt(1 + p'(x)^2) is smooth, so this sits at machine precision,
# far below the 1e-6 m round-trip budget.
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)
_PANEL_LEN = 5.0
_ROOT_TOL = 1e-12
_NEWTON_SEEDS = 64
_NEWTON_ITERS = 30


@dataclass(frozen=True)
class RoadCurve:
    """Cubic road centerline plus lane geometry.

    ``coeffs`` are ascending-power polynomial coefficients in meters.
    """

    coeffs: tuple[float, float, float, float]
    lane_width: float = 3.5
    num_lanes: int = 3
    layer_spacing_L: float = 5.0

    def __post_init__(self) -> None:
        if len(self.coeffs) != 4:
            raise DegenerateInput("road curve needs exactly 4 cubic coefficients")
        if self.lane_width <= 0 or self.layer_spacing_L <= 0:
            raise DegenerateInput("lane_width and layer_spacing_L must be positive")
        if self.num_lanes < 1:
            raise DegenerateInput("num_lanes must be at least 1")

    def y(self, x):
        c0, c1, c2, c3 = self.coeffs
        return ((c3 * x + c2) * x + c1) * x + c0

    def dy(self, x):
        _, c1, c2, c3 = self.coeffs
        return (3.0 * c3 * x + 2.0 * c2) * x + c1

    def ddy(self, x):
        _, _, c2, c3 = self.coeffs
        return 6.0 * c3 * x + 2.0 * c2

    @property
    def half_width(self) -> float:
        return 0.5 * self.num_lanes * self.lane_width

    def point(self, x):
        return np.stack([np.asarray(x, dtype=float), self.y(x)], axis=-1)

    def unit_normal(self, x):
        """Left-of-travel unit normal at curve parameter ``x``."""
        d = self.dy(x)
        norm = np.sqrt(1.0 + d * d)
        return np.stack([-d / norm, np.ones_like(norm) / norm], axis=-1)


@dataclass(frozen=True)
class CurvilinearPoint:
    s: float
    n: float


@dataclass(frozen=True)
class CellPoint:
    layer: float
    lane_offset: float


def fit_road_curve(
    samples: Sequence[Sequence[float]],
    lane_width: float = 3.5,
    num_lanes: int = 3,
    layer_spacing_L: float = 5.0,
) -> RoadCurve:
    """Least-squares cubic centerline through Cartesian ``samples``.

    Raises DegenerateInput when fewer than four distinct abscissae are given.
    """
    pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DegenerateInput("samples must be an (n, 2) array of points")
    xs, ys = pts[:, 0], pts[:, 1]
    if len(np.unique(xs)) < 4:
        raise DegenerateInput("need at least 4 samples with distinct x to fit a cubic")
    vander = np.vander(xs, 4, increasing=True)
    coeffs, *_ = np.linalg.lstsq(vander, ys, rcond=None)
    return RoadCurve(tuple(float(c) for c in coeffs), lane_width, num_lanes, layer_spacing_L)


def _signed_arc_length(curve: RoadCurve, x: float) -> float:
    """Arc length from parameter 0 to ``x`` (negative for x < 0)."""
    if x == 0.0:
        return 0.0
    panels = max(1, int(np.ceil(abs(x) / _PANEL_LEN)))
    edges = np.linspace(0.0, x, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    pts = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    vals = np.sqrt(1.0 + curve.dy(pts) ** 2)
    return float(np.sum(vals * _GL_WEIGHTS[None, :] * half[:, None]))


def arc_length_advance(curve: RoadCurve, s: float) -> float:
    """Curve parameter ``t`` whose arc length from the origin equals ``s``.

    The integrand is >= 1, so the root is bracketed by [0, s]; brentq then
    resolves it to machine precision.
    """
    if abs(s) < 1e-9:
        # first-order inversion; the quadratic error term is s^2-scale
        return s / float(np.sqrt(1.0 + curve.dy(0.0) ** 2))
    lo, hi = (0.0, s) if s > 0 else (s, 0.0)
    f = lambda t: _signed_arc_length(curve, t) - s
    return float(brentq(f, lo, hi, xtol=_ROOT_TOL, maxiter=200))


def cartesian_to_curvilinear(
    curve: RoadCurve, p: Sequence[float], corridor_half_width: float | None = None
) -> CurvilinearPoint:
    """Project a Cartesian point onto the road curve.

    The closest point is found by Newton iterations on the derivative of the
    squared distance, seeded from a coarse scan.  Any on-corridor minimizer
    has |x* - px| <= corridor half width, so scanning that bracket is enough
    to either find the global minimizer or to certify the point off-corridor.
    """
    if corridor_half_width is None:
        corridor_half_width = 2.0 * curve.half_width
    px, py = float(p[0]), float(p[1])

    r = corridor_half_width + 1e-9
    xs = np.linspace(px - r, px + r, _NEWTON_SEEDS)
    for _ in range(_NEWTON_ITERS):
        dy = curve.dy(xs)
        res = curve.y(xs) - py
        g = 2.0 * (xs - px) + 2.0 * res * dy  # d/dx squared distance
        h = 2.0 + 2.0 * (dy * dy + res * curve.ddy(xs))
        step = np.where(np.abs(h) > 1e-12, g / np.where(h == 0.0, 1.0, h), 0.0)
        xs = np.clip(xs - step, px - 2.0 * r, px + 2.0 * r)

    candidates = np.concatenate([xs, np.linspace(px - r, px + r, _NEWTON_SEEDS)])
    d2 = (candidates - px) ** 2 + (curve.y(candidates) - py) ** 2
    x_star = float(candidates[np.argmin(d2)])
    dist = float(np.sqrt(d2.min()))
    if dist > corridor_half_width:
        raise OffCorridor(
            f"point ({px:.3f}, {py:.3f}) is {dist:.3f} m from the curve "
            f"(corridor {corridor_half_width:.3f} m)"
        )

    normal = curve.unit_normal(x_star)
    n = (px - x_star) * normal[0] + (py - curve.y(x_star)) * normal[1]
    return CurvilinearPoint(s=_signed_arc_length(curve, x_star), n=float(n))


def curvilinear_to_cartesian(curve: RoadCurve, q: CurvilinearPoint) -> tuple[float, float]:
    """Advance ``q.s`` along the curve, then offset ``q.n`` along the normal."""
    t = arc_length_advance(curve, q.s)
    normal = curve.unit_normal(t)
    return (t + q.n * normal[0], curve.y(t) + q.n * normal[1])


def curvilinear_to_cell(q: CurvilinearPoint, curve: RoadCurve) -> CellPoint:
    return CellPoint(layer=q.s / curve.layer_spacing_L, lane_offset=q.n / curve.lane_width)


def cell_to_curvilinear(c: CellPoint, curve: RoadCurve) -> CurvilinearPoint:
    return CurvilinearPoint(s=c.layer * curve.layer_spacing_L, n=c.lane_offset * curve.lane_width)


def fit_trajectory_spline(points: Sequence[Sequence[float]]) -> Callable:
    """Natural cubic spline through planned points.

    Accepts (x, y) pairs in any planar frame with strictly increasing
    abscissae.  Returns a scipy PPoly; with two points it degenerates to the
    straight segment.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise DegenerateInput("need at least two (x, y) points")
    xs, ys = pts[:, 0], pts[:, 1]
    if np.any(np.diff(xs) <= 0):
        raise DegenerateInput("abscissae must be strictly increasing")
    return CubicSpline(xs, ys, bc_type="natural")


def layer_spacing(v: float, l_min: float = 5.0, t_layer: float = 1.0) -> float:
    """Layer spacing in meters for the current speed (held fixed per cycle)."""
    return max(l_min, v * t_layer)
