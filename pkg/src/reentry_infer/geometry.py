"""Parametric description of the elliptical non-conducting region.

The region is an ellipse with semi-axes ``a`` (long) and ``b`` (short),
inclined by ``phi`` and centered at a fixed point of the tissue slab.
All lengths are in millimeters, angles in radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

DEFAULT_CENTER = (50.0, 50.0)


@dataclass(frozen=True)
class GeometryParam:
    """Ellipse parameters [a, b, phi] with a fixed center."""

    a: float
    b: float
    phi: float
    center: tuple[float, float] = DEFAULT_CENTER

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"semi-axes must be positive, got a={self.a}, b={self.b}")
        if not (-math.pi < self.phi <= math.pi):
            raise ValueError(f"phi must lie in (-pi, pi], got {self.phi}")

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.phi])

    @staticmethod
    def from_array(v, center=DEFAULT_CENTER) -> "GeometryParam":
        return GeometryParam(float(v[0]), float(v[1]), float(v[2]), center)


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("coordinates must be finite")


def _to_ellipse_frame(theta: GeometryParam, x, y):
    """Rotate world coordinates into the ellipse's principal frame."""
    dx = np.asarray(x, dtype=float) - theta.center[0]
    dy = np.asarray(y, dtype=float) - theta.center[1]
    c, s = math.cos(theta.phi), math.sin(theta.phi)
    return dx * c + dy * s, -dx * s + dy * c


def ellipse_value(theta: GeometryParam, x, y):
    """Quadratic form u^2/a^2 + v^2/b^2; < 1 inside, = 1 on the boundary."""
    u, v = _to_ellipse_frame(theta, x, y)
    return (u / theta.a) ** 2 + (v / theta.b) ** 2


def contains(theta: GeometryParam, p: Point2) -> bool:
    """True iff p lies strictly inside the ellipse (boundary counts as outside)."""
    return bool(ellipse_value(theta, p.x, p.y) < 1.0)


def contains_xy(theta: GeometryParam, x, y) -> np.ndarray:
    """Vectorized strict-interior test for coordinate arrays."""
    return ellipse_value(theta, x, y) < 1.0


def _closest_param_first_quadrant(a: float, b: float, px: float, py: float) -> float:
    """Parametric angle t in [0, pi/2] of the closest boundary point to (px, py).

    Assumes px, py >= 0.  Stationarity of the squared distance to
    (a cos t, b sin t) reads g(t) = (b^2 - a^2) sin t cos t + a px sin t - b py cos t = 0.
    """
    if px == 0.0 and py == 0.0:
        # Center: every direction is stationary; the minor axis is closest.
        return math.pi / 2 if a >= b else 0.0
    # On-axis queries can have the minimizer off the axis (inside the evolute),
    # so compare the axis candidate against the interior stationary point.
    if py == 0.0:
        cands = [0.0, math.pi]
        cc = a * px / (a * a - b * b) if a != b else math.inf
        if -1.0 < cc < 1.0:
            cands.append(math.acos(cc))
        return min(cands, key=lambda t: (a * math.cos(t) - px) ** 2 + (b * math.sin(t)) ** 2)
    if px == 0.0:
        cands = [math.pi / 2, -math.pi / 2]
        ss = -b * py / (a * a - b * b) if a != b else math.inf
        if -1.0 < ss < 1.0:
            cands.append(math.asin(ss))
        return min(cands, key=lambda t: (a * math.cos(t)) ** 2 + (b * math.sin(t) - py) ** 2)

    def g(t):
        return (b * b - a * a) * math.sin(t) * math.cos(t) + a * px * math.sin(t) - b * py * math.cos(t)

    def dg(t):
        return (b * b - a * a) * math.cos(2 * t) + a * px * math.cos(t) + b * py * math.sin(t)

    # g(0) = -b py < 0 and g(pi/2) = a px > 0: unique root brackets in (0, pi/2).
    lo, hi = 0.0, math.pi / 2
    t = math.atan2(a * py, b * px)
    converged = False
    for _ in range(100):
        gt = g(t)
        if gt > 0:
            hi = t
        else:
            lo = t
        d = dg(t)
        t_new = t - gt / d if d != 0 else 0.5 * (lo + hi)
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) < 1e-10:
            t = t_new
            converged = True
            break
        t = t_new
    if converged:
        return t
    # Dense angular scan followed by local bisection on the bracketing interval.
    ts = np.linspace(0.0, math.pi / 2, 10_000)
    d2 = (a * np.cos(ts) - px) ** 2 + (b * np.sin(ts) - py) ** 2
    k = int(np.argmin(d2))
    lo = ts[max(k - 1, 0)]
    hi = ts[min(k + 1, len(ts) - 1)]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi)


def closest_point_on_ellipse(theta: GeometryParam, p: Point2) -> Point2:
    """Boundary point minimizing the Euclidean distance to p.

    p must not coincide with the ellipse center.
    """
    u, v = _to_ellipse_frame(theta, p.x, p.y)
    u, v = float(u), float(v)
    if u == 0.0 and v == 0.0:
        raise ValueError("closest point is undefined at the ellipse center")
    # Fold the query into the first quadrant, solve there, then restore signs.
    t = _closest_param_first_quadrant(theta.a, theta.b, abs(u), abs(v))
    qu = theta.a * math.cos(t) * (1 if u >= 0 else -1)
    qv = theta.b * math.sin(t) * (1 if v >= 0 else -1)
    c, s = math.cos(theta.phi), math.sin(theta.phi)
    return Point2(theta.center[0] + qu * c - qv * s, theta.center[1] + qu * s + qv * c)


def closest_points_on_ellipse(theta: GeometryParam, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """closest_point_on_ellipse applied to coordinate arrays; returns (n, 2)."""
    out = np.empty((len(xs), 2))
    for i, (x, y) in enumerate(zip(xs, ys)):
        q = closest_point_on_ellipse(theta, Point2(float(x), float(y)))
        out[i, 0] = q.x
        out[i, 1] = q.y
    return out


def perimeter(theta: GeometryParam) -> float:
    """Ellipse circumference by adaptive arc-length quadrature (rel. err < 1e-8)."""
    a, b = theta.a, theta.b
    if a == b:
        return 2.0 * math.pi * a
    val, _ = quad(lambda t: math.hypot(a * math.sin(t), b * math.cos(t)),
                  0.0, math.pi / 2, epsabs=0.0, epsrel=1e-10, limit=200)
    return 4.0 * val


def perimeter_ab(a: float, b: float) -> float:
    """Circumference from semi-axes alone (phi and center are irrelevant)."""
    return perimeter(GeometryParam(a, b, 0.0))
