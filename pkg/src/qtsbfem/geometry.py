"""Implicit 2D geometry built from signed distance functions.

Primitives (circle, rectangle, convex polygon, half-plane) return exact
Euclidean distances. Boolean nodes combine children with the usual min/max
pseudo-distance rules, which keep the sign correct everywhere and the
magnitude accurate near the boundary; that is all the mesher relies on.

Sign convention: negative strictly inside, zero on the boundary (within a
tolerance), positive outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "DegenerateGradientError",
    "ProjectionError",
    "ImplicitRegion",
    "Circle",
    "Rectangle",
    "ConvexPolygon",
    "HalfPlane",
    "Union",
    "Intersection",
    "Difference",
    "PointClass",
    "sdf_eval",
    "sdf_gradient",
    "classify_point",
    "intersect_edge",
    "project_to_boundary",
    "Curve",
    "CircleCurve",
    "RectanglePerimeter",
    "Segment",
    "Polyline",
    "CrackPath",
    "SeedCloud",
    "generate_seeds",
]


class GeometryError(ValueError):
    """Malformed geometry definition or a query that cannot be answered."""


class DegenerateGradientError(GeometryError):
    """The SDF gradient vanishes at the query point."""


class ProjectionError(GeometryError):
    """Boundary projection failed to converge."""


def _points(p) -> tuple[np.ndarray, bool]:
    """Coerce a point or an (n, 2) array of points; return (array, was_single)."""
    a = np.asarray(p, dtype=float)
    if a.ndim == 1:
        if a.shape != (2,):
            raise GeometryError(f"expected a 2D point, got shape {a.shape}")
        return a[None, :], True
    if a.ndim != 2 or a.shape[1] != 2:
        raise GeometryError(f"expected an (n, 2) point array, got shape {a.shape}")
    return a, False


# ---------------------------------------------------------------------------
# Regions
# ---------------------------------------------------------------------------


class ImplicitRegion:
    """Base class for signed-distance regions."""

    def distance(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance for an (n, 2) array of points."""
        raise NotImplementedError

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Axis-aligned (lo, hi) box, or None if the region is unbounded."""
        raise NotImplementedError


@dataclass(frozen=True)
class Circle(ImplicitRegion):
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError(f"circle radius must be > 0, got {self.radius}")

    def distance(self, pts):
        c = np.asarray(self.center, dtype=float)
        return np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]) - self.radius

    def bounding_box(self):
        c = np.asarray(self.center, dtype=float)
        r = self.radius
        return c - r, c + r


@dataclass(frozen=True)
class Rectangle(ImplicitRegion):
    lo: tuple[float, float]
    hi: tuple[float, float]

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if not np.all(hi > lo):
            raise GeometryError(f"rectangle needs hi > lo, got {self.lo}, {self.hi}")

    def distance(self, pts):
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        q = np.abs(pts - center) - half
        outside = np.hypot(np.maximum(q[:, 0], 0.0), np.maximum(q[:, 1], 0.0))
        inside = np.minimum(np.maximum(q[:, 0], q[:, 1]), 0.0)
        return outside + inside

    def bounding_box(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)


@dataclass(frozen=True)
class ConvexPolygon(ImplicitRegion):
    """Convex polygon given by its vertices; stored counterclockwise."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise GeometryError("convex polygon needs at least 3 (x, y) vertices")
        area2 = _signed_area2(v)
        if area2 == 0.0:
            raise GeometryError("degenerate polygon (zero area)")
        if area2 < 0.0:
            v = v[::-1]
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross < -1e-12 * np.abs(area2)):
            raise GeometryError("polygon is not convex")
        object.__setattr__(self, "vertices", tuple(map(tuple, v)))

    def distance(self, pts):
        v = np.asarray(self.vertices, dtype=float)
        n = len(v)
        dmin = np.full(len(pts), np.inf)
        inside = np.ones(len(pts), dtype=bool)
        for k in range(n):
            a, b = v[k], v[(k + 1) % n]
            dmin = np.minimum(dmin, _segment_distance(pts, a, b))
            cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
            inside &= cross >= 0.0
        return np.where(inside, -dmin, dmin)

    def bounding_box(self):
        v = np.asarray(self.vertices, dtype=float)
        return v.min(axis=0), v.max(axis=0)


@dataclass(frozen=True)
class HalfPlane(ImplicitRegion):
    """Half-plane; the unit normal points outward (toward positive distance)."""

    point: tuple[float, float]
    normal: tuple[float, float]

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.hypot(n[0], n[1])
        if norm < 1e-300:
            raise GeometryError("half-plane normal must be nonzero")
        object.__setattr__(self, "normal", (n[0] / norm, n[1] / norm))

    def distance(self, pts):
        p0 = np.asarray(self.point, float)
        n = np.asarray(self.normal, float)
        return (pts - p0) @ n

    def bounding_box(self):
        return None


def _boolean_children(children):
    kids = tuple(children)
    if len(kids) < 2:
        raise GeometryError("boolean region needs at least two children")
    for c in kids:
        if not isinstance(c, ImplicitRegion):
            raise GeometryError(f"boolean child is not a region: {c!r}")
    return kids


@dataclass(frozen=True)
class Union(ImplicitRegion):
    children: tuple[ImplicitRegion, ...]

    def __post_init__(self):
        object.__setattr__(self, "children", _boolean_children(self.children))

    def distance(self, pts):
        d = self.children[0].distance(pts)
        for c in self.children[1:]:
            d = np.minimum(d, c.distance(pts))
        return d

    def bounding_box(self):
        boxes = [c.bounding_box() for c in self.children]
        if any(b is None for b in boxes):
            return None
        lo = np.min([b[0] for b in boxes], axis=0)
        hi = np.max([b[1] for b in boxes], axis=0)
        return lo, hi


@dataclass(frozen=True)
class Intersection(ImplicitRegion):
    children: tuple[ImplicitRegion, ...]

    def __post_init__(self):
        object.__setattr__(self, "children", _boolean_children(self.children))

    def distance(self, pts):
        d = self.children[0].distance(pts)
        for c in self.children[1:]:
            d = np.maximum(d, c.distance(pts))
        return d

    def bounding_box(self):
        boxes = [b for b in (c.bounding_box() for c in self.children) if b is not None]
        if not boxes:
            return None
        lo = np.max([b[0] for b in boxes], axis=0)
        hi = np.min([b[1] for b in boxes], axis=0)
        return lo, hi


@dataclass(frozen=True)
class Difference(ImplicitRegion):
    """First child minus the union of the rest."""

    children: tuple[ImplicitRegion, ...]

    def __post_init__(self):
        object.__setattr__(self, "children", _boolean_children(self.children))

    def distance(self, pts):
        d = self.children[0].distance(pts)
        for c in self.children[1:]:
            d = np.maximum(d, -c.distance(pts))
        return d

    def bounding_box(self):
        return self.children[0].bounding_box()


# ---------------------------------------------------------------------------
# Point queries
# ---------------------------------------------------------------------------


class PointClass(Enum):
    INSIDE = "inside"
    ON_BOUNDARY = "on_boundary"
    OUTSIDE = "outside"


def sdf_eval(region: ImplicitRegion, p):
    """Signed distance of one point (scalar) or an (n, 2) array (vector)."""
    if not isinstance(region, ImplicitRegion):
        raise GeometryError(f"not a region: {region!r}")
    pts, single = _points(p)
    d = region.distance(pts)
    if not np.all(np.isfinite(d)):
        raise GeometryError("signed distance evaluated to a non-finite value")
    return float(d[0]) if single else d


def sdf_gradient(region: ImplicitRegion, p, step: float) -> np.ndarray:
    """Unit gradient of the SDF by central finite differences."""
    if not step > 0:
        raise GeometryError(f"gradient step must be > 0, got {step}")
    p = np.asarray(p, dtype=float)
    stencil = np.array(
        [[step, 0.0], [-step, 0.0], [0.0, step], [0.0, -step]]
    )
    d = region.distance(p[None, :] + stencil)
    g = np.array([d[0] - d[1], d[2] - d[3]]) / (2.0 * step)
    norm = np.hypot(g[0], g[1])
    if norm < 1e-12:
        raise DegenerateGradientError(
            f"SDF gradient is degenerate at {tuple(p)} (|grad| = {norm:.3e})"
        )
    return g / norm


def classify_point(d: float, tol: float) -> PointClass:
    """Classify a signed distance against an on-boundary tolerance."""
    if not tol > 0:
        raise GeometryError(f"classification tolerance must be > 0, got {tol}")
    if abs(d) <= tol:
        return PointClass.ON_BOUNDARY
    return PointClass.INSIDE if d < 0 else PointClass.OUTSIDE


def intersect_edge(p0, p1, region: ImplicitRegion, max_iter: int = 200) -> np.ndarray:
    """Boundary crossing on the segment p0-p1, located by bisection.

    The endpoint distances must have strictly opposite signs. The returned
    point x satisfies |sdf(x)| < 1e-10 * |p1 - p0|.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d0 = sdf_eval(region, p0)
    d1 = sdf_eval(region, p1)
    if d0 == 0.0 or d1 == 0.0 or (d0 > 0) == (d1 > 0):
        raise GeometryError(
            f"intersect_edge endpoints must straddle the boundary (d0={d0:.3e}, d1={d1:.3e})"
        )
    seg_len = float(np.hypot(*(p1 - p0)))
    tol = 1e-10 * seg_len
    ta, tb, da = 0.0, 1.0, d0
    x = p0
    for _ in range(max_iter):
        tm = 0.5 * (ta + tb)
        x = p0 + tm * (p1 - p0)
        dm = sdf_eval(region, x)
        if abs(dm) < tol:
            return x
        if (dm > 0) == (da > 0):
            ta, da = tm, dm
        else:
            tb = tm
    raise GeometryError(
        f"intersect_edge did not converge in {max_iter} iterations (|d| = {abs(dm):.3e})"
    )


def project_to_boundary(
    p,
    region: ImplicitRegion,
    *,
    tol: float,
    grad_step: float,
    max_iter: int = 100,
) -> np.ndarray:
    """Move a point onto the boundary along the SDF gradient.

    Iterates x <- x - sdf(x) * grad(x) until |sdf| < tol.
    """
    x = np.asarray(p, dtype=float).copy()
    for _ in range(max_iter):
        d = sdf_eval(region, x)
        if abs(d) < tol:
            return x
        g = sdf_gradient(region, x, grad_step)
        x = x - d * g
    raise ProjectionError(
        f"projection from {tuple(np.asarray(p, float))} did not reach |sdf| < {tol:.3e} "
        f"in {max_iter} iterations"
    )


# ---------------------------------------------------------------------------
# Curves (seed placement and boundary selectors)
# ---------------------------------------------------------------------------


class Curve:
    """A parametrisable curve used to lay out seed points."""

    closed: bool = False

    def length(self) -> float:
        raise NotImplementedError

    def point_at(self, s: float) -> np.ndarray:
        """Point at arc length s from the curve start."""
        raise NotImplementedError

    def distance(self, pts: np.ndarray) -> np.ndarray:
        """Unsigned distance from points to the curve."""
        raise NotImplementedError


@dataclass(frozen=True)
class CircleCurve(Curve):
    center: tuple[float, float]
    radius: float
    closed = True

    def length(self):
        return 2.0 * math.pi * self.radius

    def point_at(self, s):
        a = s / self.radius
        c = np.asarray(self.center, float)
        return c + self.radius * np.array([math.cos(a), math.sin(a)])

    def distance(self, pts):
        c = np.asarray(self.center, float)
        return np.abs(np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]) - self.radius)


@dataclass(frozen=True)
class RectanglePerimeter(Curve):
    """Rectangle outline, parametrised counterclockwise from the min corner."""

    lo: tuple[float, float]
    hi: tuple[float, float]
    closed = True

    def _corners(self):
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        return np.array([lo, [hi[0], lo[1]], hi, [lo[0], hi[1]]])

    def length(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        return 2.0 * float(np.sum(hi - lo))

    def point_at(self, s):
        corners = self._corners()
        for k in range(4):
            a, b = corners[k], corners[(k + 1) % 4]
            seg = float(np.hypot(*(b - a)))
            if s <= seg or k == 3:
                return a + (b - a) * min(s / seg, 1.0)
            s -= seg
        raise AssertionError("unreachable")

    def distance(self, pts):
        corners = self._corners()
        d = np.full(len(pts), np.inf)
        for k in range(4):
            d = np.minimum(d, _segment_distance(pts, corners[k], corners[(k + 1) % 4]))
        return d


@dataclass(frozen=True)
class Segment(Curve):
    a: tuple[float, float]
    b: tuple[float, float]
    closed = False

    def length(self):
        a, b = np.asarray(self.a, float), np.asarray(self.b, float)
        return float(np.hypot(*(b - a)))

    def point_at(self, s):
        a, b = np.asarray(self.a, float), np.asarray(self.b, float)
        return a + (b - a) * (s / self.length())

    def distance(self, pts):
        return _segment_distance(pts, np.asarray(self.a, float), np.asarray(self.b, float))


@dataclass(frozen=True)
class Polyline(Curve):
    points: tuple[tuple[float, float], ...]
    closed = False

    def __post_init__(self):
        p = np.asarray(self.points, float)
        if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] != 2:
            raise GeometryError("polyline needs at least two (x, y) points")

    def _segments(self):
        p = np.asarray(self.points, float)
        return p[:-1], p[1:]

    def length(self):
        a, b = self._segments()
        return float(np.sum(np.hypot(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1])))

    def point_at(self, s):
        a, b = self._segments()
        lens = np.hypot(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1])
        for k in range(len(lens)):
            if s <= lens[k] or k == len(lens) - 1:
                return a[k] + (b[k] - a[k]) * min(s / lens[k], 1.0)
            s -= lens[k]
        raise AssertionError("unreachable")

    def distance(self, pts):
        a, b = self._segments()
        d = np.full(len(pts), np.inf)
        for k in range(len(a)):
            d = np.minimum(d, _segment_distance(pts, a[k], b[k]))
        return d


def _segment_distance(pts, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(pts[:, 0] - a[0], pts[:, 1] - a[1])
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1])


def _signed_area2(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(a0, a1, b0, b1) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    d1 = orient(b0, b1, a0)
    d2 = orient(b0, b1, a1)
    d3 = orient(a0, a1, b0)
    d4 = orient(a0, a1, b1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


# ---------------------------------------------------------------------------
# Cracks
# ---------------------------------------------------------------------------


@dataclass
class CrackPath:
    """A crack as a simple polyline with per-endpoint tip flags.

    ``tip_flags[0]`` refers to ``points[0]``, ``tip_flags[1]`` to
    ``points[-1]``. Non-tip endpoints are crack mouths and may lie outside
    the domain (e.g. inside a subtracted hole) so that crossings with cell
    outlines are transversal.
    """

    points: np.ndarray
    tip_flags: tuple[bool, bool]
    tip_radius: float
    tip_seeds: int = 12
    path_seeds: int = 16

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[0] < 2 or self.points.shape[1] != 2:
            raise GeometryError("crack path needs at least two (x, y) points")
        if not any(self.tip_flags):
            raise GeometryError("crack path needs at least one tip endpoint")
        if not self.tip_radius > 0:
            raise GeometryError(f"tip-control radius must be > 0, got {self.tip_radius}")
        p = self.points
        n = len(p) - 1
        for i in range(n):
            for j in range(i + 2, n):
                if _segments_intersect(p[i], p[i + 1], p[j], p[j + 1]):
                    raise GeometryError("crack polyline is self-intersecting")
        segs = p[1:] - p[:-1]
        self._seg_len = np.hypot(segs[:, 0], segs[:, 1])
        if np.any(self._seg_len == 0.0):
            raise GeometryError("crack polyline has a zero-length segment")
        self._cum = np.concatenate(([0.0], np.cumsum(self._seg_len)))

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def tips(self) -> list[tuple[int, np.ndarray, np.ndarray]]:
        """(endpoint index, tip point, unit direction ahead of the tip)."""
        out = []
        if self.tip_flags[0]:
            d = self.points[0] - self.points[1]
            out.append((0, self.points[0].copy(), d / np.hypot(*d)))
        if self.tip_flags[1]:
            d = self.points[-1] - self.points[-2]
            out.append((1, self.points[-1].copy(), d / np.hypot(*d)))
        return out

    def point_at(self, t: float) -> np.ndarray:
        """Point at arc-length parameter t in [0, length]."""
        k = int(np.searchsorted(self._cum[1:-1], t, side="right"))
        local = (t - self._cum[k]) / self._seg_len[k]
        return self.points[k] + local * (self.points[k + 1] - self.points[k])

    def project(self, p) -> tuple[float, float]:
        """(arc-length parameter of the closest path point, signed distance).

        The sign is positive on the left of the path direction.
        """
        p = np.asarray(p, dtype=float)
        best = (math.inf, 0.0, 0.0)
        for k in range(len(self.points) - 1):
            a = self.points[k]
            b = self.points[k + 1]
            ab = b - a
            t = float(np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0))
            q = a + t * ab
            dist = float(np.hypot(*(p - q)))
            if dist < best[0] - 1e-15:
                cross = ab[0] * (p[1] - a[1]) - ab[1] * (p[0] - a[0])
                side = math.copysign(1.0, cross) if cross != 0.0 else 0.0
                best = (dist, self._cum[k] + t * self._seg_len[k], side)
        return best[1], best[0] * (best[2] if best[2] != 0.0 else 1.0)

    def side_of(self, p) -> float:
        """Signed distance to the path; positive left of the path direction."""
        return self.project(p)[1]


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------


@dataclass
class SeedCloud:
    """Seed points with a provenance tag per point."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    tags: list[str] = field(default_factory=list)

    def add(self, pts: np.ndarray, tag: str):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        self.points = np.vstack([self.points, pts]) if len(self.points) else pts.copy()
        self.tags.extend([tag] * len(pts))

    def __len__(self):
        return len(self.points)


def _curve_seeds(curve: Curve, count: int) -> np.ndarray:
    total = curve.length()
    if total <= 0.0:
        raise GeometryError("cannot seed a zero-length curve")
    if curve.closed:
        if count < 4:
            raise GeometryError(f"closed boundaries need at least 4 seeds, got {count}")
        ss = [total * k / count for k in range(count)]
    else:
        if count < 2:
            raise GeometryError(f"open curves need at least 2 seeds, got {count}")
        ss = [total * k / (count - 1) for k in range(count)]
    return np.array([curve.point_at(s) for s in ss])


def generate_seeds(
    boundaries: Sequence[tuple[Curve, int]],
    roi: Sequence[tuple[Curve, int]] = (),
    cracks: Sequence[CrackPath] = (),
) -> SeedCloud:
    """Lay out seed points equally spaced by arc length along each curve.

    Closed curves start at parameter 0 and omit the duplicate closing point;
    open curves include both endpoints. Cracks contribute seeds along the
    polyline plus a ring of seeds on each tip-control circle.
    """
    cloud = SeedCloud()
    for curve, count in boundaries:
        cloud.add(_curve_seeds(curve, count), "boundary")
    for curve, count in roi:
        cloud.add(_curve_seeds(curve, count), "roi")
    for crack in cracks:
        path_pts = _curve_seeds(Polyline(tuple(map(tuple, crack.points))), crack.path_seeds)
        tips = crack.tips()
        # tip-control circles own the region around each tip; path seeds there
        # would force needless refinement next to the ring seeds
        keep = np.ones(len(path_pts), dtype=bool)
        for _, tip, _ in tips:
            keep &= np.hypot(path_pts[:, 0] - tip[0], path_pts[:, 1] - tip[1]) >= (
                1.5 * crack.tip_radius
            )
        if np.any(keep):
            cloud.add(path_pts[keep], "crack")
        for _, tip, _ in tips:
            angles = 2.0 * math.pi * np.arange(crack.tip_seeds) / crack.tip_seeds
            ring = tip[None, :] + crack.tip_radius * np.column_stack(
                [np.cos(angles), np.sin(angles)]
            )
            cloud.add(ring, "tip")
    return cloud
