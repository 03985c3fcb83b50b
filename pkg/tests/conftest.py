"""Shared builders for the test suite.

The standard benchmark cases (plate with a circular hole under exact or
uniform tension, hole with two symmetric cracks, crossing cracks) are built
here once so unit tests and the acceptance suite drive identical setups.
"""

import json
import math

import numpy as np
import pytest

from qtsbfem import analysis
from qtsbfem.sbfem import MaterialModel, cell_from_chain


def standard_material():
    return MaterialModel(E=100.0, nu=0.3, mode="plane_stress")


def unit_square_cell(p=1, elems_per_side=1):
    """Closed unit-square cell with its scaling centre at the centroid."""
    pts = []
    for corner, nxt in (((0, 0), (1, 0)), ((1, 0), (1, 1)), ((1, 1), (0, 1)), ((0, 1), (0, 0))):
        a, b = np.array(corner, float), np.array(nxt, float)
        for k in range(elems_per_side):
            pts.append(a + (b - a) * k / elems_per_side)
    return cell_from_chain([0.5, 0.5], pts, orders=p, closed=True)


def open_square_crack_cell(p=2, n_per_side=4, half=1.0):
    """Open square cell with the crack along the -x axis and the tip at the
    origin: the standard configuration with a 1/sqrt(r) stress singularity."""
    pts = []
    for t in np.linspace(0, 1, n_per_side // 2, endpoint=False):
        pts.append([-half, -t * half])
    for t in np.linspace(0, 1, n_per_side, endpoint=False):
        pts.append([-half + 2 * half * t, -half])
    for t in np.linspace(0, 1, n_per_side, endpoint=False):
        pts.append([half, -half + 2 * half * t])
    for t in np.linspace(0, 1, n_per_side, endpoint=False):
        pts.append([half - 2 * half * t, half])
    for t in np.linspace(0, 1, n_per_side // 2 + 1, endpoint=True):
        pts.append([-half, half - t * half])
    return cell_from_chain([0.0, 0.0], np.array(pts), orders=p, closed=False)


def random_star_polygon_cell(rng, p=None):
    """Random star-convex polygon cell (boundary visible from the centroid)."""
    n = rng.integers(3, 9)
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    if np.min(np.diff(angles, append=angles[0] + 2 * math.pi)) < 0.15:
        angles = np.linspace(0, 2 * math.pi, n, endpoint=False)
    radii = rng.uniform(0.5, 1.5, size=n)
    centre = rng.uniform(-2, 2, size=2)
    pts = centre + np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    order = int(rng.integers(1, 4)) if p is None else p
    return cell_from_chain(centre, pts, orders=order, closed=True)


# ---------------------------------------------------------------------------
# Standard configuration documents
# ---------------------------------------------------------------------------

HOLE_L = 10.0
HOLE_A = 1.0


def plate_hole_exact_config(order=4, hole_seeds=64, outer_seeds=16):
    """Square plate with a central hole, loaded by the exact infinite-plate
    boundary tractions; rigid modes pinned to the exact displacements."""
    L, a = HOLE_L, HOLE_A
    mat = standard_material()
    _, uL = analysis.analytic_hole_solution(L / 2, math.pi, a, mat, 1.0)
    _, uR = analysis.analytic_hole_solution(L / 2, 0.0, a, mat, 1.0)
    b = 1e-9
    eps = 1e-6
    tr = {"traction": {"hole_field": {"a": a, "sigma": 1.0}}}
    return {
        "schema": 1,
        "material": {"E": 100.0, "nu": 0.3, "mode": "plane_stress"},
        "geometry": {"difference": [
            {"rectangle": {"lo": [-L / 2, -L / 2], "hi": [L / 2, L / 2]}},
            {"circle": {"center": [0.0, 0.0], "radius": a}}]},
        "mesh": {"order": order,
                 "boundary_seeds": [
                     {"curve": {"rectangle": {"lo": [-L / 2, -L / 2], "hi": [L / 2, L / 2]}},
                      "count": outer_seeds},
                     {"curve": {"circle": {"center": [0, 0], "radius": a}},
                      "count": hole_seeds}]},
        "boundary_conditions": [
            {"select": {"box": [[-L / 2 - b, L / 2 - b], [L / 2 + b, L / 2 + b]]}, **tr},
            {"select": {"box": [[-L / 2 - b, -L / 2 - b], [L / 2 + b, -L / 2 + b]]}, **tr},
            {"select": {"box": [[L / 2 - b, -L / 2 - b], [L / 2 + b, L / 2 + b]]}, **tr},
            {"select": {"box": [[-L / 2 - b, -L / 2 - b], [-L / 2 + b, L / 2 + b]]}, **tr},
            {"select": {"box": [[-L / 2 - eps, -eps], [-L / 2 + eps, eps]]},
             "fix": {"ux": float(uL[0]), "uy": float(uL[1])}},
            {"select": {"box": [[L / 2 - eps, -eps], [L / 2 + eps, eps]]},
             "fix": {"uy": float(uR[1])}}],
        "outputs": {"fields": False, "sifs": False},
        "reference": {"hole_exact": {"a": a, "sigma": 1.0}},
    }


def plate_hole_tension_config(L_over_a, order=4, hole_seeds=64, outer_seeds=16):
    """Square plate with a central unit hole, uniform tension on the left and
    right edges only."""
    L, a = float(L_over_a), 1.0
    b = 1e-9 * L
    eps = 1e-6
    return {
        "schema": 1,
        "material": {"E": 100.0, "nu": 0.3, "mode": "plane_stress"},
        "geometry": {"difference": [
            {"rectangle": {"lo": [-L / 2, -L / 2], "hi": [L / 2, L / 2]}},
            {"circle": {"center": [0.0, 0.0], "radius": a}}]},
        "mesh": {"order": order,
                 "boundary_seeds": [
                     {"curve": {"rectangle": {"lo": [-L / 2, -L / 2], "hi": [L / 2, L / 2]}},
                      "count": outer_seeds},
                     {"curve": {"circle": {"center": [0, 0], "radius": a}},
                      "count": hole_seeds}]},
        "boundary_conditions": [
            {"select": {"box": [[L / 2 - b, -L / 2 - b], [L / 2 + b, L / 2 + b]]},
             "traction": {"vector": [1.0, 0.0]}},
            {"select": {"box": [[-L / 2 - b, -L / 2 - b], [-L / 2 + b, L / 2 + b]]},
             "traction": {"vector": [-1.0, 0.0]}},
            {"select": {"box": [[-L / 2 - eps, -eps], [-L / 2 + eps, eps]]},
             "fix": {"ux": 0.0, "uy": 0.0}},
            {"select": {"box": [[L / 2 - eps, -eps], [L / 2 + eps, eps]]},
             "fix": {"uy": 0.0}}],
        "outputs": {"fields": False, "sifs": False},
    }


def hole_two_cracks_config(s, order=4, hole_seeds=32, tip_seeds=12):
    """Plate with a tiny central hole (hole radius = 0.01 of the plate
    half-width) and two symmetric horizontal cracks, tension perpendicular
    to the cracks."""
    W = 2.0
    r = 0.01 * (W / 2.0)
    a = s * r / (1.0 - s)
    c = W / 2.0
    b = 1e-9
    eps = 1e-6
    return {
        "schema": 1,
        "material": {"E": 100.0, "nu": 0.3, "mode": "plane_stress"},
        "geometry": {"difference": [
            {"rectangle": {"lo": [0.0, 0.0], "hi": [W, W]}},
            {"circle": {"center": [c, c], "radius": r}}]},
        "cracks": [
            {"points": [[c, c], [c + r + a, c]], "tips": [False, True],
             "tip_radius": 0.4 * a, "tip_seeds": tip_seeds, "path_seeds": 10},
            {"points": [[c, c], [c - r - a, c]], "tips": [False, True],
             "tip_radius": 0.4 * a, "tip_seeds": tip_seeds, "path_seeds": 10}],
        "mesh": {"order": order,
                 "boundary_seeds": [
                     {"curve": {"rectangle": {"lo": [0.0, 0.0], "hi": [W, W]}}, "count": 16},
                     {"curve": {"circle": {"center": [c, c], "radius": r}},
                      "count": hole_seeds}]},
        "boundary_conditions": [
            {"select": {"box": [[-b, W - b], [W + b, W + b]]},
             "traction": {"vector": [0.0, 1.0]}},
            {"select": {"box": [[-b, -b], [W + b, b]]},
             "traction": {"vector": [0.0, -1.0]}},
            {"select": {"box": [[-eps, -eps], [eps, eps]]},
             "fix": {"ux": 0.0, "uy": 0.0}},
            {"select": {"box": [[W - eps, -eps], [W + eps, eps]]},
             "fix": {"uy": 0.0}}],
        "outputs": {"fields": False, "sifs": True},
    }


def hole_two_cracks_geometry(s):
    """(half-width scale, hole radius, crack length) of the two-crack case."""
    W = 2.0
    r = 0.01 * (W / 2.0)
    return W, r, s * r / (1.0 - s)


def cross_cracks_config(order):
    """Square plate with two crossing interior cracks, fixed bottom edge and
    uniform tension on the top edge."""
    L = 2.0
    b = 1e-9
    return {
        "schema": 1,
        "material": {"E": 100.0, "nu": 0.3, "mode": "plane_stress"},
        "geometry": {"rectangle": {"lo": [0, 0], "hi": [L, L]}},
        "cracks": [
            {"points": [[0.5, 1.0], [1.5, 1.0]], "tips": [True, True],
             "tip_radius": 0.08, "tip_seeds": 12, "path_seeds": 14},
            {"points": [[0.8, 0.7], [1.3, 1.4]], "tips": [True, True],
             "tip_radius": 0.08, "tip_seeds": 12, "path_seeds": 10}],
        "mesh": {"order": order,
                 "boundary_seeds": [
                     {"curve": {"rectangle": {"lo": [0, 0], "hi": [L, L]}}, "count": 16}]},
        "boundary_conditions": [
            {"select": {"box": [[-b, -b], [L + b, b]]}, "fix": {"ux": 0.0, "uy": 0.0}},
            {"select": {"box": [[-b, L - b], [L + b, L + b]]},
             "traction": {"vector": [0.0, 1.0]}}],
        "outputs": {"fields": False, "sifs": True},
    }


def griffith_config(order=3, L=40.0, a=1.0):
    """Large plate with a central horizontal crack of half-length a under
    remote tension perpendicular to the crack."""
    b = 1e-9 * L
    eps = 1e-6
    return {
        "schema": 1,
        "material": {"E": 100.0, "nu": 0.3, "mode": "plane_stress"},
        "geometry": {"rectangle": {"lo": [0, 0], "hi": [L, L]}},
        "cracks": [
            {"points": [[L / 2 - a, L / 2], [L / 2 + a, L / 2]], "tips": [True, True],
             "tip_radius": 0.35 * a, "tip_seeds": 12, "path_seeds": 12}],
        "mesh": {"order": order,
                 "boundary_seeds": [
                     {"curve": {"rectangle": {"lo": [0, 0], "hi": [L, L]}}, "count": 16}]},
        "boundary_conditions": [
            {"select": {"box": [[-b, L - b], [L + b, L + b]]},
             "traction": {"vector": [0.0, 1.0]}},
            {"select": {"box": [[-b, -b], [L + b, b]]},
             "traction": {"vector": [0.0, -1.0]}},
            {"select": {"box": [[-eps, -eps], [eps, eps]]},
             "fix": {"ux": 0.0, "uy": 0.0}},
            {"select": {"box": [[L - eps, -eps], [L + eps, eps]]},
             "fix": {"uy": 0.0}}],
        "outputs": {"fields": False, "sifs": True},
    }


def parse(cfg: dict) -> analysis.AnalysisCase:
    return analysis.parse_config(json.dumps(cfg))


@pytest.fixture(scope="session")
def material():
    return standard_material()


@pytest.fixture(scope="session")
def griffith_result():
    case = parse(griffith_config())
    return analysis.run_pipeline(case)
