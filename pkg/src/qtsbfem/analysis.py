"""Analysis configuration, pipeline orchestration, reference solutions,
convergence studies and result export.

Configurations are JSON documents (schema version 1, documented in the
README): geometry as a nested CSG expression over signed-distance
primitives, seed counts per boundary curve, cracks, material, boundary
conditions and output requests. Parsing validates the whole document and
reports every error found, not just the first.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qtsbfem import assembly as asm
from qtsbfem import geometry as geo
from qtsbfem import mesher
from qtsbfem.sbfem import MaterialModel

__all__ = [
    "ConfigError",
    "PipelineError",
    "AnalysisCase",
    "parse_config",
    "analytic_hole_solution",
    "run_pipeline",
    "RunReport",
    "convergence_driver",
    "crack_opening",
    "l2_displacement_error",
    "export_results",
]


class ConfigError(ValueError):
    """Invalid configuration; carries the full list of validation errors."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


# ---------------------------------------------------------------------------
# Configuration parsing
# ---------------------------------------------------------------------------


class _Validator:
    def __init__(self):
        self.errors: list[str] = []

    def fail(self, path: str, message: str):
        self.errors.append(f"{path}: {message}")

    def expect(self, obj, path: str, kind, message: str | None = None):
        if not isinstance(obj, kind):
            self.fail(path, message or f"expected {getattr(kind, '__name__', kind)}")
            return False
        return True

    def number(self, obj, path: str, lo=None, hi=None):
        if not isinstance(obj, (int, float)) or isinstance(obj, bool):
            self.fail(path, "expected a number")
            return None
        if lo is not None and obj < lo:
            self.fail(path, f"must be >= {lo}")
            return None
        if hi is not None and obj > hi:
            self.fail(path, f"must be <= {hi}")
            return None
        return float(obj)

    def point(self, obj, path: str):
        if (
            not isinstance(obj, (list, tuple))
            or len(obj) != 2
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj)
        ):
            self.fail(path, "expected an [x, y] pair")
            return None
        return (float(obj[0]), float(obj[1]))


_REGION_KEYS = ("circle", "rectangle", "polygon", "half_plane", "union", "intersection", "difference")


def _parse_region(obj, path: str, v: _Validator):
    if not v.expect(obj, path, dict, "expected a geometry object"):
        return None
    keys = [k for k in obj if k in _REGION_KEYS]
    if len(keys) != 1:
        v.fail(path, f"expected exactly one of {_REGION_KEYS}")
        return None
    kind = keys[0]
    body = obj[kind]
    try:
        if kind == "circle":
            c = v.point(body.get("center"), f"{path}.circle.center")
            r = v.number(body.get("radius"), f"{path}.circle.radius", lo=0.0)
            return geo.Circle(c, r) if c and r else None
        if kind == "rectangle":
            lo = v.point(body.get("lo"), f"{path}.rectangle.lo")
            hi = v.point(body.get("hi"), f"{path}.rectangle.hi")
            return geo.Rectangle(lo, hi) if lo and hi else None
        if kind == "polygon":
            verts = body.get("vertices")
            if not isinstance(verts, list) or len(verts) < 3:
                v.fail(f"{path}.polygon.vertices", "expected >= 3 vertices")
                return None
            pts = [v.point(p, f"{path}.polygon.vertices[{i}]") for i, p in enumerate(verts)]
            if any(p is None for p in pts):
                return None
            return geo.ConvexPolygon(tuple(pts))
        if kind == "half_plane":
            p0 = v.point(body.get("point"), f"{path}.half_plane.point")
            n = v.point(body.get("normal"), f"{path}.half_plane.normal")
            return geo.HalfPlane(p0, n) if p0 and n else None
        if not isinstance(body, list) or len(body) < 2:
            v.fail(f"{path}.{kind}", "expected a list of at least two child regions")
            return None
        kids = [_parse_region(k, f"{path}.{kind}[{i}]", v) for i, k in enumerate(body)]
        if any(k is None for k in kids):
            return None
        cls = {"union": geo.Union, "intersection": geo.Intersection, "difference": geo.Difference}[kind]
        return cls(tuple(kids))
    except geo.GeometryError as exc:
        v.fail(path, str(exc))
        return None


def _parse_curve(obj, path: str, v: _Validator):
    if not v.expect(obj, path, dict, "expected a curve object"):
        return None
    try:
        if "circle" in obj:
            c = v.point(obj["circle"].get("center"), f"{path}.circle.center")
            r = v.number(obj["circle"].get("radius"), f"{path}.circle.radius", lo=0.0)
            return geo.CircleCurve(c, r) if c and r else None
        if "rectangle" in obj:
            lo = v.point(obj["rectangle"].get("lo"), f"{path}.rectangle.lo")
            hi = v.point(obj["rectangle"].get("hi"), f"{path}.rectangle.hi")
            return geo.RectanglePerimeter(lo, hi) if lo and hi else None
        if "segment" in obj:
            a = v.point(obj["segment"].get("a"), f"{path}.segment.a")
            b = v.point(obj["segment"].get("b"), f"{path}.segment.b")
            return geo.Segment(a, b) if a and b else None
        if "polyline" in obj:
            pts = obj["polyline"].get("points")
            if not isinstance(pts, list) or len(pts) < 2:
                v.fail(f"{path}.polyline.points", "expected >= 2 points")
                return None
            coords = [v.point(p, f"{path}.polyline.points[{i}]") for i, p in enumerate(pts)]
            if any(c is None for c in coords):
                return None
            return geo.Polyline(tuple(coords))
    except geo.GeometryError as exc:
        v.fail(path, str(exc))
        return None
    v.fail(path, "expected one of circle/rectangle/segment/polyline")
    return None


def _parse_selector(obj, path: str, v: _Validator):
    if not v.expect(obj, path, dict, "expected a selector object"):
        return None
    if "box" in obj:
        box = obj["box"]
        if not isinstance(box, list) or len(box) != 2:
            v.fail(f"{path}.box", "expected [[x0, y0], [x1, y1]]")
            return None
        lo = v.point(box[0], f"{path}.box[0]")
        hi = v.point(box[1], f"{path}.box[1]")
        return asm.BoxSelector(lo, hi) if lo and hi else None
    if "near" in obj:
        curve = _parse_curve(obj["near"].get("curve"), f"{path}.near.curve", v)
        tol = v.number(obj["near"].get("tol"), f"{path}.near.tol", lo=0.0)
        return asm.NearCurveSelector(curve, tol) if curve and tol is not None else None
    v.fail(path, "expected a 'box' or 'near' selector")
    return None


def _parse_traction(obj, path: str, v: _Validator, material: MaterialModel | None):
    if "vector" in obj:
        t = v.point(obj["vector"], f"{path}.vector")
        return ("vector", np.asarray(t)) if t else None
    if "pressure" in obj:
        p = v.number(obj["pressure"], f"{path}.pressure")
        return ("pressure", p) if p is not None else None
    if "hole_field" in obj:
        body = obj["hole_field"]
        a = v.number(body.get("a"), f"{path}.hole_field.a", lo=0.0)
        sigma = v.number(body.get("sigma", 1.0), f"{path}.hole_field.sigma")
        centre = v.point(body.get("center", [0.0, 0.0]), f"{path}.hole_field.center")
        if a is None or sigma is None or centre is None:
            return None

        def fn(x, n, a=a, sigma=sigma, centre=np.asarray(centre)):
            rel = np.asarray(x) - centre
            r = math.hypot(rel[0], rel[1])
            th = math.atan2(rel[1], rel[0])
            sig, _ = analytic_hole_solution(r, th, a, _HOLE_FIELD_MATERIAL, sigma)
            return np.array(
                [sig[0] * n[0] + sig[2] * n[1], sig[2] * n[0] + sig[1] * n[1]]
            )

        return ("field", fn)
    v.fail(path, "expected one of vector/pressure/hole_field")
    return None


# material placeholder: the hole-field tractions depend on stresses only
_HOLE_FIELD_MATERIAL = MaterialModel(E=1.0, nu=0.3)


@dataclass
class PathRequest:
    name: str
    start: np.ndarray
    end: np.ndarray
    count: int
    polar_origin: np.ndarray | None = None


@dataclass
class AnalysisCase:
    """Validated analysis definition: geometry, seeds, material, BCs, outputs."""

    region: geo.ImplicitRegion
    cracks: list[geo.CrackPath]
    boundary_seeds: list[tuple[geo.Curve, int]]
    roi_seeds: list[tuple[geo.Curve, int]]
    material: MaterialModel
    options: mesher.MeshingOptions
    bcs: list[asm.BoundaryCondition]
    paths: list[PathRequest] = field(default_factory=list)
    want_fields: bool = True
    want_sifs: bool = True
    reference: dict | None = None
    raw: dict = field(default_factory=dict)

    def seed_cloud(self) -> geo.SeedCloud:
        return geo.generate_seeds(self.boundary_seeds, self.roi_seeds, self.cracks)


def parse_config(text: str) -> AnalysisCase:
    """Parse and validate a JSON configuration document.

    Raises ConfigError carrying the full list of problems on any failure.
    """
    v = _Validator()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"$: not valid JSON ({exc})"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError(["$: expected a JSON object"])
    if doc.get("schema") != 1:
        v.fail("$.schema", "expected schema version 1")

    mat = None
    mbody = doc.get("material")
    if not isinstance(mbody, dict):
        v.fail("$.material", "required object")
    else:
        E = v.number(mbody.get("E"), "$.material.E", lo=1e-300)
        nu = v.number(mbody.get("nu"), "$.material.nu")
        mode = mbody.get("mode", "plane_stress")
        thick = v.number(mbody.get("thickness", 1.0), "$.material.thickness", lo=1e-300)
        if E is not None and nu is not None and thick is not None:
            try:
                mat = MaterialModel(E=E, nu=nu, mode=mode, thickness=thick)
            except ValueError as exc:
                v.fail("$.material", str(exc))

    region = _parse_region(doc.get("geometry"), "$.geometry", v)
    if region is not None and region.bounding_box() is None:
        v.fail("$.geometry", "region must be bounded")

    cracks = []
    for i, cobj in enumerate(doc.get("cracks", []) or []):
        path = f"$.cracks[{i}]"
        if not v.expect(cobj, path, dict):
            continue
        pts = cobj.get("points")
        tips = cobj.get("tips")
        if not isinstance(pts, list) or len(pts) < 2:
            v.fail(f"{path}.points", "expected >= 2 points")
            continue
        coords = [v.point(p, f"{path}.points[{k}]") for k, p in enumerate(pts)]
        if any(c is None for c in coords):
            continue
        if (
            not isinstance(tips, list)
            or len(tips) != 2
            or not all(isinstance(t, bool) for t in tips)
        ):
            v.fail(f"{path}.tips", "expected [bool, bool] endpoint tip flags")
            continue
        if not any(tips):
            v.fail(f"{path}.tips", "at least one endpoint must be a tip")
            continue
        radius = v.number(cobj.get("tip_radius"), f"{path}.tip_radius", lo=1e-300)
        if radius is None:
            continue
        try:
            cracks.append(
                geo.CrackPath(
                    points=np.array(coords),
                    tip_flags=(tips[0], tips[1]),
                    tip_radius=radius,
                    tip_seeds=int(cobj.get("tip_seeds", 12)),
                    path_seeds=int(cobj.get("path_seeds", 16)),
                )
            )
        except geo.GeometryError as exc:
            v.fail(path, str(exc))

    mesh_body = doc.get("mesh")
    boundary_seeds: list[tuple[geo.Curve, int]] = []
    roi_seeds: list[tuple[geo.Curve, int]] = []
    options = mesher.MeshingOptions()
    if not isinstance(mesh_body, dict):
        v.fail("$.mesh", "required object")
    else:
        order = mesh_body.get("order", 2)
        if not isinstance(order, int) or not 1 <= order <= 8:
            v.fail("$.mesh.order", "element order must be an integer in [1, 8]")
            order = 2
        options = mesher.MeshingOptions(
            s_max=int(mesh_body.get("s_max", 1)),
            d_max=int(mesh_body.get("d_max", 1)),
            max_depth=int(mesh_body.get("max_depth", 20)),
            order=order,
        )
        if options.s_max < 1:
            v.fail("$.mesh.s_max", "must be >= 1")
        if options.d_max < 1:
            v.fail("$.mesh.d_max", "must be >= 1")
        for name, sink in (("boundary_seeds", boundary_seeds), ("roi_seeds", roi_seeds)):
            for i, sobj in enumerate(mesh_body.get(name, []) or []):
                path = f"$.mesh.{name}[{i}]"
                if not v.expect(sobj, path, dict):
                    continue
                curve = _parse_curve(sobj.get("curve"), f"{path}.curve", v)
                count = sobj.get("count")
                if not isinstance(count, int) or count < 2:
                    v.fail(f"{path}.count", "expected an integer >= 2")
                    continue
                if curve is not None:
                    if curve.closed and count < 4:
                        v.fail(f"{path}.count", "closed boundaries need >= 4 seeds")
                        continue
                    sink.append((curve, count))
        if not boundary_seeds and not cracks:
            v.fail("$.mesh.boundary_seeds", "at least one seeded boundary (or a crack) is required")

    bcs: list[asm.BoundaryCondition] = []
    any_dirichlet = False
    for i, bobj in enumerate(doc.get("boundary_conditions", []) or []):
        path = f"$.boundary_conditions[{i}]"
        if not v.expect(bobj, path, dict):
            continue
        sel = _parse_selector(bobj.get("select"), f"{path}.select", v)
        fix = bobj.get("fix")
        trac = bobj.get("traction")
        if (fix is None) == (trac is None):
            v.fail(path, "expected exactly one of 'fix' or 'traction'")
            continue
        if sel is None:
            continue
        if fix is not None:
            if not v.expect(fix, f"{path}.fix", dict):
                continue
            ux = fix.get("ux")
            uy = fix.get("uy")
            if ux is None and uy is None:
                v.fail(f"{path}.fix", "expected at least one of ux/uy")
                continue
            bcs.append(
                asm.BoundaryCondition(
                    selector=sel,
                    fix_x=None if ux is None else float(ux),
                    fix_y=None if uy is None else float(uy),
                )
            )
            any_dirichlet = True
        else:
            t = _parse_traction(trac, f"{path}.traction", v, mat)
            if t is not None:
                bcs.append(asm.BoundaryCondition(selector=sel, traction=t))
    if not any_dirichlet:
        v.fail("$.boundary_conditions", "at least one displacement constraint is required")

    out_body = doc.get("outputs", {}) or {}
    paths = []
    for i, pobj in enumerate(out_body.get("paths", []) or []):
        path = f"$.outputs.paths[{i}]"
        if not v.expect(pobj, path, dict):
            continue
        name = pobj.get("name")
        if not isinstance(name, str) or not name:
            v.fail(f"{path}.name", "expected a nonempty string")
            continue
        a = v.point(pobj.get("from"), f"{path}.from")
        b = v.point(pobj.get("to"), f"{path}.to")
        count = pobj.get("count", 20)
        if not isinstance(count, int) or count < 2:
            v.fail(f"{path}.count", "expected an integer >= 2")
            continue
        origin = None
        if "polar_origin" in pobj:
            origin = v.point(pobj.get("polar_origin"), f"{path}.polar_origin")
        if a and b:
            paths.append(
                PathRequest(
                    name=name,
                    start=np.asarray(a),
                    end=np.asarray(b),
                    count=count,
                    polar_origin=None if origin is None else np.asarray(origin),
                )
            )

    reference = doc.get("reference")
    if reference is not None:
        if not isinstance(reference, dict) or "hole_exact" not in reference:
            v.fail("$.reference", "only {'hole_exact': {...}} references are supported")
            reference = None
        else:
            body = reference["hole_exact"]
            a = v.number(body.get("a"), "$.reference.hole_exact.a", lo=1e-300)
            if a is None:
                reference = None

    if v.errors:
        raise ConfigError(v.errors)
    return AnalysisCase(
        region=region,
        cracks=cracks,
        boundary_seeds=boundary_seeds,
        roi_seeds=roi_seeds,
        material=mat,
        options=options,
        bcs=bcs,
        paths=paths,
        want_fields=bool(out_body.get("fields", True)),
        want_sifs=bool(out_body.get("sifs", True)),
        reference=reference,
        raw=doc,
    )


# ---------------------------------------------------------------------------
# Analytic reference: infinite plate with a circular hole
# ---------------------------------------------------------------------------


def analytic_hole_solution(
    r: float, theta: float, a: float, material: MaterialModel, sigma: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Exact stresses and displacements for an infinite plate with a
    traction-free circular hole of radius a under remote uniaxial tension
    sigma along x.

    Returns ((sigma_xx, sigma_yy, tau_xy), (u_x, u_y)) at the polar point
    (r, theta) about the hole centre. Valid for r >= a (plane stress
    displacements use the Kolosov constant).
    """
    if r < a:
        raise ValueError(f"analytic hole solution requires r >= a (r={r}, a={a})")
    q = a / r
    q2 = q * q
    q4 = q2 * q2
    c2, c4 = math.cos(2 * theta), math.cos(4 * theta)
    s2, s4 = math.sin(2 * theta), math.sin(4 * theta)
    s11 = 1.0 - q2 * (1.5 * c2 + c4) + 1.5 * q4 * c4
    s22 = -q2 * (0.5 * c2 - c4) - 1.5 * q4 * c4
    s12 = -q2 * (0.5 * s2 + s4) + 1.5 * q4 * s4
    mu = material.shear_modulus
    kappa = material.kolosov
    c1, c3 = math.cos(theta), math.cos(3 * theta)
    sn1, sn3 = math.sin(theta), math.sin(3 * theta)
    u1 = (a / (8.0 * mu)) * (
        (r / a) * (kappa + 1.0) * c1
        + (2.0 * a / r) * ((1.0 + kappa) * c1 + c3)
        - (2.0 * a**3 / r**3) * c3
    )
    u2 = (a / (8.0 * mu)) * (
        (r / a) * (kappa - 3.0) * sn1
        + (2.0 * a / r) * ((1.0 - kappa) * sn1 + sn3)
        - (2.0 * a**3 / r**3) * sn3
    )
    return sigma * np.array([s11, s22, s12]), sigma * np.array([u1, u2])


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    cells_total: int = 0
    cells_computed: int = 0
    cells_cached: int = 0
    distinct_master_keys: int = 0
    irregular_cells: int = 0
    nodes: int = 0
    dofs: int = 0
    solver_residual: float = 0.0
    equilibrium_residual: float = 0.0
    stage_seconds: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    sifs: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        body = {
            "cells": {
                "total": self.cells_total,
                "computed": self.cells_computed,
                "cached": self.cells_cached,
                "distinct_master_keys": self.distinct_master_keys,
                "irregular": self.irregular_cells,
            },
            "nodes": self.nodes,
            "dofs": self.dofs,
            "solver_residual": float(f"{self.solver_residual:.9g}"),
            "equilibrium_residual": float(f"{self.equilibrium_residual:.9g}"),
            "stage_seconds": {k: round(v, 4) for k, v in self.stage_seconds.items()},
            "artifacts": self.artifacts,
            "sifs": self.sifs,
        }
        return json.dumps(body, indent=2) + "\n"


@dataclass
class RunResult:
    report: RunReport
    mesh: mesher.Mesh
    system: asm.GlobalSystem | None = None
    solution: asm.Solution | None = None
    sampler: asm.FieldSampler | None = None
    sifs: list[asm.TipResult] = field(default_factory=list)


def run_pipeline(
    case: AnalysisCase,
    out_dir: str | Path | None = None,
    mesh_only: bool = False,
    no_cache: bool = False,
    threads: int = 1,
) -> RunResult:
    """Mesh, assemble, solve and post-process one analysis case.

    Any stage failure removes already-written artifacts and re-raises as a
    stage-tagged PipelineError.
    """
    report = RunReport()
    written: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def emit(name: str, writer) -> None:
        if out is None:
            return
        target = out / name
        with open(target, "w") as fp:
            writer(fp)
        written.append(target)
        report.artifacts.append(name)

    try:
        t0 = time.perf_counter()
        try:
            seeds = case.seed_cloud()
            mesh = mesher.build_mesh(case.region, seeds, case.cracks, case.options)
        except (geo.GeometryError, mesher.MeshingError) as exc:
            raise PipelineError("meshing", str(exc)) from exc
        report.stage_seconds["mesh"] = time.perf_counter() - t0
        report.cells_total = len(mesh.cells)
        report.irregular_cells = sum(1 for c in mesh.cells if c.signature is None)
        report.nodes = mesh.n_nodes
        report.dofs = 2 * mesh.n_nodes
        emit("mesh.qpm", lambda fp: mesher.write_qpmesh(mesh, fp))
        emit("mesh.vtk", lambda fp: mesher.write_vtk_mesh(mesh, fp))
        if mesh_only:
            return RunResult(report=report, mesh=mesh)

        t0 = time.perf_counter()
        try:
            cache = None if no_cache else asm.build_cache(mesh, case.material, threads=threads)
            system = asm.assemble(mesh, case.material, cache, threads=threads)
            constraints: dict[int, float] = {}
            for i, bc in enumerate(case.bcs):
                if bc.is_dirichlet:
                    nodes = asm.select_nodes(mesh, bc.selector)
                    if len(nodes) == 0:
                        raise PipelineError(
                            "validation", f"displacement constraint {i} selects no nodes"
                        )
                    for n in nodes:
                        if bc.fix_x is not None:
                            constraints[2 * int(n)] = bc.fix_x
                        if bc.fix_y is not None:
                            constraints[2 * int(n) + 1] = bc.fix_y
                else:
                    edges = asm.select_boundary_edges(mesh, bc.selector)
                    if not edges:
                        print(f"warning: traction condition {i} selects no edges")
                        continue
                    asm.apply_tractions(system, mesh, edges, bc.traction)
            asm.apply_displacements(system, constraints)
        except PipelineError:
            raise
        except asm.AssemblyError as exc:
            raise PipelineError("assembly", str(exc)) from exc
        report.stage_seconds["assemble"] = time.perf_counter() - t0
        report.cells_computed = system.n_computed
        report.cells_cached = system.n_cached
        report.distinct_master_keys = len(cache) if cache is not None else 0

        t0 = time.perf_counter()
        try:
            solution = asm.solve(system)
        except asm.SolveError as exc:
            raise PipelineError("solving", str(exc)) from exc
        report.stage_seconds["solve"] = time.perf_counter() - t0
        report.solver_residual = solution.residual
        report.equilibrium_residual = solution.equilibrium_residual()

        t0 = time.perf_counter()
        sampler = asm.FieldSampler(mesh, case.material, system, solution)
        sifs = []
        if case.want_sifs and mesh.cracks:
            sifs = asm.extract_sifs(mesh, case.material, system, solution)
            report.sifs = [
                {
                    "tip": [float(f"{t.tip[0]:.9g}"), float(f"{t.tip[1]:.9g}")],
                    "K_I": float(f"{t.k1:.9g}"),
                    "K_II": float(f"{t.k2:.9g}"),
                    "L_A": float(f"{t.length_a:.9g}"),
                }
                for t in sifs
            ]
        export_results(mesh, case, sampler, sifs, emit)
        report.stage_seconds["post"] = time.perf_counter() - t0
        emit("report.json", lambda fp: fp.write(report.to_json()))
        return RunResult(
            report=report,
            mesh=mesh,
            system=system,
            solution=solution,
            sampler=sampler,
            sifs=sifs,
        )
    except Exception:
        for target in written:
            try:
                target.unlink()
            except OSError:
                pass
        raise


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def export_results(mesh, case, sampler, sifs, emit) -> None:
    if case.want_fields:
        emit("fields.vtk", lambda fp: _write_fields_vtk(mesh, sampler, fp))
    for req in case.paths:
        emit(f"path_{req.name}.csv", lambda fp, r=req: _write_path_csv(sampler, r, fp))
    if case.want_sifs and sifs:
        emit("sifs.csv", lambda fp: _write_sifs_csv(sifs, fp))


def _write_fields_vtk(mesh, sampler, fp) -> None:
    n = mesh.n_nodes
    vectors = np.zeros((n + len(mesh.cells), 2))
    vectors[:n, 0] = sampler.u[0::2]
    vectors[:n, 1] = sampler.u[1::2]
    mean_s = {"mean_sxx": [], "mean_syy": [], "mean_txy": []}
    for cell in mesh.cells:
        sol = sampler.cell_solution(cell.index)
        vectors[n + cell.index] = sol.displacement(0.0, 0, 0.0)
        acc = np.zeros(3)
        for ke in range(len(cell.edges)):
            acc += sol.stress(0.75, ke, 0.0)
        acc /= len(cell.edges)
        mean_s["mean_sxx"].append(acc[0])
        mean_s["mean_syy"].append(acc[1])
        mean_s["mean_txy"].append(acc[2])
    mesher.write_vtk_mesh(mesh, fp, point_vectors=vectors, cell_scalars=mean_s)


def _write_path_csv(sampler, req: PathRequest, fp) -> None:
    cols = ["x", "y", "ux", "uy", "sxx", "syy", "txy"]
    if req.polar_origin is not None:
        cols += ["srr", "stt", "srt"]
    fp.write(",".join(cols) + "\n")
    for k in range(req.count):
        t = k / (req.count - 1)
        p = req.start + t * (req.end - req.start)
        u = sampler.displacement(p)
        s = sampler.stress(p)
        row = [p[0], p[1], u[0], u[1], s[0], s[1], s[2]]
        if req.polar_origin is not None:
            row.extend(sampler.stress_polar(p, req.polar_origin))
        fp.write(",".join(f"{v:.9g}" for v in row) + "\n")


def _write_sifs_csv(sifs, fp) -> None:
    fp.write("tip_x,tip_y,K_I,K_II,L_A\n")
    for t in sifs:
        fp.write(
            f"{t.tip[0]:.9g},{t.tip[1]:.9g},{t.k1:.9g},{t.k2:.9g},{t.length_a:.9g}\n"
        )


# ---------------------------------------------------------------------------
# Error metrics and convergence studies
# ---------------------------------------------------------------------------


def l2_displacement_error(
    result: RunResult, reference, n_xi: int = 8
) -> float:
    """Relative L2 norm of the displacement error over the whole domain.

    ``reference(x)`` returns the exact displacement at a physical point; the
    integral uses per-element Gauss grids in the boundary coordinate and the
    radial coordinate with the exact area weight of the scaled-boundary map.
    """
    from qtsbfem.sbfem import _element_kinematics, _gauss_legendre, lagrange_shape

    mesh, sampler = result.mesh, result.sampler
    xg, wg = _gauss_legendre(n_xi)
    xis = 0.5 * (xg + 1.0)
    wxi = 0.5 * wg
    num = 0.0
    den = 0.0
    for cell in mesh.cells:
        sol = sampler.cell_solution(cell.index)
        basis = sol.basis
        scell = sol.cell
        powers = np.array([sol.c * np.power(complex(x), -basis.lam) for x in xis]).T
        u_xi = basis.phi_u @ powers  # (2n, n_xi)
        for ke, elem in enumerate(scell.elements):
            ng = elem.order + 2
            eg, ew = _gauss_legendre(ng)
            dofs = scell.element_dofs(elem)
            for eta, we in zip(eg, ew):
                N, _ = lagrange_shape(elem.order, eta)
                _, _, _, J = _element_kinematics(elem, scell.centre, eta)
                xb = N @ elem.coords
                u_loc = u_xi[dofs, :]
                ux = (N @ u_loc[0::2, :]).real
                uy = (N @ u_loc[1::2, :]).real
                for kx, (xi, wx) in enumerate(zip(xis, wxi)):
                    x = scell.centre + xi * (xb - scell.centre)
                    ue = reference(x)
                    w = we * wx * xi * J
                    num += w * ((ux[kx] - ue[0]) ** 2 + (uy[kx] - ue[1]) ** 2)
                    den += w * (ue[0] ** 2 + ue[1] ** 2)
    return math.sqrt(num / den)


def crack_opening(result: RunResult, point) -> float:
    """Magnitude of the displacement jump across the crack-face node pair
    closest to the given point."""
    mesh, u = result.mesh, result.solution.u
    if not mesh.face_pairs:
        raise asm.LocationError("mesh has no crack-face node pairs")
    p = np.asarray(point, dtype=float)
    best = min(
        mesh.face_pairs,
        key=lambda pair: float(np.hypot(*(mesh.nodes[pair[0]] - p))),
    )
    a, b = best
    du = np.array([u[2 * a] - u[2 * b], u[2 * a + 1] - u[2 * b + 1]])
    return float(np.hypot(du[0], du[1]))


def _scale_counts(case: AnalysisCase, mult: int) -> AnalysisCase:
    scaled = AnalysisCase(
        region=case.region,
        cracks=case.cracks,
        boundary_seeds=[(c, n * mult) for c, n in case.boundary_seeds],
        roi_seeds=[(c, n * mult) for c, n in case.roi_seeds],
        material=case.material,
        options=case.options,
        bcs=case.bcs,
        paths=case.paths,
        want_fields=False,
        want_sifs=case.want_sifs,
        reference=case.reference,
        raw=case.raw,
    )
    return scaled


def _with_order(case: AnalysisCase, order: int) -> AnalysisCase:
    opts = mesher.MeshingOptions(
        s_max=case.options.s_max,
        d_max=case.options.d_max,
        max_depth=case.options.max_depth,
        order=order,
    )
    return AnalysisCase(
        region=case.region,
        cracks=case.cracks,
        boundary_seeds=case.boundary_seeds,
        roi_seeds=case.roi_seeds,
        material=case.material,
        options=opts,
        bcs=case.bcs,
        paths=case.paths,
        want_fields=False,
        want_sifs=case.want_sifs,
        reference=case.reference,
        raw=case.raw,
    )


@dataclass
class ConvergenceRow:
    label: str
    dofs: int
    error: float


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow]
    slope: float | None

    def write_csv(self, fp) -> None:
        fp.write("sweep,dofs,error\n")
        for r in self.rows:
            fp.write(f"{r.label},{r.dofs},{r.error:.9g}\n")
        if self.slope is not None:
            fp.write(f"slope,,{self.slope:.9g}\n")


def convergence_driver(
    case: AnalysisCase,
    orders: list[int] | None = None,
    seed_multipliers: list[int] | None = None,
    threads: int = 1,
) -> ConvergenceTable:
    """Sweep either the element order or the seed density and tabulate the
    L2 displacement error per run.

    With an analytic reference the error is measured against it; otherwise
    runs are compared against the finest run of the sweep, sampled at the
    case's path points. The fitted slope is -d log(error)/d log(DOF).
    """
    if (orders is None) == (seed_multipliers is None):
        raise ValueError("specify exactly one of orders / seed_multipliers")
    cases = []
    if orders is not None:
        for p in orders:
            cases.append((f"p={p}", _with_order(case, p)))
    else:
        for m in seed_multipliers:
            cases.append((f"seeds x{m}", _scale_counts(case, m)))
    results = [(label, run_pipeline(c, threads=threads)) for label, c in cases]

    rows = []
    if case.reference is not None and "hole_exact" in case.reference:
        body = case.reference["hole_exact"]
        a = float(body["a"])
        sigma = float(body.get("sigma", 1.0))
        centre = np.asarray(body.get("center", [0.0, 0.0]), dtype=float)

        def exact(x):
            rel = x - centre
            r = math.hypot(rel[0], rel[1])
            th = math.atan2(rel[1], rel[0])
            return analytic_hole_solution(max(r, a), th, a, case.material, sigma)[1]

        for label, res in results:
            rows.append(ConvergenceRow(label, res.report.dofs, l2_displacement_error(res, exact)))
    else:
        if not case.paths:
            raise ValueError("a sweep without an analytic reference needs sample paths")
        pts = []
        for req in case.paths:
            for k in range(req.count):
                t = k / (req.count - 1)
                pts.append(req.start + t * (req.end - req.start))
        ref_label, ref_res = results[-1]
        ref_u = np.array([ref_res.sampler.displacement(p) for p in pts])
        scale = math.sqrt(float(np.sum(ref_u**2)))
        for label, res in results[:-1]:
            u = np.array([res.sampler.displacement(p) for p in pts])
            err = math.sqrt(float(np.sum((u - ref_u) ** 2))) / scale
            rows.append(ConvergenceRow(label, res.report.dofs, err))
        rows.append(ConvergenceRow(ref_label, ref_res.report.dofs, 0.0))

    fit_rows = [r for r in rows if r.error > 0.0]
    slope = None
    if len(fit_rows) >= 2:
        x = np.log([r.dofs for r in fit_rows])
        y = np.log([r.error for r in fit_rows])
        slope = float(-np.polyfit(x, y, 1)[0])
    return ConvergenceTable(rows=rows, slope=slope)
