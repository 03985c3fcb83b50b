"""Global assembly, boundary conditions, linear solve and post-processing.

Cell stiffness matrices are computed once per master-cell signature and
reused for every regular quadtree cell carrying the same signature; trimmed,
snapped and crack cells are computed individually. The global system is a
sparse symmetric matrix over two DOFs per node; Dirichlet constraints are
eliminated by reduction so reactions are recovered exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from qtsbfem.geometry import Curve
from qtsbfem.mesher import Mesh, MeshCell, TipRecord
from qtsbfem.sbfem import (
    CellElement,
    CellOperator,
    CellSolution,
    MaterialModel,
    ModalBasis,
    SolverCell,
    _gauss_legendre,
    lagrange_shape,
    rotate_stress,
    singular_modes,
    stress_intensity_factors,
)

__all__ = [
    "AssemblyError",
    "MeshIntegrityError",
    "ConstraintError",
    "SolveError",
    "LocationError",
    "BoxSelector",
    "NearCurveSelector",
    "BoundaryCondition",
    "MasterCellCache",
    "build_cache",
    "solver_cell",
    "GlobalSystem",
    "assemble",
    "apply_tractions",
    "apply_displacements",
    "solve",
    "Solution",
    "FieldSampler",
    "extract_sifs",
    "TipResult",
]


class AssemblyError(RuntimeError):
    """Assembly-stage failure."""


class MeshIntegrityError(AssemblyError):
    """A cell references a node missing from the node table."""


class ConstraintError(AssemblyError):
    """Conflicting or ill-posed displacement constraints."""


class SolveError(AssemblyError):
    """Linear solve failure (typically missing constraints)."""


class LocationError(AssemblyError):
    """A sample point lies outside every cell."""


# ---------------------------------------------------------------------------
# Selectors and boundary conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxSelector:
    lo: tuple[float, float]
    hi: tuple[float, float]

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        return np.all((pts >= lo) & (pts <= hi), axis=1)


@dataclass(frozen=True)
class NearCurveSelector:
    curve: Curve
    tol: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return self.curve.distance(pts) <= self.tol


@dataclass
class BoundaryCondition:
    """Either a prescribed displacement (per-component, None leaves the
    component free) or an edge traction.

    Traction kinds: ``vector`` (constant (tx, ty)), ``pressure`` (t = -p n,
    n the outward normal), or ``field`` (callable t(x, n) -> (2,))."""

    selector: BoxSelector | NearCurveSelector
    fix_x: float | None = None
    fix_y: float | None = None
    traction: tuple | None = None

    @property
    def is_dirichlet(self) -> bool:
        return self.fix_x is not None or self.fix_y is not None


def select_nodes(mesh: Mesh, selector) -> np.ndarray:
    return np.nonzero(selector.contains(mesh.nodes))[0]


def select_boundary_edges(mesh: Mesh, selector) -> list[tuple[int, int]]:
    """(cell index, edge index) of exterior edges whose nodes all satisfy the
    selector."""
    counts = mesh.edge_use_counts()
    inside = selector.contains(mesh.nodes)
    out = []
    for cell in mesh.cells:
        for ei, e in enumerate(cell.edges):
            key = (min(e.nodes[0], e.nodes[-1]), max(e.nodes[0], e.nodes[-1]))
            if counts[key] != 1:
                continue
            if all(inside[n] for n in e.nodes):
                out.append((cell.index, ei))
    return out


# ---------------------------------------------------------------------------
# Cell operators and the master cache
# ---------------------------------------------------------------------------


def solver_cell(mesh: Mesh, cell: MeshCell) -> tuple[SolverCell, np.ndarray]:
    """Solver view of a mesh cell plus its global boundary-node ids."""
    nodes = cell.boundary_nodes()
    if max(nodes) >= mesh.n_nodes:
        raise MeshIntegrityError(
            f"cell {cell.index} references node {max(nodes)} beyond the node table"
        )
    index = {nid: k for k, nid in enumerate(nodes)}
    elements = []
    for e in cell.edges:
        coords = mesh.nodes[list(e.nodes)]
        local = np.array([index[n] for n in e.nodes], dtype=int)
        elements.append(CellElement(e.order, coords, local))
    scell = SolverCell(
        centre=cell.centre, elements=elements, closed=cell.closed, n_nodes=len(nodes)
    )
    return scell, np.array(nodes, dtype=int)


class MasterCellCache:
    """Stiffness matrices keyed by (signature, material id): computed once,
    then extracted for every other cell with the same key."""

    def __init__(self):
        self.store: dict[tuple, tuple[np.ndarray, ModalBasis]] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self.store)

    def get(self, key):
        found = self.store.get(key)
        if found is not None:
            self.hits += 1
        return found

    def put(self, key, stiffness: np.ndarray, basis: ModalBasis):
        self.misses += 1
        self.store[key] = (stiffness, basis)


@dataclass
class CellRecord:
    operator: CellOperator
    dofs: np.ndarray
    nodes: np.ndarray
    cached: bool


def _cell_key(cell: MeshCell):
    if cell.signature is None:
        return None
    return (cell.signature, cell.material_id)


def build_cache(
    mesh: Mesh, material: MaterialModel, n_gauss: int | None = None, threads: int = 1
) -> MasterCellCache:
    """Precompute the stiffness of every distinct master signature in the mesh."""
    cache = MasterCellCache()
    reps: dict[tuple, MeshCell] = {}
    for cell in mesh.cells:
        key = _cell_key(cell)
        if key is not None and key not in reps:
            reps[key] = cell

    def compute(item):
        key, cell = item
        scell, _ = solver_cell(mesh, cell)
        op = CellOperator(scell, material, n_gauss)
        return key, op.stiffness, op.basis

    items = sorted(reps.items(), key=lambda kv: kv[1].index)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(compute, items))
    else:
        results = [compute(item) for item in items]
    for key, K, basis in results:
        cache.put(key, K, basis)
    return cache


def cell_records(
    mesh: Mesh,
    material: MaterialModel,
    cache: MasterCellCache | None,
    n_gauss: int | None = None,
    threads: int = 1,
) -> list[CellRecord]:
    """Per-cell operators, reusing cached stiffness/basis where available."""
    records: list[CellRecord | None] = [None] * len(mesh.cells)
    individual: list[MeshCell] = []
    for cell in mesh.cells:
        key = _cell_key(cell)
        hit = cache.get(key) if (cache is not None and key is not None) else None
        scell, nodes = solver_cell(mesh, cell)
        dofs = np.empty(2 * len(nodes), dtype=int)
        dofs[0::2] = 2 * nodes
        dofs[1::2] = 2 * nodes + 1
        if hit is not None:
            K, basis = hit
            op = CellOperator(scell, material, n_gauss)
            op._K = K
            op._basis = basis
            records[cell.index] = CellRecord(op, dofs, nodes, cached=True)
        else:
            records[cell.index] = CellRecord(
                CellOperator(scell, material, n_gauss), dofs, nodes, cached=False
            )
            individual.append(cell)

    def compute(cell: MeshCell):
        records[cell.index].operator.stiffness

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(compute, individual))
    else:
        for cell in individual:
            compute(cell)
    return records


# ---------------------------------------------------------------------------
# Global system
# ---------------------------------------------------------------------------


@dataclass
class GlobalSystem:
    stiffness: scipy.sparse.csr_matrix
    load: np.ndarray
    constraints: dict[int, float] = field(default_factory=dict)
    records: list[CellRecord] = field(default_factory=list)
    n_computed: int = 0
    n_cached: int = 0

    @property
    def n_dof(self) -> int:
        return len(self.load)


def assemble(
    mesh: Mesh,
    material: MaterialModel,
    cache: MasterCellCache | None = None,
    n_gauss: int | None = None,
    threads: int = 1,
) -> GlobalSystem:
    """Scatter-add all cell stiffness matrices into a sparse global matrix."""
    records = cell_records(mesh, material, cache, n_gauss, threads)
    ndof = 2 * mesh.n_nodes
    rows, cols, vals = [], [], []
    for rec in records:
        K = rec.operator.stiffness
        d = rec.dofs
        grid = np.meshgrid(d, d, indexing="ij")
        rows.append(grid[0].ravel())
        cols.append(grid[1].ravel())
        vals.append(K.ravel())
    K = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(ndof, ndof),
    ).tocsr()
    n_cached = sum(1 for r in records if r.cached)
    return GlobalSystem(
        stiffness=K,
        load=np.zeros(ndof),
        records=records,
        n_computed=len(records) - n_cached,
        n_cached=n_cached,
    )


def apply_tractions(
    system: GlobalSystem,
    mesh: Mesh,
    edges: list[tuple[int, int]],
    traction,
    n_gauss: int | None = None,
) -> GlobalSystem:
    """Consistent nodal loads from an edge traction.

    ``traction`` is one of ("vector", (tx, ty)), ("pressure", p) or
    ("field", fn) with fn(x, n) -> (2,); n is the outward unit normal of the
    counterclockwise cell boundary.
    """
    kind, payload = traction
    counts = mesh.edge_use_counts()
    for cell_idx, edge_idx in edges:
        e = mesh.cells[cell_idx].edges[edge_idx]
        key = (min(e.nodes[0], e.nodes[-1]), max(e.nodes[0], e.nodes[-1]))
        if counts[key] != 1:
            raise AssemblyError(
                f"traction applied to interior edge {key} of cell {cell_idx}"
            )
        pts = mesh.nodes[list(e.nodes)]
        ng = n_gauss if n_gauss is not None else e.order + 2
        xg, wg = _gauss_legendre(ng)
        fe = np.zeros(2 * len(e.nodes))
        for x, w in zip(xg, wg):
            N, dN = lagrange_shape(e.order, x)
            pos = N @ pts
            tang = dN @ pts
            speed = math.hypot(tang[0], tang[1])
            normal = np.array([tang[1], -tang[0]]) / speed
            if kind == "vector":
                t = np.asarray(payload, float)
            elif kind == "pressure":
                t = -payload * normal
            elif kind == "field":
                t = np.asarray(payload(pos, normal), float)
            else:
                raise AssemblyError(f"unknown traction kind {kind!r}")
            fe[0::2] += N * t[0] * speed * w
            fe[1::2] += N * t[1] * speed * w
        for k, nid in enumerate(e.nodes):
            system.load[2 * nid] += fe[2 * k]
            system.load[2 * nid + 1] += fe[2 * k + 1]
    return system


def apply_displacements(system: GlobalSystem, constraints: dict[int, float]) -> GlobalSystem:
    """Register prescribed DOF values, rejecting conflicting duplicates."""
    for dof, val in constraints.items():
        old = system.constraints.get(dof)
        if old is not None and old != val:
            raise ConstraintError(
                f"conflicting prescriptions on DOF {dof}: {old} vs {val}"
            )
        system.constraints[dof] = val
    return system


@dataclass
class Solution:
    u: np.ndarray
    reactions: dict[int, float]
    residual: float
    load: np.ndarray

    def equilibrium_residual(self) -> float:
        total = np.array([0.0, 0.0])
        for dof, r in self.reactions.items():
            total[dof % 2] += r
        applied = np.array([self.load[0::2].sum(), self.load[1::2].sum()])
        scale = max(np.abs(self.load).sum(), np.abs(list(self.reactions.values()) or [0.0]).max() if self.reactions else 0.0, 1e-300)
        return float(np.abs(total + applied).max() / scale)


def solve(system: GlobalSystem) -> Solution:
    """Direct sparse solve of the reduced system, with reaction recovery."""
    ndof = system.n_dof
    fixed = np.array(sorted(system.constraints), dtype=int)
    if len(fixed) == 0:
        raise SolveError("no displacement constraints: the structure floats")
    values = np.array([system.constraints[d] for d in fixed])
    free = np.setdiff1d(np.arange(ndof), fixed)
    K = system.stiffness
    Kff = K[np.ix_(free, free)].tocsc() if scipy.sparse.issparse(K) else K[np.ix_(free, free)]
    Kfc = K[np.ix_(free, fixed)]
    rhs = system.load[free] - Kfc @ values
    try:
        uf = scipy.sparse.linalg.spsolve(Kff, rhs)
    except Exception as exc:  # pragma: no cover - scipy raises various types
        raise SolveError(f"sparse factorisation failed: {exc}") from exc
    if not np.all(np.isfinite(uf)):
        raise SolveError("singular reduced system (insufficient constraints)")
    res = np.linalg.norm(Kff @ uf - rhs)
    ref = np.linalg.norm(rhs)
    if ref > 0 and res / ref > 1e-10:
        raise SolveError(f"solver residual {res / ref:.3e} exceeds 1e-10")
    u = np.zeros(ndof)
    u[free] = uf
    u[fixed] = values
    full_res = K @ u - system.load
    reactions = {int(d): float(full_res[d]) for d in fixed}
    return Solution(u=u, reactions=reactions, residual=float(res / max(ref, 1e-300)), load=system.load.copy())


# ---------------------------------------------------------------------------
# Field sampling
# ---------------------------------------------------------------------------


class FieldSampler:
    """Point evaluation of the solved displacement and stress fields.

    Points are located by inverting the radial/boundary coordinates cell by
    cell (bounding boxes first); points on shared edges resolve to the lower
    cell index.
    """

    def __init__(self, mesh: Mesh, material: MaterialModel, system: GlobalSystem,
                 solution: Solution):
        self.mesh = mesh
        self.material = material
        self.records = system.records
        self.u = solution.u
        self._solutions: dict[int, CellSolution] = {}
        self._boxes = []
        for cell in mesh.cells:
            pts = mesh.nodes[[n for e in cell.edges for n in e.nodes]]
            lo = pts.min(axis=0)
            hi = pts.max(axis=0)
            self._boxes.append((lo, hi))

    def cell_solution(self, cell_idx: int) -> CellSolution:
        sol = self._solutions.get(cell_idx)
        if sol is None:
            rec = self.records[cell_idx]
            sol = rec.operator.solve(self.u[rec.dofs])
            self._solutions[cell_idx] = sol
        return sol

    def locate(self, p) -> tuple[int, float, int, float]:
        """(cell index, xi, element index, eta) of the containing cell."""
        p = np.asarray(p, dtype=float)
        tol = 1e-8 * self.mesh.root_size
        best = None
        for cell in self.mesh.cells:
            lo, hi = self._boxes[cell.index]
            if np.any(p < lo - tol) or np.any(p > hi + tol):
                continue
            hit = self._invert(cell, p)
            if hit is None:
                continue
            xi, elem, eta, err = hit
            if best is None or err < best[4] - 1e-14:
                best = (cell.index, xi, elem, eta, err)
            if err < 1e-12:
                break
        if best is None or best[4] > 1e-6:
            raise LocationError(f"point {tuple(p)} lies outside every cell")
        return best[0], best[1], best[2], best[3]

    def _invert(self, cell: MeshCell, p: np.ndarray):
        rec = self.records[cell.index]
        scell = rec.operator.cell
        rel = p - scell.centre
        rnorm = math.hypot(rel[0], rel[1])
        best = None
        for ke, elem in enumerate(scell.elements):
            coords = elem.coords - scell.centre
            xi, eta = min(max(rnorm / max(np.hypot(*coords.T).max(), 1e-300), 1e-6), 1.0), 0.0
            for _ in range(40):
                if not (math.isfinite(xi) and math.isfinite(eta)):
                    xi, eta = 0.5, 0.0
                    break
                eta = min(max(eta, -1.5), 1.5)
                N, dN = lagrange_shape(elem.order, eta)
                xb = N @ coords
                dxb = dN @ coords
                r = xi * xb - rel
                J = np.column_stack([xb, xi * dxb])
                det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
                if abs(det) < 1e-300:
                    break
                step = np.array(
                    [J[1, 1] * r[0] - J[0, 1] * r[1], -J[1, 0] * r[0] + J[0, 0] * r[1]]
                ) / det
                xi -= step[0]
                eta -= step[1]
                if abs(step[0]) + abs(step[1]) < 1e-14:
                    break
            err = max(0.0, -xi) + max(0.0, xi - 1.0) + max(0.0, abs(eta) - 1.0)
            N, _ = lagrange_shape(elem.order, min(max(eta, -1.0), 1.0))
            check = min(max(xi, 0.0), 1.0) * (N @ coords) - rel
            mismatch = math.hypot(check[0], check[1]) / max(self.mesh.root_size, 1e-300)
            err += mismatch
            if best is None or err < best[3]:
                best = (min(max(xi, 1e-12), 1.0), ke, min(max(eta, -1.0), 1.0), err)
        if best is None:
            return None
        return best


    def displacement(self, p) -> np.ndarray:
        ci, xi, elem, eta = self.locate(p)
        return self.cell_solution(ci).displacement(xi, elem, eta)

    def stress(self, p) -> np.ndarray:
        ci, xi, elem, eta = self.locate(p)
        return self.cell_solution(ci).stress(max(xi, 1e-9), elem, eta)

    def stress_polar(self, p, origin=(0.0, 0.0)) -> np.ndarray:
        """(sigma_rr, sigma_tt, tau_rt) about the given origin."""
        p = np.asarray(p, dtype=float)
        o = np.asarray(origin, dtype=float)
        ang = math.atan2(p[1] - o[1], p[0] - o[0])
        return rotate_stress(self.stress(p), ang)


# ---------------------------------------------------------------------------
# Stress intensity factors
# ---------------------------------------------------------------------------


@dataclass
class TipResult:
    crack_index: int
    endpoint: int
    tip: np.ndarray
    k1: float
    k2: float
    length_a: float


def extract_sifs(
    mesh: Mesh,
    material: MaterialModel,
    system: GlobalSystem,
    solution: Solution,
) -> list[TipResult]:
    """Mode I/II stress intensity factors at every crack tip in the mesh."""
    out = []
    for rec in mesh.cracks:
        cellrec = system.records[rec.cell_index]
        op = cellrec.operator
        sing = singular_modes(op.cell, op.basis, material, rec.length_a, rec.angle)
        csol = op.solve(solution.u[cellrec.dofs])
        k1, k2 = stress_intensity_factors(sing, csol.c, rec.exit_edges)
        out.append(
            TipResult(
                crack_index=rec.crack_index,
                endpoint=rec.endpoint,
                tip=rec.tip.copy(),
                k1=float(k1),
                k2=float(k2),
                length_a=rec.length_a,
            )
        )
    return out
