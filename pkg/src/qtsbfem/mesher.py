"""Boundary-conforming quadtree polygon meshes from implicit geometry.

Pipeline: a square root cell covering the domain is refined until no leaf
holds more seed points than allowed, balanced to the 2:1 rule, and classified
against the signed distance function. Vertices closer to the boundary than
1/10 of the local edge length are snapped onto it; cut cells are trimmed into
boundary-conforming polygons; cells around each crack tip are equalised and
merged into a single open cell; remaining cells on a crack path are split
with duplicated face nodes. Hanging nodes need no treatment: every polygon
edge simply becomes one or more line elements whose end nodes are shared
with the neighbours, which makes the mesh conforming by construction.

Square cells untouched by snapping or trimming carry a canonical signature
(per-side hanging-node pattern plus element order) so their stiffness can be
computed once and reused; everything else is tagged irregular.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from qtsbfem import geometry as geo
from qtsbfem.geometry import (
    CrackPath,
    GeometryError,
    ImplicitRegion,
    PointClass,
    SeedCloud,
    classify_point,
    intersect_edge,
    project_to_boundary,
    sdf_eval,
)

__all__ = [
    "MeshingError",
    "TrimmingError",
    "MeshingOptions",
    "QuadTree",
    "CellStatus",
    "init_root",
    "refine_by_seeds",
    "balance",
    "classify_cells",
    "snap_vertices",
    "canonical_signature",
    "Mesh",
    "MeshCell",
    "MeshEdge",
    "TipRecord",
    "build_mesh",
    "write_qpmesh",
    "write_vtk_mesh",
]

Key = tuple[int, int, int]  # (level, i, j), i along x, j along y


class MeshingError(RuntimeError):
    """Mesh generation failure."""


class TrimmingError(MeshingError):
    """Inconsistent boundary-crossing parity while trimming a cell."""


class CellStatus(Enum):
    UNKNOWN = "unknown"
    INSIDE = "inside"
    OUTSIDE = "outside"
    CUT = "cut"
    CRACK_TIP = "crack_tip"


@dataclass
class MeshingOptions:
    s_max: int = 1
    d_max: int = 1
    max_depth: int = 20
    order: int = 2
    snap_ratio: float = 0.1
    boundary_tol_factor: float = 1e-9
    gradient_step_factor: float = 1e-6
    projection_tol_factor: float = 1e-10
    edge_samples: int = 9
    degenerate_area_factor: float = 1e-12


# ---------------------------------------------------------------------------
# Quadtree
# ---------------------------------------------------------------------------


@dataclass
class _Leaf:
    seed_idx: np.ndarray
    status: CellStatus = CellStatus.UNKNOWN


class QuadTree:
    """Dyadic square subdivision of a root cell.

    Leaves are keyed by (level, i, j); child cells tile the parent exactly,
    so every corner lives on an integer lattice at the finest level.
    """

    def __init__(self, origin, size: float, max_depth: int = 20):
        if not size > 0:
            raise MeshingError(f"root cell size must be > 0, got {size}")
        self.origin = np.asarray(origin, dtype=float)
        self.size = float(size)
        self.max_depth = max_depth
        self.leaves: dict[Key, _Leaf] = {(0, 0, 0): _Leaf(np.arange(0))}
        self.internal: set[Key] = set()
        self._seeds = np.zeros((0, 2))

    # -- geometry ---------------------------------------------------------
    def cell_origin(self, key: Key) -> np.ndarray:
        lvl, i, j = key
        h = self.size / (1 << lvl)
        return self.origin + np.array([i * h, j * h])

    def cell_size(self, key: Key) -> float:
        return self.size / (1 << key[0])

    def max_level(self) -> int:
        return max(k[0] for k in self.leaves)

    # -- topology ---------------------------------------------------------
    def subdivide(self, key: Key):
        """Split a leaf into 4 children, redistributing its seed points.

        Seeds exactly on a split line go to the lower-index child (west or
        south side), a fixed tie-break that keeps meshing deterministic.
        """
        lvl, i, j = key
        if lvl >= self.max_depth:
            raise MeshingError(
                f"refinement depth {lvl} reached the configured maximum "
                f"{self.max_depth} at cell {key}"
            )
        leaf = self.leaves.pop(key)
        self.internal.add(key)
        h = self.cell_size(key)
        o = self.cell_origin(key)
        cx, cy = o[0] + 0.5 * h, o[1] + 0.5 * h
        idx = leaf.seed_idx
        if len(idx):
            px = self._seeds[idx, 0]
            py = self._seeds[idx, 1]
            east = px > cx
            north = py > cy
        for dj in (0, 1):
            for di in (0, 1):
                child = (lvl + 1, 2 * i + di, 2 * j + dj)
                if len(idx):
                    sel = idx[(east == bool(di)) & (north == bool(dj))]
                else:
                    sel = np.arange(0)
                self.leaves[child] = _Leaf(sel)

    def ancestor_leaf(self, lvl: int, i: int, j: int) -> Key | None:
        """Deepest leaf at or above (lvl, i, j)."""
        while lvl >= 0:
            key = (lvl, i, j)
            if key in self.leaves:
                return key
            if key in self.internal:
                return None
            lvl, i, j = lvl - 1, i >> 1, j >> 1
        return None


def init_root(region: ImplicitRegion, max_depth: int = 20) -> QuadTree:
    """Root square covering the region: side equal to the larger of the two
    bounding-box extents, anchored at the min corner."""
    box = region.bounding_box()
    if box is None:
        raise GeometryError("cannot mesh an unbounded region")
    lo, hi = box
    extents = hi - lo
    side = float(np.max(extents))
    if not side > 0:
        raise GeometryError(f"degenerate region extents {tuple(extents)}")
    return QuadTree(lo, side, max_depth=max_depth)


def refine_by_seeds(tree: QuadTree, seeds: SeedCloud, s_max: int) -> QuadTree:
    """Subdivide until every leaf holds at most s_max seed points.

    Seeds that coincide within 1e-9 of the root size count as one point;
    they could never be separated by subdivision.
    """
    if s_max < 1:
        raise MeshingError(f"s_max must be >= 1, got {s_max}")
    pts = np.asarray(seeds.points, dtype=float)
    if len(pts):
        lo = tree.origin
        hi = tree.origin + tree.size
        if np.any(pts < lo - 1e-12 * tree.size) or np.any(pts > hi + 1e-12 * tree.size):
            raise MeshingError("seed points fall outside the root cell")
        quantum = 1e-9 * tree.size
        keys = np.round((pts - lo) / quantum).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        pts = pts[np.sort(first)]
    tree._seeds = pts
    root = (0, 0, 0)
    if root in tree.leaves:
        tree.leaves[root].seed_idx = np.arange(len(pts))
    stack = [k for k in sorted(tree.leaves)]
    while stack:
        key = stack.pop()
        leaf = tree.leaves.get(key)
        if leaf is None or len(leaf.seed_idx) <= s_max:
            continue
        lvl, i, j = key
        tree.subdivide(key)
        for dj in (0, 1):
            for di in (0, 1):
                stack.append((lvl + 1, 2 * i + di, 2 * j + dj))
    return tree


def balance(tree: QuadTree, d_max: int = 1) -> QuadTree:
    """Enforce the 2:1-style rule: adjacent leaves differ by at most d_max
    levels, achieved by subdividing the coarser cell to a fixpoint."""
    if d_max < 1:
        raise MeshingError(f"d_max must be >= 1, got {d_max}")
    changed = True
    while changed:
        changed = False
        for key in sorted(tree.leaves):
            if key not in tree.leaves:
                continue
            lvl, i, j = key
            span = 1 << lvl
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < span and 0 <= nj < span):
                    continue
                nb = (lvl, ni, nj)
                if nb in tree.leaves or nb in tree.internal:
                    continue
                anc = tree.ancestor_leaf(lvl - 1, ni >> 1, nj >> 1)
                if anc is not None and lvl - anc[0] > d_max:
                    tree.subdivide(anc)
                    changed = True
    return tree


def _tip_members(tree: QuadTree, tip: np.ndarray, radius: float) -> list[Key]:
    """Leaves whose interior overlaps the open tip-control disc."""
    out = []
    for key in sorted(tree.leaves):
        o = tree.cell_origin(key)
        h = tree.cell_size(key)
        dx = max(o[0] - tip[0], 0.0, tip[0] - (o[0] + h))
        dy = max(o[1] - tip[1], 0.0, tip[1] - (o[1] + h))
        if math.hypot(dx, dy) < radius:
            out.append(key)
    return out


def equalise_tip_regions(
    tree: QuadTree, cracks: list[CrackPath], d_max: int
) -> dict[tuple[int, int], list[Key]]:
    """Refine the leaves around each crack tip to a common level.

    Returns {(crack index, endpoint index): member leaf keys}. Rebalances
    after each refinement round, iterating to a fixpoint so balancing never
    reintroduces a level mismatch inside a tip region.
    """
    tips = []
    for ci, crack in enumerate(cracks):
        for end, pt, _ in crack.tips():
            tips.append(((ci, end), pt, crack.tip_radius))
    members: dict[tuple[int, int], list[Key]] = {}
    for _round in range(64):
        changed = False
        for tid, pt, radius in tips:
            mem = _tip_members(tree, pt, radius)
            if not mem:
                raise MeshingError(f"tip-control circle of crack tip {tid} covers no cell")
            top = max(k[0] for k in mem)
            for key in mem:
                if key[0] < top:
                    tree.subdivide(key)
                    changed = True
        if changed:
            balance(tree, d_max)
        else:
            break
    else:
        raise MeshingError("tip-region equalisation did not stabilise")
    for tid, pt, radius in tips:
        members[tid] = _tip_members(tree, pt, radius)
    claimed: set[Key] = set()
    for tid, mem in members.items():
        dup = claimed.intersection(mem)
        if dup:
            raise MeshingError(
                f"tip-control circles overlap near {tid}; shrink tip radii"
            )
        claimed.update(mem)
    return members


# ---------------------------------------------------------------------------
# Node registry
# ---------------------------------------------------------------------------


class _NodeStore:
    """Node table shared by every cell; lattice corners are keyed by their
    integer coordinates at the finest level so adjacent cells always agree."""

    def __init__(self, tree: QuadTree):
        self.tree = tree
        self.level = tree.max_level()
        self.scale = 1 << self.level
        self.coords: list[np.ndarray] = []
        self.klass: list[PointClass] = []
        self.dist: list[float] = []
        self.moved: list[bool] = []
        self.lattice: dict[tuple[int, int], int] = {}

    def lattice_node(self, ix: int, iy: int) -> int:
        nid = self.lattice.get((ix, iy))
        if nid is None:
            nid = len(self.coords)
            xy = self.tree.origin + self.tree.size * np.array(
                [ix / self.scale, iy / self.scale]
            )
            self.coords.append(xy)
            self.klass.append(PointClass.INSIDE)
            self.dist.append(0.0)
            self.moved.append(False)
            self.lattice[(ix, iy)] = nid
        return nid

    def new_node(self, xy, klass: PointClass = PointClass.INSIDE) -> int:
        nid = len(self.coords)
        self.coords.append(np.asarray(xy, dtype=float).copy())
        self.klass.append(klass)
        self.dist.append(0.0)
        self.moved.append(False)
        return nid

    def corner_ints(self, key: Key) -> tuple[int, int, int]:
        lvl, i, j = key
        shift = self.level - lvl
        return i << shift, j << shift, 1 << shift

    def leaf_corner_ids(self, key: Key) -> list[int]:
        ix, iy, step = self.corner_ints(key)
        return [
            self.lattice_node(ix, iy),
            self.lattice_node(ix + step, iy),
            self.lattice_node(ix + step, iy + step),
            self.lattice_node(ix, iy + step),
        ]


# ---------------------------------------------------------------------------
# Classification and snapping
# ---------------------------------------------------------------------------


def classify_cells(
    tree: QuadTree,
    store: _NodeStore,
    region: ImplicitRegion,
    tol: float,
    edge_samples: int = 9,
) -> None:
    """Assign inside/outside/cut statuses from corner SDF classifications.

    Cells whose corners all sit on one side are still promoted to cut when
    sampled SDF values along their edges change sign (thin features passing
    through an edge).
    """
    keys = sorted(tree.leaves)
    corner_ids = [store.leaf_corner_ids(k) for k in keys]
    unique = sorted({nid for ids in corner_ids for nid in ids})
    pts = np.array([store.coords[n] for n in unique])
    dvals = region.distance(pts)
    for nid, d in zip(unique, dvals):
        store.dist[nid] = float(d)
        store.klass[nid] = classify_point(float(d), tol)

    # batched edge samples for the thin-feature check
    ts = (np.arange(1, edge_samples + 1)) / (edge_samples + 1)
    sample_pts = []
    for k, key in enumerate(keys):
        o = tree.cell_origin(key)
        h = tree.cell_size(key)
        c0 = o
        c1 = o + [h, 0.0]
        c2 = o + [h, h]
        c3 = o + [0.0, h]
        for a, b in ((c0, c1), (c1, c2), (c2, c3), (c3, c0)):
            sample_pts.append(a[None, :] + ts[:, None] * (b - a)[None, :])
    sample_d = region.distance(np.vstack(sample_pts)).reshape(len(keys), 4 * edge_samples)

    for k, key in enumerate(keys):
        classes = [store.klass[n] for n in corner_ids[k]]
        has_in = any(c is PointClass.INSIDE for c in classes)
        has_out = any(c is PointClass.OUTSIDE for c in classes)
        if has_in and has_out:
            status = CellStatus.CUT
        else:
            if has_in:
                consensus_in = True
            elif has_out:
                consensus_in = False
            else:
                o = tree.cell_origin(key)
                h = tree.cell_size(key)
                centre_d = sdf_eval(region, o + 0.5 * h)
                consensus_in = centre_d <= 0.0
            dips = sample_d[k]
            crossing = np.any(dips > tol) if consensus_in else np.any(dips < -tol)
            if crossing:
                status = CellStatus.CUT
            else:
                status = CellStatus.INSIDE if consensus_in else CellStatus.OUTSIDE
        tree.leaves[key].status = status


def snap_vertices(
    tree: QuadTree,
    store: _NodeStore,
    region: ImplicitRegion,
    *,
    snap_ratio: float,
    tol: float,
    grad_step: float,
) -> list[int]:
    """Move near-boundary vertices of kept cells onto the boundary.

    The threshold is snap_ratio (1/10 by default) of the edge length of the
    smallest kept cell attached to the vertex. Returns the moved node ids.
    """
    min_side: dict[int, float] = {}
    for key in sorted(tree.leaves):
        if tree.leaves[key].status is CellStatus.OUTSIDE:
            continue
        h = tree.cell_size(key)
        for nid in store.leaf_corner_ids(key):
            cur = min_side.get(nid)
            if cur is None or h < cur:
                min_side[nid] = h
    moved = []
    for nid in sorted(min_side):
        d = store.dist[nid]
        if store.klass[nid] is PointClass.ON_BOUNDARY:
            continue
        if abs(d) < snap_ratio * min_side[nid]:
            target = project_to_boundary(
                store.coords[nid], region, tol=tol, grad_step=grad_step
            )
            if np.hypot(*(target - store.coords[nid])) > tol:
                store.coords[nid] = target
                store.moved[nid] = True
                moved.append(nid)
            store.klass[nid] = PointClass.ON_BOUNDARY
            store.dist[nid] = 0.0
    return moved


# ---------------------------------------------------------------------------
# Polygon construction (trimming)
# ---------------------------------------------------------------------------


@dataclass
class ProtoCell:
    chain: list[int]
    closed: bool = True
    chords: set[tuple[int, int]] = field(default_factory=set)
    irregular: bool = False
    source: Key | None = None
    tip: "TipRecord | None" = None

    def edge_pairs(self):
        n = len(self.chain)
        last = n if self.closed else n - 1
        for k in range(last):
            yield self.chain[k], self.chain[(k + 1) % n]


class _Grid:
    """Breakpoint registries: which lattice coordinates subdivide cell sides."""

    def __init__(self, tree: QuadTree, store: _NodeStore, kept: list[Key]):
        self.vlines: dict[int, set[int]] = {}
        self.hlines: dict[int, set[int]] = {}
        for key in kept:
            ix, iy, step = store.corner_ints(key)
            for x in (ix, ix + step):
                self.vlines.setdefault(x, set()).update((iy, iy + step))
            for y in (iy, iy + step):
                self.hlines.setdefault(y, set()).update((ix, ix + step))
        self.vsorted = {x: sorted(s) for x, s in self.vlines.items()}
        self.hsorted = {y: sorted(s) for y, s in self.hlines.items()}

    def breaks_v(self, x: int, y0: int, y1: int) -> list[int]:
        return [y for y in self.vsorted.get(x, ()) if y0 < y < y1]

    def breaks_h(self, y: int, x0: int, x1: int) -> list[int]:
        return [x for x in self.hsorted.get(y, ()) if x0 < x < x1]


def _leaf_chain(store: _NodeStore, grid: _Grid, key: Key) -> list[int]:
    """Counterclockwise chain of a leaf: corners plus hanging nodes, starting
    at the SW corner."""
    ix, iy, step = store.corner_ints(key)
    chain = []
    chain.append(store.lattice_node(ix, iy))
    for x in grid.breaks_h(iy, ix, ix + step):
        chain.append(store.lattice_node(x, iy))
    chain.append(store.lattice_node(ix + step, iy))
    for y in grid.breaks_v(ix + step, iy, iy + step):
        chain.append(store.lattice_node(ix + step, y))
    chain.append(store.lattice_node(ix + step, iy + step))
    for x in reversed(grid.breaks_h(iy + step, ix, ix + step)):
        chain.append(store.lattice_node(x, iy + step))
    chain.append(store.lattice_node(ix, iy + step))
    for y in reversed(grid.breaks_v(ix, iy, iy + step)):
        chain.append(store.lattice_node(ix, y))
    return chain


class _CrossingCache:
    """Boundary crossings per edge, computed once and shared by both cells
    incident to the edge."""

    def __init__(self, store: _NodeStore, region: ImplicitRegion, tol: float,
                 edge_samples: int):
        self.store = store
        self.region = region
        self.tol = tol
        self.samples = edge_samples
        self.cache: dict[tuple[int, int], list[tuple[float, int, bool]]] = {}

    def crossings(self, a: int, b: int) -> list[tuple[float, int, bool]]:
        """Sorted (t, node id, outside-after) crossings on the segment a -> b."""
        key = (a, b) if a < b else (b, a)
        found = self.cache.get(key)
        if found is None:
            found = self._compute(*key)
            self.cache[key] = found
        if a < b:
            return found
        return [(1.0 - t, nid, not out) for t, nid, out in reversed(found)]

    def _compute(self, a: int, b: int) -> list[tuple[float, int, bool]]:
        pa = self.store.coords[a]
        pb = self.store.coords[b]
        ts = np.concatenate(([0.0], np.arange(1, self.samples + 1) / (self.samples + 1), [1.0]))
        pts = pa[None, :] + ts[:, None] * (pb - pa)[None, :]
        ds = self.region.distance(pts)
        strict = [k for k in range(len(ts)) if abs(ds[k]) > self.tol]
        out = []
        for i in range(len(strict) - 1):
            k0, k1 = strict[i], strict[i + 1]
            d0, d1 = ds[k0], ds[k1]
            if (d0 > 0) == (d1 > 0):
                continue
            if k1 - k0 > 1:
                # a sample sits (numerically) on the boundary: use it directly
                km = (k0 + k1) // 2
                x = pts[km]
                t = float(ts[km])
            else:
                x = intersect_edge(pts[k0], pts[k1], self.region)
                t = ts[k0] + (ts[k1] - ts[k0]) * (
                    np.hypot(*(x - pts[k0])) / np.hypot(*(pts[k1] - pts[k0]))
                )
            nid = self.store.new_node(x, PointClass.ON_BOUNDARY)
            out.append((float(t), nid, bool(d1 > 0)))
        return out


def _trim_cut_cell(
    store: _NodeStore,
    chain: list[int],
    crossings: _CrossingCache,
    key: Key,
    cell_area: float,
    degenerate_factor: float,
    touched: bool = False,
) -> list[ProtoCell]:
    """Clip a cut cell against the boundary.

    Walks the chain with on-boundary nodes treated as kept; each maximal
    inside run closes into one polygon with a single boundary chord. Multiple
    disjoint chords inside one cell (several separate boundary bites) are not
    representable and surface as a trimming/visibility error downstream.
    """
    events = []  # (kind, node_id); crossings carry their own direction
    n = len(chain)
    for k in range(n):
        a, b = chain[k], chain[(k + 1) % n]
        ka, kb = store.klass[a], store.klass[b]
        events.append(("node", a))
        xs = crossings.crossings(a, b)
        # virtual flips when the boundary passes through an on-boundary vertex:
        # the state right after a (or before b) comes from the first (last)
        # crossing direction, falling back to the other endpoint's class
        if ka is PointClass.ON_BOUNDARY:
            after_a_out = (not xs[0][2]) if xs else kb is PointClass.OUTSIDE
            if after_a_out:
                events.append(("flip_out", a))
        for t, nid, out_after in xs:
            events.append(("cross_out" if out_after else "cross_in", nid))
        if kb is PointClass.ON_BOUNDARY:
            before_b_out = xs[-1][2] if xs else ka is PointClass.OUTSIDE
            if before_b_out:
                events.append(("flip_in", b))

    flips = [i for i, (kind, _) in enumerate(events)
             if kind in ("cross_in", "cross_out", "flip_in", "flip_out")]
    if not flips:
        return [ProtoCell(chain=list(chain), closed=True, source=key, irregular=touched)]

    # rotate so the walk starts right after a transition to outside
    first_out = next(
        (i for i, (kind, _) in enumerate(events) if kind in ("cross_out", "flip_out")),
        None,
    )
    if first_out is None:
        return [ProtoCell(chain=list(chain), closed=True, source=key, irregular=touched)]
    events = events[first_out + 1 :] + events[: first_out + 1]

    polys: list[ProtoCell] = []
    run: list[int] | None = None
    inside = False
    for kind, nid in events:
        if kind == "node":
            if inside:
                if store.klass[nid] is PointClass.OUTSIDE:
                    raise TrimmingError(f"outside vertex inside a kept run of cell {key}")
                run.append(nid)
            else:
                if store.klass[nid] is PointClass.INSIDE:
                    raise TrimmingError(f"inside vertex in a dropped run of cell {key}")
        elif kind == "cross_in":
            inside = True
            run = [nid]
        elif kind == "flip_in":
            inside = True
            run = []
        elif kind in ("cross_out", "flip_out"):
            if not inside:
                raise TrimmingError(f"unmatched boundary exit in cell {key}")
            if kind == "cross_out":
                run.append(nid)
            if run:
                polys.append(_close_run(store, run, key, cell_area, degenerate_factor))
            inside = False
            run = None
    if inside and run:
        polys.append(_close_run(store, run, key, cell_area, degenerate_factor))
    return [p for p in polys if p is not None]


def _close_run(store, run, key, cell_area, degenerate_factor):
    uniq = []
    for nid in run:
        if not uniq or uniq[-1] != nid:
            uniq.append(nid)
    if len(uniq) >= 2 and uniq[0] == uniq[-1]:
        uniq = uniq[:-1]
    if len(uniq) < 3:
        return None
    pts = np.array([store.coords[n] for n in uniq])
    area = 0.5 * abs(geo._signed_area2(pts))
    if area < degenerate_factor * cell_area:
        return None
    chord = (uniq[-1], uniq[0])
    return ProtoCell(
        chain=uniq, closed=True, chords={chord}, irregular=True, source=key
    )


# ---------------------------------------------------------------------------
# Crack handling
# ---------------------------------------------------------------------------


@dataclass
class TipRecord:
    crack_index: int
    endpoint: int
    tip: np.ndarray
    angle: float
    length_a: float
    cell_index: int = -1
    mouth_plus: int = -1
    mouth_minus: int = -1
    exit_edges: list[tuple[int, float]] = field(default_factory=list)


class _CrackContext:
    """Shared duplication state for one crack: node copies and edge crossings."""

    def __init__(self, store: _NodeStore, crack: CrackPath, index: int, tol: float):
        self.store = store
        self.crack = crack
        self.index = index
        self.tol = tol
        self.extent = [0.0, crack.length]
        self.node_pairs: dict[int, tuple[int, int]] = {}
        self.edge_crossings: dict[tuple[int, int], list[tuple[float, int, int]]] = {}
        self.kink_pairs: dict[float, tuple[int, int] | None] = {}
        self.face_pairs: list[tuple[int, int]] = []

    def in_extent(self, t: float) -> bool:
        return self.extent[0] - self.tol <= t <= self.extent[1] + self.tol

    def pair_for_node(self, nid: int) -> tuple[int, int]:
        pair = self.node_pairs.get(nid)
        if pair is None:
            xy = self.store.coords[nid]
            t, s = self.crack.project(xy)
            if abs(s) > 0.0:
                xy = self.crack.point_at(t)  # snap onto the path
            plus = self.store.new_node(xy, self.store.klass[nid])
            minus = self.store.new_node(xy, self.store.klass[nid])
            pair = (plus, minus)
            self.node_pairs[nid] = pair
            self.face_pairs.append(pair)
        return pair

    def crossings_on_edge(self, a: int, b: int) -> list[tuple[float, int, int]]:
        """(t along a->b, plus id, minus id) for in-extent path crossings."""
        key = (a, b) if a < b else (b, a)
        found = self.edge_crossings.get(key)
        if found is None:
            found = self._compute(*key)
            self.edge_crossings[key] = found
        if a < b:
            return found
        return [(1.0 - t, p, m) for t, p, m in reversed(found)]

    def register_crossing(self, a: int, b: int, t: float, plus: int, minus: int):
        key = (a, b) if a < b else (b, a)
        tt = t if a < b else 1.0 - t
        self.edge_crossings.setdefault(key, []).append((tt, plus, minus))
        self.edge_crossings[key].sort()

    def _compute(self, a: int, b: int) -> list[tuple[float, int, int]]:
        pa = self.store.coords[a]
        pb = self.store.coords[b]
        out = []
        pts = self.crack.points
        for k in range(len(pts) - 1):
            hit = _segment_intersection(pa, pb, pts[k], pts[k + 1])
            if hit is None:
                continue
            t_edge, t_seg = hit
            t_path = self.crack._cum[k] + t_seg * self.crack._seg_len[k]
            if not self.in_extent(t_path):
                continue
            if t_edge < 1e-9 or t_edge > 1.0 - 1e-9:
                continue  # node hits are handled through pair_for_node
            xy = pa + t_edge * (pb - pa)
            plus = self.store.new_node(xy)
            minus = self.store.new_node(xy)
            self.face_pairs.append((plus, minus))
            out.append((float(t_edge), plus, minus))
        out.sort()
        return out


def _segment_intersection(a0, a1, b0, b1):
    """Intersection parameters (t along a, s along b) of two segments, or
    None when parallel or disjoint."""
    r = a1 - a0
    s = b1 - b0
    denom = r[0] * s[1] - r[1] * s[0]
    scale = max(abs(r[0]), abs(r[1]), abs(s[0]), abs(s[1]), 1e-300)
    if abs(denom) < 1e-14 * scale * scale:
        return None
    q = b0 - a0
    t = (q[0] * s[1] - q[1] * s[0]) / denom
    u = (q[0] * r[1] - q[1] * r[0]) / denom
    if -1e-12 <= t <= 1.0 + 1e-12 and -1e-12 <= u <= 1.0 + 1e-12:
        return float(np.clip(t, 0.0, 1.0)), float(np.clip(u, 0.0, 1.0))
    return None


def _merge_tip_cell(
    tree: QuadTree,
    store: _NodeStore,
    grid: _Grid,
    members: list[Key],
    crack: CrackPath,
    ctx: _CrackContext,
    endpoint: int,
    tip: np.ndarray,
    ahead: np.ndarray,
) -> ProtoCell:
    """Union the equal-level member leaves into one open cell around the tip.

    The outline is split at the crack-mouth crossing into an open chain whose
    free ends are two coincident nodes, one per crack face. L_A is the
    distance from the tip to the outline along the crack direction.
    """
    if any(tree.leaves[k].status is not CellStatus.INSIDE for k in members):
        raise GeometryError(
            f"tip-control circle at {tuple(tip)} is not strictly inside the domain"
        )
    level = members[0][0]
    if any(k[0] != level for k in members):
        raise MeshingError("tip members are not at a common level")
    cells = {(k[1], k[2]) for k in members}
    edges: dict[tuple[tuple[int, int], tuple[int, int]], None] = {}

    def toggle(u, v):
        if (v, u) in edges:
            del edges[(v, u)]
        else:
            edges[(u, v)] = None

    for i, j in sorted(cells):
        toggle((i, j), (i + 1, j))
        toggle((i + 1, j), (i + 1, j + 1))
        toggle((i + 1, j + 1), (i, j + 1))
        toggle((i, j + 1), (i, j))
    nxt = {}
    for u, v in edges:
        if u in nxt:
            raise MeshingError("tip-cell union outline is not a simple loop")
        nxt[u] = v
    start = min(nxt)
    loop = [start]
    while True:
        cur = nxt[loop[-1]]
        if cur == start:
            break
        loop.append(cur)
        if len(loop) > 4 * len(cells) + 4:
            raise MeshingError("tip-cell union outline failed to close")

    shift = store.level - level
    chain: list[int] = []
    for k in range(len(loop)):
        (ux, uy) = loop[k]
        (vx, vy) = loop[(k + 1) % len(loop)]
        gx, gy = ux << shift, uy << shift
        hx, hy = vx << shift, vy << shift
        chain.append(store.lattice_node(gx, gy))
        if gx == hx:
            ys = grid.breaks_v(gx, min(gy, hy), max(gy, hy))
            for y in ys if hy > gy else reversed(ys):
                chain.append(store.lattice_node(gx, y))
        else:
            xs = grid.breaks_h(gy, min(gx, hx), max(gx, hx))
            for x in xs if hx > gx else reversed(xs):
                chain.append(store.lattice_node(x, gy))

    # locate the crack-mouth crossing on the outline
    n = len(chain)
    mouth = None
    for k in range(n):
        a, b = chain[k], chain[(k + 1) % n]
        pa, pb = store.coords[a], store.coords[b]
        for kk in range(len(crack.points) - 1):
            hit = _segment_intersection(pa, pb, crack.points[kk], crack.points[kk + 1])
            if hit is None:
                continue
            t_edge, t_seg = hit
            t_path = crack._cum[kk] + t_seg * crack._seg_len[kk]
            tip_t = crack._cum[-1] if endpoint == 1 else 0.0
            if abs(t_path - tip_t) < 1e-9 * max(crack.length, 1.0):
                continue  # grazing the tip itself
            mouth = (k, float(t_edge), float(t_path))
            break
        if mouth is not None:
            break
    if mouth is None:
        raise MeshingError(
            f"crack does not cross the merged tip-cell outline at tip {tuple(tip)}"
        )
    k, t_edge, t_path = mouth
    a, b = chain[k], chain[(k + 1) % n]
    node_tol = 1e-7
    if t_edge < node_tol or t_edge > 1.0 - node_tol:
        hit_node = a if t_edge < node_tol else b
        plus, minus = ctx.pair_for_node(hit_node)
        split_at = k if t_edge < node_tol else (k + 1) % n
        open_chain = [None] + chain[split_at + 1 :] + chain[:split_at] + [None]
    else:
        xy = store.coords[a] + t_edge * (store.coords[b] - store.coords[a])
        plus = store.new_node(xy)
        minus = store.new_node(xy)
        ctx.face_pairs.append((plus, minus))
        ctx.register_crossing(a, b, t_edge, plus, minus)
        open_chain = [None] + chain[k + 1 :] + chain[: k + 1] + [None]

    # decide which copy starts the open chain: side of the first off-path node
    side = 0.0
    for nid in open_chain[1:-1]:
        side = crack.side_of(store.coords[nid])
        if abs(side) > ctx.tol:
            break
    if side == 0.0:
        raise MeshingError(f"cannot orient the tip-cell chain at {tuple(tip)}")
    start_id, end_id = (plus, minus) if side > 0 else (minus, plus)
    open_chain[0] = start_id
    open_chain[-1] = end_id

    # clip the splitting extent at the mouth
    if endpoint == 1:
        ctx.extent[1] = min(ctx.extent[1], t_path)
    else:
        ctx.extent[0] = max(ctx.extent[0], t_path)

    # distance to the outline along the crack direction, and the exit edges
    ray_far = tip + ahead * (4.0 * tree.size)
    best = None
    for k2 in range(len(open_chain) - 1):
        pa = store.coords[open_chain[k2]]
        pb = store.coords[open_chain[k2 + 1]]
        hit = _segment_intersection(tip, ray_far, pa, pb)
        if hit is None:
            continue
        t_ray, t_e = hit
        dist = t_ray * 4.0 * tree.size
        if dist < 1e-12:
            continue
        if best is None or dist < best[0]:
            best = (dist, k2, t_e)
    if best is None:
        raise MeshingError(f"crack-axis ray does not exit the tip cell at {tuple(tip)}")
    dist, k2, t_e = best
    # exits as (element index, eta); averaged over both elements at a node hit
    if t_e < node_tol and k2 > 0:
        exits = [(k2 - 1, 1.0), (k2, -1.0)]
    elif t_e > 1.0 - node_tol and k2 + 2 < len(open_chain):
        exits = [(k2, 1.0), (k2 + 1, -1.0)]
    else:
        exits = [(k2, 2.0 * t_e - 1.0)]

    record = TipRecord(
        crack_index=ctx.index,
        endpoint=endpoint,
        tip=tip.copy(),
        angle=float(math.atan2(ahead[1], ahead[0])),
        length_a=float(dist),
        mouth_plus=start_id,
        mouth_minus=end_id,
        exit_edges=exits,
    )
    return ProtoCell(chain=open_chain, closed=False, irregular=True, tip=record)


def _split_cell_by_crack(
    proto: ProtoCell, ctx: _CrackContext, store: _NodeStore
) -> list[ProtoCell]:
    """Split one polygon along the crack path, duplicating face nodes.

    Nodes on the path (inside the active extent) appear once per side; each
    transversal edge crossing creates a coincident node pair. Cells touched
    only through on-path nodes are re-pointed to the copy of their own side.
    """
    crack = ctx.crack
    coords = [store.coords[n] for n in proto.chain]
    sides = []
    for xy in coords:
        t, s = crack.project(xy)
        if abs(s) <= ctx.tol and ctx.in_extent(t):
            sides.append(0)
        else:
            sides.append(1 if s > 0 else -1)
    n = len(proto.chain)
    edge_cross = []
    any_cross = False
    for k in range(n if proto.closed else n - 1):
        a, b = proto.chain[k], proto.chain[(k + 1) % n]
        xs = ctx.crossings_on_edge(a, b)
        edge_cross.append(xs)
        if xs:
            any_cross = True
    has_on = any(s == 0 for s in sides)
    has_plus = any(s > 0 for s in sides)
    has_minus = any(s < 0 for s in sides)

    if not any_cross and not has_on:
        return [proto]
    if not any_cross and has_on and not (has_plus and has_minus):
        side = 1 if has_plus else -1
        new_chain = []
        for nid, s in zip(proto.chain, sides):
            if s == 0:
                pair = ctx.pair_for_node(nid)
                new_chain.append(pair[0] if side > 0 else pair[1])
            else:
                new_chain.append(nid)
        remap = dict(zip(proto.chain, new_chain))
        chords = {(remap[a], remap[b]) for a, b in proto.chords}
        return [
            ProtoCell(
                chain=new_chain,
                closed=proto.closed,
                chords=chords,
                irregular=True,
                source=proto.source,
                tip=proto.tip,
            )
        ]
    if not proto.closed:
        raise MeshingError("a crack path may not split an open (tip) cell")

    chains = {1: [], -1: []}
    flags = {1: [], -1: []}  # flag of the edge leaving each emitted node

    def emit(side, nid, flag):
        chains[side].append(nid)
        flags[side].append(flag)

    for k in range(n):
        nid = proto.chain[k]
        a, b = proto.chain[k], proto.chain[(k + 1) % n]
        edge_flag = (a, b) in proto.chords
        s = sides[k]
        s_next = sides[(k + 1) % n]
        xs = edge_cross[k]
        if len(xs) > 1:
            raise MeshingError(
                "a crack crosses one cell edge more than once; refine the mesh"
            )
        if s == 0:
            plus, minus = ctx.pair_for_node(nid)
            emit(1, plus, edge_flag and (not xs) and s_next >= 0)
            emit(-1, minus, edge_flag and (not xs) and s_next <= 0)
        elif s > 0:
            emit(1, nid, edge_flag)
        else:
            emit(-1, nid, edge_flag)
        for t, plus, minus in xs:
            # after the crossing the remainder of the edge belongs to s_after
            s_after = s_next if s_next != 0 else -s if s != 0 else 0
            if s_after == 0:
                raise MeshingError("cannot orient a crack crossing on a cell edge")
            emit(1, plus, edge_flag and s_after > 0)
            emit(-1, minus, edge_flag and s_after < 0)

    crack_pts_inside = _interior_kinks(proto, ctx, store)

    out = []
    for side in (1, -1):
        chain = chains[side]
        myflags = flags[side]
        if len(chain) < 3:
            continue
        if crack_pts_inside:
            chain, myflags = _insert_kinks(
                chain, myflags, crack_pts_inside, side, ctx, store
            )
        pts = np.array([store.coords[c] for c in chain])
        area2 = geo._signed_area2(pts)
        if abs(area2) < 1e-24:
            continue
        if area2 < 0:
            raise MeshingError("crack split produced a wrongly oriented sub-polygon")
        chords = {
            (chain[k], chain[(k + 1) % len(chain)])
            for k in range(len(chain))
            if myflags[k]
        }
        out.append(
            ProtoCell(chain=chain, closed=True, chords=chords, irregular=True,
                      source=proto.source)
        )
    if not out:
        raise MeshingError("crack split produced no valid sub-polygons")
    return out


def _interior_kinks(proto: ProtoCell, ctx: _CrackContext, store: _NodeStore):
    """Interior crack polyline vertices that fall strictly inside the polygon."""
    pts = ctx.crack.points
    if len(pts) <= 2:
        return []
    poly = np.array([store.coords[n] for n in proto.chain])
    out = []
    for k in range(1, len(pts) - 1):
        t = float(ctx.crack._cum[k])
        if ctx.in_extent(t) and _point_in_polygon(pts[k], poly):
            out.append((t, pts[k]))
    return out


def _insert_kinks(chain, myflags, kinks, side, ctx, store):
    """Insert duplicated crack kink vertices on the face edge between the two
    division nodes of a split chain."""
    division = [i for i, nid in enumerate(chain) if _is_face_node(nid, ctx)]
    if len(division) != 2:
        raise MeshingError(
            "crack kinks inside a cell need exactly two face nodes on the chain"
        )
    i0, i1 = division
    # the face edge runs from the later division node back to the earlier one
    t_last, _ = ctx.crack.project(store.coords[chain[i1]])
    t_first, _ = ctx.crack.project(store.coords[chain[i0]])
    ordered = sorted(kinks, key=lambda kv: kv[0], reverse=t_last > t_first)
    new_ids = []
    for t, xy in ordered:
        key = round(t, 12)
        reg = ctx.kink_pairs.setdefault(key, None)
        if reg is None:
            reg = (store.new_node(xy), store.new_node(xy))
            ctx.kink_pairs[key] = reg
            ctx.face_pairs.append(reg)
        new_ids.append(reg[0] if side > 0 else reg[1])
    chain = chain[: i1 + 1] + new_ids + chain[i1 + 1 :]
    myflags = myflags[: i1 + 1] + [False] * len(new_ids) + myflags[i1 + 1 :]
    return chain, myflags


def _is_face_node(nid: int, ctx: _CrackContext) -> bool:
    for pair in ctx.face_pairs:
        if nid in pair:
            return True
    return False


def _point_in_polygon(p, poly: np.ndarray) -> bool:
    x, y = p
    inside = False
    n = len(poly)
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        if (y0 > y) != (y1 > y):
            xt = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if x < xt:
                inside = not inside
    return inside


# ---------------------------------------------------------------------------
# Elements, signatures and the final mesh
# ---------------------------------------------------------------------------


@dataclass
class MeshEdge:
    order: int
    nodes: tuple[int, ...]
    exterior: bool = False


@dataclass
class MeshCell:
    index: int
    edges: list[MeshEdge]
    closed: bool
    centre: np.ndarray
    signature: tuple | None
    material_id: int = 0
    crack: TipRecord | None = None

    @property
    def chain(self) -> list[int]:
        out = [e.nodes[0] for e in self.edges]
        if not self.closed:
            out.append(self.edges[-1].nodes[-1])
        return out

    def boundary_nodes(self) -> list[int]:
        """All boundary node ids in traversal order (element interiors included)."""
        out: list[int] = []
        for e in self.edges:
            out.extend(e.nodes[:-1])
        if not self.closed:
            out.append(self.edges[-1].nodes[-1])
        return out


@dataclass
class Mesh:
    nodes: np.ndarray
    node_on_boundary: np.ndarray
    cells: list[MeshCell]
    cracks: list[TipRecord]
    face_pairs: list[tuple[int, int]]
    root_origin: np.ndarray
    root_size: float
    order: int

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def edge_use_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for cell in self.cells:
            for e in cell.edges:
                k = (e.nodes[0], e.nodes[-1])
                k = (min(k), max(k))
                counts[k] = counts.get(k, 0) + 1
        return counts

    def cell_area(self, cell: MeshCell, n_gauss: int = 8) -> float:
        """Area enclosed by the (possibly curved) cell boundary, integrated
        with the divergence theorem edge by edge."""
        from qtsbfem.sbfem import lagrange_shape, _gauss_legendre

        total = 0.0
        for e in cell.edges:
            pts = self.nodes[list(e.nodes)]
            xg, wg = _gauss_legendre(max(n_gauss, e.order + 2))
            for x, w in zip(xg, wg):
                N, dN = lagrange_shape(e.order, x)
                xx, yy = N @ pts
                xd, yd = dN @ pts
                total += 0.5 * (xx * yd - yy * xd) * w
        if not cell.closed and cell.crack is not None:
            # close the open chain through the scaling centre (the tip)
            first = self.nodes[cell.edges[0].nodes[0]]
            last = self.nodes[cell.edges[-1].nodes[-1]]
            c = cell.centre
            total += 0.5 * (last[0] * c[1] - last[1] * c[0])
            total += 0.5 * (c[0] * first[1] - c[1] * first[0])
        return total


def canonical_signature(proto: ProtoCell, store: _NodeStore, order: int):
    """Master-cell key of an untouched square cell, or None for irregular cells.

    The key is the per-side tuple of hanging-node fractions (sides ordered
    S, E, N, W from the SW corner) plus the element order. Under the 2:1 rule
    at most 16 distinct keys occur; the canonical (pattern, rotation) pair is
    derived for reporting.
    """
    if proto.irregular or not proto.closed or proto.source is None:
        return None
    ix0, iy0, step = store.corner_ints(proto.source)
    corners = {
        (ix0, iy0): 0,
        (ix0 + step, iy0): 1,
        (ix0 + step, iy0 + step): 2,
        (ix0, iy0 + step): 3,
    }
    rev = {v: k for k, v in corners.items()}
    sides: list[list[float]] = [[], [], [], []]
    side = -1
    for nid in proto.chain:
        if store.moved[nid]:
            return None
        latt = _lattice_of(store, nid)
        if latt is None:
            return None
        if latt in corners:
            expected = corners[latt]
            side += 1
            if expected != side % 4 or side > 3:
                return None
            continue
        if side < 0:
            return None
        a = np.array(rev[side % 4], dtype=float)
        b = np.array(rev[(side + 1) % 4], dtype=float)
        p = np.array(latt, dtype=float)
        denom = float(np.abs(b - a).max())
        frac = float(np.abs(p - a).max()) / denom
        sides[side % 4].append(round(frac, 12))
    if side != 3:
        return None
    return (tuple(tuple(s) for s in sides), order)


def _lattice_of(store: _NodeStore, nid: int):
    # reverse lookup is only needed for signature candidates; build lazily
    if not hasattr(store, "_rev"):
        store._rev = {v: k for k, v in store.lattice.items()}
    return store._rev.get(nid)


def signature_type_rotation(sig) -> tuple[tuple, int]:
    """Rotation-normalised (pattern, rotation) of a master-cell signature."""
    sides = sig[0]
    best = None
    for r in range(4):
        rot = tuple(sides[(k + r) % 4] for k in range(4))
        if best is None or rot < best[0]:
            best = (rot, r)
    return best


GL_CACHE: dict[int, np.ndarray] = {}


def _interior_fractions(order: int) -> np.ndarray:
    from qtsbfem.sbfem import gauss_lobatto

    gl = GL_CACHE.get(order)
    if gl is None:
        gl = 0.5 * (gauss_lobatto(order)[1:-1] + 1.0)
        GL_CACHE[order] = gl
    return gl


def attach_edge_elements(
    protos: list[ProtoCell],
    store: _NodeStore,
    region: ImplicitRegion,
    order: int,
    *,
    tol: float,
    grad_step: float,
) -> tuple[list[MeshCell], list[TipRecord]]:
    """Turn polygon chains into cells of order-p edge elements.

    Interior element nodes sit at Gauss-Lobatto fractions of each straight
    edge and are shared between the two incident cells; interior nodes of
    exterior edges whose end nodes lie on the domain boundary are projected
    onto the boundary (curved edges).
    """
    interior_reg: dict[tuple[int, int], tuple[int, ...]] = {}
    usage: dict[tuple[int, int], int] = {}
    cells: list[MeshCell] = []
    tips: list[TipRecord] = []
    fracs = _interior_fractions(order)

    for proto in protos:
        edges = []
        for a, b in proto.edge_pairs():
            key = (a, b) if a < b else (b, a)
            ids = interior_reg.get(key)
            if ids is None:
                pa, pb = store.coords[key[0]], store.coords[key[1]]
                ids = tuple(
                    store.new_node(pa + f * (pb - pa)) for f in fracs
                )
                interior_reg[key] = ids
            usage[key] = usage.get(key, 0) + 1
            seq = ids if a < b else tuple(reversed(ids))
            edges.append(MeshEdge(order=order, nodes=(a, *seq, b)))
        centre = _choose_centre(proto, store)
        cell = MeshCell(
            index=len(cells),
            edges=edges,
            closed=proto.closed,
            centre=centre,
            signature=canonical_signature(proto, store, order),
            crack=proto.tip,
        )
        if proto.tip is not None:
            proto.tip.cell_index = cell.index
            tips.append(proto.tip)
        cells.append(cell)

    # exterior flags and curved-edge projection
    for cell in cells:
        for e in cell.edges:
            key = (min(e.nodes[0], e.nodes[-1]), max(e.nodes[0], e.nodes[-1]))
            e.exterior = usage.get(key, 0) == 1
            if (
                e.exterior
                and e.order > 1
                and store.klass[e.nodes[0]] is PointClass.ON_BOUNDARY
                and store.klass[e.nodes[-1]] is PointClass.ON_BOUNDARY
            ):
                for nid in e.nodes[1:-1]:
                    d = sdf_eval(region, store.coords[nid])
                    if abs(d) > tol:
                        store.coords[nid] = project_to_boundary(
                            store.coords[nid], region, tol=tol, grad_step=grad_step
                        )
                    store.klass[nid] = PointClass.ON_BOUNDARY
    return cells, tips


def _choose_centre(proto: ProtoCell, store: _NodeStore) -> np.ndarray:
    """Scaling centre: the crack tip for tip cells, otherwise the vertex mean,
    falling back to a sampled kernel point when the mean cannot see the
    whole boundary."""
    if proto.tip is not None:
        return proto.tip.tip.copy()
    pts = np.array([store.coords[n] for n in proto.chain])
    mean = pts.mean(axis=0)

    def margin(c):
        rel = pts - c
        nxt = np.roll(rel, -1, axis=0)
        cross = rel[:, 0] * nxt[:, 1] - rel[:, 1] * nxt[:, 0]
        return float(cross.min())

    if margin(mean) > 0.0:
        return mean
    # sampled kernel search: blend the vertex mean toward each vertex midpoint
    best, best_m = None, 0.0
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    for fx in np.linspace(0.25, 0.75, 5):
        for fy in np.linspace(0.25, 0.75, 5):
            cand = lo + np.array([fx, fy]) * (hi - lo)
            m = margin(cand)
            if m > best_m:
                best, best_m = cand, m
    if best is None:
        raise MeshingError(
            f"no scaling centre sees the whole boundary of polygon {proto.chain}"
        )
    return best


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def build_mesh(
    region: ImplicitRegion,
    seeds: SeedCloud,
    cracks: list[CrackPath] | None = None,
    options: MeshingOptions | None = None,
) -> Mesh:
    """Run the full meshing pipeline and return the conforming polygon mesh."""
    cracks = list(cracks or [])
    opt = options or MeshingOptions()

    tree = init_root(region, max_depth=opt.max_depth)
    refine_by_seeds(tree, seeds, opt.s_max)
    balance(tree, opt.d_max)
    tip_members = equalise_tip_regions(tree, cracks, opt.d_max) if cracks else {}

    store = _NodeStore(tree)
    tol_on = opt.boundary_tol_factor * tree.size
    grad_step = opt.gradient_step_factor * tree.size
    proj_tol = opt.projection_tol_factor * tree.size

    classify_cells(tree, store, region, tol_on, opt.edge_samples)
    snap_vertices(
        tree, store, region, snap_ratio=opt.snap_ratio, tol=proj_tol, grad_step=grad_step
    )

    member_keys = {k for mem in tip_members.values() for k in mem}
    kept = [
        k
        for k in sorted(tree.leaves)
        if tree.leaves[k].status is not CellStatus.OUTSIDE
    ]
    grid = _Grid(tree, store, kept)
    crossings = _CrossingCache(store, region, tol_on, opt.edge_samples)

    protos: list[ProtoCell] = []
    for key in kept:
        if key in member_keys:
            continue
        chain = _leaf_chain(store, grid, key)
        status = tree.leaves[key].status
        touched = any(store.moved[n] for n in chain)
        if status is CellStatus.CUT:
            h = tree.cell_size(key)
            protos.extend(
                _trim_cut_cell(
                    store, chain, crossings, key, h * h, opt.degenerate_area_factor,
                    touched=touched,
                )
            )
        else:
            protos.append(ProtoCell(chain=chain, closed=True, irregular=touched, source=key))

    # crack tip cells, then path splitting, one crack at a time
    contexts: list[_CrackContext] = []
    for ci, crack in enumerate(cracks):
        ctx = _CrackContext(store, crack, ci, tol_on)
        contexts.append(ctx)
        for end, tip, ahead in crack.tips():
            mem = tip_members[(ci, end)]
            protos.append(
                _merge_tip_cell(tree, store, grid, mem, crack, ctx, end, tip, ahead)
            )
            for k in mem:
                tree.leaves[k].status = CellStatus.CRACK_TIP
    for ctx in contexts:
        crack_box = _crack_bbox(ctx)
        next_protos: list[ProtoCell] = []
        for proto in protos:
            if proto.tip is not None or not _bbox_overlap(proto, store, crack_box, ctx.tol):
                next_protos.append(proto)
                continue
            next_protos.extend(_split_cell_by_crack(proto, ctx, store))
        protos = next_protos

    cells, tips = attach_edge_elements(
        protos, store, region, opt.order, tol=proj_tol, grad_step=grad_step
    )

    face_pairs = [p for ctx in contexts for p in ctx.face_pairs]
    return _compact(store, cells, tips, face_pairs, tree, opt.order)


def _crack_bbox(ctx: _CrackContext):
    pts = ctx.crack.points
    return pts.min(axis=0), pts.max(axis=0)


def _bbox_overlap(proto: ProtoCell, store: _NodeStore, box, tol: float) -> bool:
    pts = np.array([store.coords[n] for n in proto.chain])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return bool(np.all(lo <= box[1] + tol) and np.all(hi >= box[0] - tol))


def _compact(store, cells, tips, face_pairs, tree, order) -> Mesh:
    remap: dict[int, int] = {}
    coords = []
    on_bnd = []

    def take(nid: int) -> int:
        new = remap.get(nid)
        if new is None:
            new = len(coords)
            remap[nid] = new
            coords.append(store.coords[nid])
            on_bnd.append(store.klass[nid] is PointClass.ON_BOUNDARY)
        return new

    for cell in cells:
        for e in cell.edges:
            e.nodes = tuple(take(n) for n in e.nodes)
    for tip in tips:
        tip.mouth_plus = remap.get(tip.mouth_plus, -1)
        tip.mouth_minus = remap.get(tip.mouth_minus, -1)
    pairs = [
        (remap[a], remap[b]) for a, b in face_pairs if a in remap and b in remap
    ]
    return Mesh(
        nodes=np.array(coords) if coords else np.zeros((0, 2)),
        node_on_boundary=np.array(on_bnd, dtype=bool),
        cells=cells,
        cracks=tips,
        face_pairs=pairs,
        root_origin=tree.origin.copy(),
        root_size=tree.size,
        order=order,
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_qpmesh(mesh: Mesh, fp) -> None:
    """Plain-text polygon mesh: QPMESH 1 header, node table, per-cell edge
    lists (order + node ids) and crack records."""
    w = fp.write
    w("QPMESH 1\n")
    w(f"{mesh.n_nodes}\n")
    for i, (x, y) in enumerate(mesh.nodes):
        w(f"{i} {x:.17g} {y:.17g}\n")
    w(f"{len(mesh.cells)}\n")
    for cell in mesh.cells:
        parts = ["closed" if cell.closed else "open", str(len(cell.edges))]
        for e in cell.edges:
            parts.append(str(e.order))
            parts.extend(str(n) for n in e.nodes)
        w(" ".join(parts) + "\n")
    w(f"{len(mesh.cracks)}\n")
    for t in mesh.cracks:
        w(
            f"tip {t.tip[0]:.17g} {t.tip[1]:.17g} axis {math.cos(t.angle):.17g} "
            f"{math.sin(t.angle):.17g} LA {t.length_a:.17g} cell {t.cell_index}\n"
        )


def write_vtk_mesh(mesh: Mesh, fp, point_vectors=None, cell_scalars=None) -> None:
    """Legacy ASCII VTK unstructured grid; polygons are fanned into triangles
    from the scaling centre for display only."""
    centres_base = mesh.n_nodes
    tris = []
    owner = []
    for cell in mesh.cells:
        chain = []
        for e in cell.edges:
            chain.extend(e.nodes[:-1])
        if not cell.closed:
            chain.append(cell.edges[-1].nodes[-1])
        cidx = centres_base + cell.index
        last = len(chain) if cell.closed else len(chain) - 1
        for k in range(last):
            tris.append((cidx, chain[k], chain[(k + 1) % len(chain)]))
            owner.append(cell.index)
    w = fp.write
    w("# vtk DataFile Version 3.0\n")
    w("qtsbfem mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n")
    npts = mesh.n_nodes + len(mesh.cells)
    w(f"POINTS {npts} double\n")
    for x, y in mesh.nodes:
        w(f"{x:.9g} {y:.9g} 0\n")
    for cell in mesh.cells:
        w(f"{cell.centre[0]:.9g} {cell.centre[1]:.9g} 0\n")
    w(f"CELLS {len(tris)} {4 * len(tris)}\n")
    for t in tris:
        w(f"3 {t[0]} {t[1]} {t[2]}\n")
    w(f"CELL_TYPES {len(tris)}\n")
    for _ in tris:
        w("5\n")
    if point_vectors is not None:
        w(f"POINT_DATA {npts}\n")
        w("VECTORS displacement double\n")
        for k in range(npts):
            vx, vy = point_vectors[k]
            w(f"{vx:.9g} {vy:.9g} 0\n")
    if cell_scalars is not None:
        w(f"CELL_DATA {len(tris)}\n")
        for name, values in cell_scalars.items():
            w(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for cidx in owner:
                w(f"{values[cidx]:.9g}\n")
