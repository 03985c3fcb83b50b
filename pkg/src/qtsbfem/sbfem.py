"""Per-cell scaled-boundary solution for 2D elastostatics.

Each polygon cell is described by its boundary only: a loop (or open chain,
for crack cells) of 1D line elements of order p, seen from a scaling centre
from which the whole boundary is visible. Radial behaviour is obtained
analytically from a quadratic matrix ODE in the radial coordinate xi
(xi = 0 at the scaling centre, xi = 1 on the boundary), reduced to an
eigenproblem of a Hamiltonian-structured matrix. Modes whose radial powers
stay finite at the centre are retained; they provide the stiffness matrix,
interior displacement/stress recovery and, for crack cells, the two singular
modes that carry the stress intensity factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg

__all__ = [
    "SBFEMError",
    "ParameterError",
    "VisibilityError",
    "ConditioningError",
    "PartitionError",
    "DecompositionError",
    "StiffnessError",
    "SingularModeError",
    "MaterialModel",
    "elasticity_matrix",
    "gauss_lobatto",
    "lagrange_shape",
    "CellElement",
    "SolverCell",
    "coefficient_matrices",
    "hamiltonian",
    "ModalBasis",
    "modal_decomposition",
    "cell_stiffness",
    "integration_constants",
    "displacement_at",
    "stress_at",
    "SingularSolution",
    "singular_modes",
    "stress_intensity_factors",
    "rotate_stress",
    "solve_cell",
]

# Classification tolerance for zero (translation) eigenvalues, relative to
# the spectral radius of the Hamiltonian matrix.
EIG_ZERO_FACTOR = 1e-6

# Singular crack modes are sought in (-1 + SEP, -EIG_ZERO_FACTOR); the gap
# keeps the exact -1 modes (rotation, uniform strain) out.
SINGULAR_SEPARATION = 0.05


class SBFEMError(RuntimeError):
    """Base class for cell-solution failures."""


class ParameterError(ValueError):
    """Invalid parameter (order, material constants, coordinates)."""


class VisibilityError(SBFEMError):
    """The boundary Jacobian is non-positive: the scaling centre does not
    see the whole boundary."""


class ConditioningError(SBFEMError):
    """A matrix involved in the cell solution is too ill-conditioned."""


class PartitionError(SBFEMError):
    """The eigenvalue spectrum did not split into the expected bounded and
    unbounded halves."""


class DecompositionError(SBFEMError):
    """Near-defective eigenbasis."""


class StiffnessError(SBFEMError):
    """Stiffness reality/symmetry residues exceeded tolerance."""


class SingularModeError(SBFEMError):
    """A crack cell did not produce exactly two singular modes."""


# ---------------------------------------------------------------------------
# Material
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaterialModel:
    """Isotropic linear-elastic material for plane stress or plane strain."""

    E: float
    nu: float
    mode: str = "plane_stress"
    thickness: float = 1.0

    def __post_init__(self):
        if not self.E > 0:
            raise ParameterError(f"Young's modulus must be > 0, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise ParameterError(f"Poisson ratio must be in (-1, 0.5), got {self.nu}")
        if self.mode not in ("plane_stress", "plane_strain"):
            raise ParameterError(f"unknown analysis mode {self.mode!r}")
        if not self.thickness > 0:
            raise ParameterError(f"thickness must be > 0, got {self.thickness}")

    def constitutive(self) -> np.ndarray:
        """3x3 constitutive matrix relating (eps_xx, eps_yy, gamma_xy) to
        (sigma_xx, sigma_yy, tau_xy)."""
        E, nu = self.E, self.nu
        if self.mode == "plane_stress":
            f = E / (1.0 - nu * nu)
            return f * np.array(
                [[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1.0 - nu)]]
            )
        f = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return f * np.array(
            [
                [1.0 - nu, nu, 0.0],
                [nu, 1.0 - nu, 0.0],
                [0.0, 0.0, 0.5 * (1.0 - 2.0 * nu)],
            ]
        )

    @property
    def shear_modulus(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def kolosov(self) -> float:
        """Kolosov constant: (3 - nu)/(1 + nu) in plane stress, 3 - 4 nu in
        plane strain."""
        if self.mode == "plane_stress":
            return (3.0 - self.nu) / (1.0 + self.nu)
        return 3.0 - 4.0 * self.nu


def elasticity_matrix(material: MaterialModel) -> np.ndarray:
    return material.constitutive()


# ---------------------------------------------------------------------------
# 1D spectral elements on the boundary
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def gauss_lobatto(p: int) -> np.ndarray:
    """Gauss-Lobatto nodes on [-1, 1] for an order-p element (p + 1 nodes)."""
    if p < 1:
        raise ParameterError(f"element order must be >= 1, got {p}")
    if p == 1:
        return np.array([-1.0, 1.0])
    coeffs = np.zeros(p + 1)
    coeffs[-1] = 1.0
    interior = np.sort(np.polynomial.legendre.legroots(np.polynomial.legendre.legder(coeffs)))
    nodes = np.concatenate(([-1.0], interior, [1.0]))
    # enforce exact symmetry of the node set
    nodes = 0.5 * (nodes - nodes[::-1])
    nodes.flags.writeable = False
    return nodes


@lru_cache(maxsize=None)
def _barycentric_weights(p: int) -> np.ndarray:
    nodes = gauss_lobatto(p)
    w = np.ones(p + 1)
    for i in range(p + 1):
        for j in range(p + 1):
            if i != j:
                w[i] /= nodes[i] - nodes[j]
    w.flags.writeable = False
    return w


def lagrange_shape(p: int, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Lagrange basis on Gauss-Lobatto nodes: values and derivatives at eta."""
    nodes = gauss_lobatto(p)
    w = _barycentric_weights(p)
    diff = eta - nodes
    hit = np.nonzero(np.abs(diff) < 1e-13)[0]
    if hit.size:
        # at a node: Kronecker values, differentiation-matrix row for dN
        i0 = int(hit[0])
        N = np.zeros(p + 1)
        N[i0] = 1.0
        dN = np.zeros(p + 1)
        for j in range(p + 1):
            if j != i0:
                dN[j] = (w[j] / w[i0]) / (nodes[i0] - nodes[j])
        dN[i0] = -np.sum(dN)
        return N, dN
    ratios = w / diff
    N = ratios / np.sum(ratios)
    s = np.sum(1.0 / diff)
    dN = N * (s - 1.0 / diff)
    # enforce the exact zero-sum identity of the derivative row
    dN -= np.sum(dN) * N
    return N, dN


@lru_cache(maxsize=None)
def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


# ---------------------------------------------------------------------------
# Cell geometry
# ---------------------------------------------------------------------------


@dataclass
class CellElement:
    """One boundary line element of a cell.

    ``coords`` holds the p + 1 nodal coordinates in traversal order;
    ``local`` maps them into the cell's boundary-node list.
    """

    order: int
    coords: np.ndarray
    local: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.local = np.asarray(self.local, dtype=int)
        if self.coords.shape != (self.order + 1, 2):
            raise ParameterError(
                f"element of order {self.order} needs {self.order + 1} nodes, "
                f"got {self.coords.shape}"
            )


@dataclass
class SolverCell:
    """Boundary-only view of one polygon cell, ready for the cell solution."""

    centre: np.ndarray
    elements: list[CellElement]
    closed: bool = True
    n_nodes: int = 0

    def __post_init__(self):
        self.centre = np.asarray(self.centre, dtype=float)
        if self.n_nodes == 0:
            self.n_nodes = int(max(e.local.max() for e in self.elements)) + 1

    @property
    def n_dof(self) -> int:
        return 2 * self.n_nodes

    def element_dofs(self, elem: CellElement) -> np.ndarray:
        dofs = np.empty(2 * len(elem.local), dtype=int)
        dofs[0::2] = 2 * elem.local
        dofs[1::2] = 2 * elem.local + 1
        return dofs


def cell_from_chain(centre, node_coords, orders=None, closed=True) -> SolverCell:
    """Build a SolverCell from end-node coordinates around the boundary.

    ``node_coords`` are the element end nodes in traversal order; each
    consecutive pair becomes one element of the given order, with interior
    nodes placed at Gauss-Lobatto positions on the straight segment.
    """
    pts = np.asarray(node_coords, dtype=float)
    m = len(pts)
    n_elem = m if closed else m - 1
    if orders is None:
        orders = [1] * n_elem
    elif np.isscalar(orders):
        orders = [int(orders)] * n_elem
    elements = []
    next_local = m
    for k in range(n_elem):
        a, b = pts[k], pts[(k + 1) % m]
        p = orders[k]
        gl = gauss_lobatto(p)
        coords = a[None, :] + 0.5 * (gl[:, None] + 1.0) * (b - a)[None, :]
        coords[0] = a
        coords[-1] = b
        local = np.empty(p + 1, dtype=int)
        local[0] = k
        local[-1] = (k + 1) % m if closed or k + 1 < m else k + 1
        if not closed:
            local[-1] = k + 1
        for i in range(1, p):
            local[i] = next_local
            next_local += 1
        elements.append(CellElement(p, coords, local))
    return SolverCell(centre=np.asarray(centre, float), elements=elements, closed=closed,
                      n_nodes=next_local)


# ---------------------------------------------------------------------------
# Coefficient matrices and the radial eigenproblem
# ---------------------------------------------------------------------------


def _element_kinematics(elem: CellElement, centre: np.ndarray, eta: float):
    """Shape matrices and boundary Jacobian of one element at local coord eta.

    Returns (Nmat, B1, B2, J) with Nmat the 2 x 2m displacement interpolation
    matrix and B1, B2 the two 3 x 2m strain-displacement factors of the
    scaled-boundary kinematics (coordinates measured from the scaling centre).
    """
    p = elem.order
    N, dN = lagrange_shape(p, eta)
    rel = elem.coords - centre
    x, y = N @ rel
    xd, yd = dN @ rel
    J = x * yd - y * xd
    m = p + 1
    Nmat = np.zeros((2, 2 * m))
    Nmat[0, 0::2] = N
    Nmat[1, 1::2] = N
    Nd = np.zeros((2, 2 * m))
    Nd[0, 0::2] = dN
    Nd[1, 1::2] = dN
    b1 = np.array([[yd, 0.0], [0.0, -xd], [-xd, yd]])
    b2 = np.array([[-y, 0.0], [0.0, x], [x, -y]])
    B1 = (b1 @ Nmat) / J
    B2 = (b2 @ Nd) / J
    return Nmat, B1, B2, J


def coefficient_matrices(
    cell: SolverCell, material: MaterialModel, n_gauss: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boundary coefficient matrices (E0, E1, E2) of a cell.

    Element-wise Gauss-Legendre quadrature (p + 2 points by default) of
    B1^T D B1 |J|, B2^T D B1 |J| and B2^T D B2 |J| assembled over the cell
    boundary. E0 is symmetric positive definite and E2 symmetric whenever
    the boundary is visible from the scaling centre (|J| > 0 everywhere).
    """
    D = material.constitutive() * material.thickness
    nd = cell.n_dof
    E0 = np.zeros((nd, nd))
    E1 = np.zeros((nd, nd))
    E2 = np.zeros((nd, nd))
    for ke, elem in enumerate(cell.elements):
        ng = n_gauss if n_gauss is not None else elem.order + 2
        xg, wg = _gauss_legendre(ng)
        dofs = cell.element_dofs(elem)
        m2 = len(dofs)
        e0 = np.zeros((m2, m2))
        e1 = np.zeros((m2, m2))
        e2 = np.zeros((m2, m2))
        for eta, w in zip(xg, wg):
            _, B1, B2, J = _element_kinematics(elem, cell.centre, eta)
            if not J > 0.0:
                raise VisibilityError(
                    f"non-positive boundary Jacobian ({J:.3e}) on element {ke}; "
                    "the scaling centre does not see the whole boundary"
                )
            wJ = w * J
            e0 += (B1.T @ D @ B1) * wJ
            e1 += (B2.T @ D @ B1) * wJ
            e2 += (B2.T @ D @ B2) * wJ
        ix = np.ix_(dofs, dofs)
        E0[ix] += e0
        E1[ix] += e1
        E2[ix] += e2
    E0 = 0.5 * (E0 + E0.T)
    E2 = 0.5 * (E2 + E2.T)
    return E0, E1, E2


def hamiltonian(E0: np.ndarray, E1: np.ndarray, E2: np.ndarray) -> np.ndarray:
    """Hamiltonian-structured coefficient matrix of the first-order radial ODE."""
    cond = np.linalg.cond(E0)
    if not cond < 1e14:
        raise ConditioningError(f"E0 condition number {cond:.3e} exceeds 1e14")
    nd = E0.shape[0]
    inv_E1T = scipy.linalg.solve(E0, E1.T, assume_a="pos")
    inv_I = scipy.linalg.solve(E0, np.eye(nd), assume_a="pos")
    Z = np.empty((2 * nd, 2 * nd))
    Z[:nd, :nd] = inv_E1T
    Z[:nd, nd:] = -inv_I
    Z[nd:, :nd] = E1 @ inv_E1T - E2
    Z[nd:, nd:] = -E1 @ inv_I
    return Z


@dataclass
class ModalBasis:
    """Retained (bounded) half of the radial eigen solution.

    Displacements inside the cell follow u(xi) = phi_u xi^(-lam) c; all
    retained eigenvalues have Re(lam) <= 0 so displacements stay finite at
    the scaling centre. The translation pair (lam = 0) is stored first with
    exact rigid-body eigenvectors; the discarded half (radially growing
    powers plus the logarithmic partners of the translations) is counted in
    ``n_discarded``.
    """

    lam: np.ndarray
    phi_u: np.ndarray
    phi_q: np.ndarray
    n_discarded: int
    zero_tol: float
    cond_phi_u: float

    @property
    def n_modes(self) -> int:
        return len(self.lam)

    @property
    def translation_slice(self) -> slice:
        return slice(0, 2)


def modal_decomposition(Z: np.ndarray, zero_factor: float = EIG_ZERO_FACTOR) -> ModalBasis:
    """Eigen-decompose the radial coefficient matrix and keep the bounded set.

    Strictly decaying modes (Re(lam) < -eps0) are kept as computed. The
    quadruple of near-zero eigenvalues (two rigid translations paired with
    their logarithmic partners, a defective block that plain eigensolvers
    cannot separate) is replaced by the two exact translation eigenvectors,
    which belong to the bounded set. Eigenvectors are scaled so that the
    largest-magnitude displacement entry equals one.
    """
    if not np.all(np.isfinite(Z)):
        raise PartitionError("non-finite entries in the radial coefficient matrix")
    nd = Z.shape[0] // 2
    lam, V = scipy.linalg.eig(Z)
    scale = float(np.max(np.abs(lam)))
    eps0 = zero_factor * scale
    zero_mask = np.abs(lam) < eps0
    neg_mask = (lam.real < -eps0) & ~zero_mask
    pos_mask = ~zero_mask & ~neg_mask
    n_zero, n_neg, n_pos = int(zero_mask.sum()), int(neg_mask.sum()), int(pos_mask.sum())
    if n_zero != 4 or n_neg != nd - 2 or n_pos != nd - 2:
        raise PartitionError(
            f"unexpected spectrum split: {n_neg} decaying / {n_zero} zero / "
            f"{n_pos} growing for {nd} boundary DOFs"
        )
    idx = np.nonzero(neg_mask)[0]
    key = np.lexsort((lam[idx].imag, -lam[idx].real))
    idx = idx[key]

    lam_n = np.concatenate(([0.0, 0.0], lam[idx]))
    phi_u = np.empty((nd, nd), dtype=complex)
    phi_q = np.empty((nd, nd), dtype=complex)
    phi_u[:, 0] = np.tile([1.0, 0.0], nd // 2)
    phi_u[:, 1] = np.tile([0.0, 1.0], nd // 2)
    phi_q[:, :2] = 0.0
    phi_u[:, 2:] = V[:nd, idx]
    phi_q[:, 2:] = V[nd:, idx]

    for k in range(2, nd):
        j = int(np.argmax(np.abs(phi_u[:, k])))
        s = phi_u[j, k]
        phi_u[:, k] /= s
        phi_q[:, k] /= s

    cond = float(np.linalg.cond(phi_u))
    if not cond < 1e12:
        raise DecompositionError(
            f"displacement mode matrix condition {cond:.3e} exceeds 1e12; the "
            "eigenbasis is near-defective (a block-Schur fallback would be needed)"
        )
    return ModalBasis(
        lam=lam_n,
        phi_u=phi_u,
        phi_q=phi_q,
        n_discarded=nd,
        zero_tol=eps0,
        cond_phi_u=cond,
    )


def cell_stiffness(basis: ModalBasis) -> np.ndarray:
    """Cell stiffness K = phi_q phi_u^{-1}, made real and symmetric.

    The imaginary residue and the pre-symmetrisation asymmetry must both be
    below 1e-8 relative; larger residues indicate a broken modal basis.
    """
    Kc = scipy.linalg.solve(basis.phi_u.T, basis.phi_q.T).T
    norm = np.linalg.norm(Kc)
    if norm == 0.0:
        return np.zeros_like(Kc.real)
    imag_res = np.linalg.norm(Kc.imag) / norm
    if not imag_res < 1e-8:
        raise StiffnessError(f"stiffness imaginary residue {imag_res:.3e} exceeds 1e-8")
    K = Kc.real
    asym = np.linalg.norm(K - K.T) / np.linalg.norm(K)
    if not asym < 1e-8:
        raise StiffnessError(f"stiffness asymmetry {asym:.3e} exceeds 1e-8")
    return 0.5 * (K + K.T)


def integration_constants(basis: ModalBasis, u_b: np.ndarray) -> np.ndarray:
    """Mode participation factors from boundary nodal displacements."""
    u_b = np.asarray(u_b, dtype=float)
    c = scipy.linalg.solve(basis.phi_u, u_b.astype(complex))
    res = np.linalg.norm(basis.phi_u @ c - u_b)
    ref = np.linalg.norm(u_b)
    if ref > 0 and not res < 1e-10 * max(ref, 1.0):
        raise ConditioningError(
            f"integration-constant residual {res:.3e} exceeds 1e-10 * |u_b|"
        )
    return c


def _radial_powers(basis: ModalBasis, xi: float, shift: float = 0.0) -> np.ndarray:
    """xi^(-lam - shift) for all retained modes, with the xi = 0 limit."""
    expo = -(basis.lam + shift)
    if xi == 0.0:
        if np.any(expo.real < -1e-12):
            raise ValueError(
                "field evaluation at the scaling centre requires all radial "
                "powers to be non-negative"
            )
        out = np.zeros(len(expo), dtype=complex)
        out[np.abs(expo) <= 1e-12] = 1.0
        return out
    if xi < 0.0 or xi > 1.0 + 1e-9:
        raise ValueError(f"radial coordinate must lie in [0, 1], got {xi}")
    return np.power(complex(xi), expo)


def displacement_at(
    cell: SolverCell,
    basis: ModalBasis,
    c: np.ndarray,
    xi: float,
    elem_idx: int,
    eta: float,
) -> np.ndarray:
    """Displacement vector at local coordinates (xi, element, eta)."""
    elem = cell.elements[elem_idx]
    N, _ = lagrange_shape(elem.order, eta)
    dofs = cell.element_dofs(elem)
    u_xi = basis.phi_u[dofs, :] @ (_radial_powers(basis, xi) * c)
    u = np.empty(2, dtype=complex)
    u[0] = N @ u_xi[0::2]
    u[1] = N @ u_xi[1::2]
    # reality check against the participation scale, not the (possibly
    # cancelling) local value
    scale = max(np.abs(u).max(), float(np.abs(c).max()), 1e-300)
    if np.abs(u.imag).max() > 1e-9 * scale:
        raise SBFEMError("displacement recovery left a complex residue")
    return u.real


def stress_modes(
    cell: SolverCell,
    basis: ModalBasis,
    elem_idx: int,
    eta: float,
    material: MaterialModel,
    columns: np.ndarray | None = None,
) -> np.ndarray:
    """Stress-mode matrix (3 x n_modes) at a boundary point.

    Row order (sigma_xx, sigma_yy, tau_xy); column k scales with
    xi^(-lam_k - 1) in the interior.
    """
    elem = cell.elements[elem_idx]
    _, B1, B2, _ = _element_kinematics(elem, cell.centre, eta)
    dofs = cell.element_dofs(elem)
    cols = np.arange(basis.n_modes) if columns is None else columns
    phi = basis.phi_u[np.ix_(dofs, cols)]
    D = material.constitutive()
    return D @ (-B1 @ (phi * basis.lam[cols][None, :]) + B2 @ phi)


def stress_at(
    cell: SolverCell,
    basis: ModalBasis,
    c: np.ndarray,
    xi: float,
    elem_idx: int,
    eta: float,
    material: MaterialModel,
) -> np.ndarray:
    """Stress components (sigma_xx, sigma_yy, tau_xy) at (xi, element, eta)."""
    if xi <= 0.0:
        raise ValueError("stress evaluation requires xi > 0")
    psi = stress_modes(cell, basis, elem_idx, eta, material)
    weights = _radial_powers(basis, xi, shift=1.0) * c
    sig = psi @ weights
    scale = max(
        np.abs(sig).max(), float(np.abs(psi).max() * np.abs(weights).max()), 1e-300
    )
    if np.abs(sig.imag).max() > 1e-8 * scale:
        raise SBFEMError("stress recovery left a complex residue")
    return sig.real


# ---------------------------------------------------------------------------
# Singular modes and stress intensity factors
# ---------------------------------------------------------------------------


@dataclass
class SingularSolution:
    """The two singular modes of a crack-tip cell.

    ``lam`` holds the two radial eigenvalues in (-1, 0); for a homogeneous
    isotropic crack both equal -1/2 up to discretisation error. ``length_a``
    converts xi to physical distance along the crack axis and ``angle`` is
    the crack-axis direction measured from the +x axis.
    """

    cell: SolverCell
    basis: ModalBasis
    columns: np.ndarray
    lam: np.ndarray
    length_a: float
    angle: float
    material: MaterialModel

    def stress_mode_at(self, elem_idx: int, eta: float) -> np.ndarray:
        return stress_modes(
            self.cell, self.basis, elem_idx, eta, self.material, columns=self.columns
        )


def singular_modes(
    cell: SolverCell,
    basis: ModalBasis,
    material: MaterialModel,
    length_a: float,
    angle: float,
) -> SingularSolution:
    """Select the two radially singular modes of an open (crack-tip) cell."""
    if cell.closed:
        raise SingularModeError("closed cells have no singular modes")
    re = basis.lam.real
    mask = (re > -1.0 + SINGULAR_SEPARATION) & (np.abs(basis.lam) > basis.zero_tol)
    cols = np.nonzero(mask)[0]
    if len(cols) != 2:
        raise SingularModeError(
            f"expected exactly 2 singular eigenvalues in (-1, 0), found {len(cols)}: "
            f"{np.round(basis.lam[cols], 6) if len(cols) else basis.lam[np.abs(basis.lam) < 1.0]}"
        )
    return SingularSolution(
        cell=cell,
        basis=basis,
        columns=cols,
        lam=basis.lam[cols],
        length_a=length_a,
        angle=angle,
        material=material,
    )


def rotate_stress(sig, angle: float):
    """Rotate stress components (sigma_xx, sigma_yy, tau_xy) into a frame
    whose x axis makes ``angle`` with the global x axis."""
    c, s = math.cos(angle), math.sin(angle)
    sxx, syy, txy = sig
    return np.array(
        [
            c * c * sxx + s * s * syy + 2.0 * c * s * txy,
            s * s * sxx + c * c * syy - 2.0 * c * s * txy,
            -c * s * sxx + c * s * syy + (c * c - s * s) * txy,
        ]
    )


def stress_intensity_factors(
    sing: SingularSolution,
    c: np.ndarray,
    exit_points: list[tuple[int, float]],
) -> tuple[float, float]:
    """Mode I/II stress intensity factors of a crack-tip cell.

    ``exit_points`` are the (element, eta) locations where the ray from the
    tip along the crack axis crosses the cell boundary; when the ray exits
    at a shared node both incident elements are passed and averaged. The
    opening/sliding factors follow from the singular stress modes evaluated
    there, rotated into crack-local axes and scaled by sqrt(2 pi L_A).
    """
    if not exit_points:
        raise SingularModeError("no boundary exit point for the crack-axis ray")
    c_s = c[sing.columns]
    acc = np.zeros(3)
    for elem_idx, eta in exit_points:
        psi = sing.stress_mode_at(elem_idx, eta)
        sig = psi @ c_s
        scale = max(
            np.abs(sig).max(), float(np.abs(psi).max() * np.abs(c_s).max()), 1e-300
        )
        if np.abs(sig.imag).max() > 1e-6 * scale:
            raise SingularModeError("singular stress evaluation left a complex residue")
        acc += rotate_stress(sig.real, sing.angle)
    acc /= len(exit_points)
    factor = math.sqrt(2.0 * math.pi * sing.length_a)
    return factor * acc[1], factor * acc[2]


# ---------------------------------------------------------------------------
# Convenience wrapper
# ---------------------------------------------------------------------------


@dataclass
class CellSolution:
    """Solved state of one cell: modal basis plus participation factors."""

    cell: SolverCell
    basis: ModalBasis
    material: MaterialModel
    c: np.ndarray

    def displacement(self, xi, elem_idx, eta):
        return displacement_at(self.cell, self.basis, self.c, xi, elem_idx, eta)

    def stress(self, xi, elem_idx, eta):
        return stress_at(self.cell, self.basis, self.c, xi, elem_idx, eta, self.material)


@dataclass
class CellOperator:
    """Cached per-cell pipeline: coefficient matrices -> modes -> stiffness."""

    cell: SolverCell
    material: MaterialModel
    n_gauss: int | None = None
    _basis: ModalBasis | None = field(default=None, repr=False)
    _K: np.ndarray | None = field(default=None, repr=False)

    @property
    def basis(self) -> ModalBasis:
        if self._basis is None:
            E0, E1, E2 = coefficient_matrices(self.cell, self.material, self.n_gauss)
            self._basis = modal_decomposition(hamiltonian(E0, E1, E2))
        return self._basis

    @property
    def stiffness(self) -> np.ndarray:
        if self._K is None:
            self._K = cell_stiffness(self.basis)
        return self._K

    def solve(self, u_b: np.ndarray) -> CellSolution:
        c = integration_constants(self.basis, u_b)
        return CellSolution(self.cell, self.basis, self.material, c)


def solve_cell(cell: SolverCell, material: MaterialModel, u_b, n_gauss=None) -> CellSolution:
    """One-shot cell solution from prescribed boundary displacements."""
    return CellOperator(cell, material, n_gauss).solve(np.asarray(u_b, float))
