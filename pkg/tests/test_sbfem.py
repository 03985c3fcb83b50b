"""Tests for the per-cell scaled-boundary solution."""

import math

import numpy as np
import pytest
import scipy.linalg

from conftest import (
    open_square_crack_cell,
    random_star_polygon_cell,
    standard_material,
    unit_square_cell,
)
from qtsbfem.sbfem import (
    CellOperator,
    MaterialModel,
    ParameterError,
    SingularModeError,
    cell_from_chain,
    cell_stiffness,
    coefficient_matrices,
    displacement_at,
    elasticity_matrix,
    gauss_lobatto,
    hamiltonian,
    integration_constants,
    lagrange_shape,
    modal_decomposition,
    singular_modes,
    solve_cell,
    stress_at,
    stress_intensity_factors,
)


class TestLagrangeShape:
    def test_p1_midpoint(self):
        N, _ = lagrange_shape(1, 0.0)
        np.testing.assert_allclose(N, [0.5, 0.5])

    def test_p2_right_end(self):
        N, _ = lagrange_shape(2, 1.0)
        np.testing.assert_allclose(N, [0.0, 0.0, 1.0], atol=1e-14)

    def test_p4_kronecker_at_node(self):
        node = gauss_lobatto(4)[2]
        N, _ = lagrange_shape(4, node)
        expected = np.zeros(5)
        expected[2] = 1.0
        np.testing.assert_allclose(N, expected, atol=1e-14)

    def test_invalid_order(self):
        with pytest.raises(ParameterError):
            lagrange_shape(0, 0.0)

    def test_partition_of_unity(self):
        rng = np.random.default_rng(3)
        for p in range(1, 9):
            for eta in rng.uniform(-1, 1, size=50):
                N, dN = lagrange_shape(p, eta)
                assert abs(np.sum(N) - 1.0) < 1e-13
                assert abs(np.sum(dN)) < 1e-12


class TestElasticityMatrix:
    def test_plane_stress_value(self):
        D = elasticity_matrix(MaterialModel(E=100.0, nu=0.3))
        assert D[0, 0] == pytest.approx(100.0 / 0.91)

    def test_zero_poisson_diagonal(self):
        D = elasticity_matrix(MaterialModel(E=10.0, nu=0.0))
        assert D[0, 1] == 0.0
        assert D[0, 0] == pytest.approx(10.0)

    def test_symmetric_and_spd(self):
        for nu in (-0.4, 0.0, 0.25, 0.45):
            for mode in ("plane_stress", "plane_strain"):
                D = elasticity_matrix(MaterialModel(E=7.0, nu=nu, mode=mode))
                np.testing.assert_allclose(D, D.T)
                assert np.all(np.linalg.eigvalsh(D) > 0)

    def test_invalid_poisson(self):
        with pytest.raises(ParameterError):
            MaterialModel(E=1.0, nu=0.5)


def _oracle_coefficient_matrices(cell, material, n_gauss=40):
    """Independent reimplementation: very-high-order quadrature of the
    scaled-boundary integrands, written without reusing the module helpers."""
    D = material.constitutive() * material.thickness
    nd = cell.n_dof
    E0 = np.zeros((nd, nd))
    E1 = np.zeros((nd, nd))
    E2 = np.zeros((nd, nd))
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    for elem in cell.elements:
        rel = elem.coords - cell.centre
        p = elem.order
        nodes = gauss_lobatto(p)
        dofs = cell.element_dofs(elem)
        for eta, w in zip(xg, wg):
            # Lagrange values/derivatives from the product formula
            N = np.ones(p + 1)
            dN = np.zeros(p + 1)
            for i in range(p + 1):
                for j in range(p + 1):
                    if j != i:
                        N[i] *= (eta - nodes[j]) / (nodes[i] - nodes[j])
                term = 0.0
                for k in range(p + 1):
                    if k == i:
                        continue
                    prod = 1.0 / (nodes[i] - nodes[k])
                    for j in range(p + 1):
                        if j not in (i, k):
                            prod *= (eta - nodes[j]) / (nodes[i] - nodes[j])
                    term += prod
                dN[i] = term
            x, y = N @ rel
            xd, yd = dN @ rel
            J = x * yd - y * xd
            Nm = np.zeros((2, 2 * (p + 1)))
            Nm[0, 0::2] = N
            Nm[1, 1::2] = N
            Nd = np.zeros((2, 2 * (p + 1)))
            Nd[0, 0::2] = dN
            Nd[1, 1::2] = dN
            B1 = np.array([[yd, 0.0], [0.0, -xd], [-xd, yd]]) @ Nm / J
            B2 = np.array([[-y, 0.0], [0.0, x], [x, -y]]) @ Nd / J
            ix = np.ix_(dofs, dofs)
            E0[ix] += (B1.T @ D @ B1) * J * w
            E1[ix] += (B2.T @ D @ B1) * J * w
            E2[ix] += (B2.T @ D @ B2) * J * w
    return E0, E1, E2


class TestCoefficientMatrices:
    def test_e0_positive_definite(self):
        cell = unit_square_cell(p=1)
        E0, _, _ = coefficient_matrices(cell, standard_material())
        assert np.all(np.linalg.eigvalsh(E0) > 0)

    def test_e2_symmetric(self):
        cell = unit_square_cell(p=3, elems_per_side=2)
        _, _, E2 = coefficient_matrices(cell, standard_material())
        np.testing.assert_allclose(E2, E2.T, atol=1e-12)

    def test_against_independent_quadrature(self):
        cell = unit_square_cell(p=1)
        mat = MaterialModel(E=1.0, nu=0.0)
        E0, E1, E2 = coefficient_matrices(cell, mat)
        R0, R1, R2 = _oracle_coefficient_matrices(cell, mat)
        np.testing.assert_allclose(E0, R0, atol=1e-10)
        np.testing.assert_allclose(E1, R1, atol=1e-10)
        np.testing.assert_allclose(E2, R2, atol=1e-10)

    def test_random_polygons_invariants(self):
        rng = np.random.default_rng(11)
        mat = standard_material()
        for _ in range(100):
            cell = random_star_polygon_cell(rng)
            E0, _, E2 = coefficient_matrices(cell, mat)
            scale = np.linalg.norm(E0)
            assert np.min(np.linalg.eigvalsh(E0)) > -1e-10 * scale
            assert np.min(np.linalg.eigvalsh(E0)) > 0
            assert np.linalg.norm(E2 - E2.T) < 1e-10 * max(np.linalg.norm(E2), 1e-300)


class TestHamiltonian:
    def test_spectrum_pairs(self):
        cell = unit_square_cell(p=2)
        Z = hamiltonian(*coefficient_matrices(cell, standard_material()))
        lam = np.linalg.eigvals(Z)
        rho = np.max(np.abs(lam))
        for lv in lam:
            assert np.min(np.abs(lam + lv)) < 1e-8 * rho

    def test_zero_eigenvalues_of_closed_cell(self):
        # the translation pair appears with its logarithmic partners, giving
        # four near-zero eigenvalues in total; two are retained as rigid modes
        cell = unit_square_cell(p=1)
        Z = hamiltonian(*coefficient_matrices(cell, standard_material()))
        lam = np.linalg.eigvals(Z)
        near_zero = np.abs(lam) < 1e-6 * np.max(np.abs(lam))
        assert near_zero.sum() == 4
        basis = modal_decomposition(Z)
        assert np.sum(np.abs(basis.lam) < basis.zero_tol) == 2

    def test_trace_near_zero(self):
        cell = unit_square_cell(p=2, elems_per_side=2)
        Z = hamiltonian(*coefficient_matrices(cell, standard_material()))
        assert abs(np.trace(Z)) < 1e-9 * np.linalg.norm(Z)

    def test_spectrum_pairing_on_random_cells(self):
        rng = np.random.default_rng(5)
        mat = standard_material()
        for _ in range(20):
            cell = random_star_polygon_cell(rng, p=1)
            Z = hamiltonian(*coefficient_matrices(cell, mat))
            lam = np.linalg.eigvals(Z)
            rho = np.max(np.abs(lam))
            for lv in lam:
                assert np.min(np.abs(lam + lv)) < 1e-8 * rho


class TestModalDecomposition:
    def test_retained_count_unit_square(self):
        cell = unit_square_cell(p=1)
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, standard_material())))
        assert basis.n_modes == 8
        assert basis.n_discarded == 8

    def test_translations_retained(self):
        cell = unit_square_cell(p=2)
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, standard_material())))
        assert np.sum(np.abs(basis.lam) < basis.zero_tol) == 2
        np.testing.assert_allclose(basis.phi_u[:, 0].real[0::2], 1.0)
        np.testing.assert_allclose(basis.phi_q[:, :2], 0.0)

    def test_normalisation(self):
        cell = unit_square_cell(p=2)
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, standard_material())))
        for k in range(basis.n_modes):
            assert np.max(np.abs(basis.phi_u[:, k])) == pytest.approx(1.0, abs=1e-12)

    def test_crack_cell_partition(self):
        cell = open_square_crack_cell(p=2)
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, standard_material())))
        sing = basis.lam[(basis.lam.real > -1.0 + 0.05) & (np.abs(basis.lam) > basis.zero_tol)]
        assert len(sing) == 2


class TestCellStiffness:
    def test_three_rigid_modes(self):
        cell = unit_square_cell(p=2)
        K = CellOperator(cell, standard_material()).stiffness
        w = np.linalg.eigvalsh(K)
        assert np.sum(w < 1e-9 * w.max()) == 3

    def test_scale_invariance(self):
        mat = standard_material()
        base = CellOperator(unit_square_cell(p=2), mat).stiffness
        for alpha in (0.5, 2.0, 10.0):
            pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float) * alpha
            cell = cell_from_chain([alpha / 2, alpha / 2], pts, orders=2)
            K = CellOperator(cell, mat).stiffness
            assert np.linalg.norm(K - base) < 1e-9 * np.linalg.norm(base)

    def test_symmetry_before_symmetrisation(self):
        cell = unit_square_cell(p=2, elems_per_side=2)
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, standard_material())))
        Kc = scipy.linalg.solve(basis.phi_u.T, basis.phi_q.T).T.real
        assert np.linalg.norm(Kc - Kc.T) < 1e-8 * np.linalg.norm(Kc)

    def test_patch_forces(self):
        # u = (x, 0) on the boundary must produce the consistent nodal forces
        # of the constant stress state (sigma_xx, sigma_yy) = (D00, D10)
        mat = standard_material()
        cell = unit_square_cell(p=1)
        op = CellOperator(cell, mat)
        nodes = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        u_b = np.zeros(8)
        u_b[0::2] = nodes[:, 0]
        f = op.stiffness @ u_b
        D = mat.constitutive()
        sxx, syy = D[0, 0], D[1, 0]
        # exact edge loads: traction t = sigma . n on each unit edge, shared
        # half-and-half between the two end nodes of each p=1 element
        expected = np.zeros(8)
        normals = {(0, 1): (0, -1), (1, 2): (1, 0), (2, 3): (0, 1), (3, 0): (-1, 0)}
        for (i, j), n in normals.items():
            t = np.array([sxx * n[0], syy * n[1]])
            for k in (i, j):
                expected[2 * k : 2 * k + 2] += 0.5 * t
        np.testing.assert_allclose(f, expected, atol=1e-8 * abs(sxx))


class TestIntegrationConstants:
    def test_translation_hits_rigid_modes(self):
        cell = unit_square_cell(p=1)
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, standard_material())))
        u_b = np.tile([1.0, 0.0], 4)
        c = integration_constants(basis, u_b)
        assert np.max(np.abs(c[2:])) < 1e-8 * np.max(np.abs(c))

    def test_zero(self):
        cell = unit_square_cell(p=1)
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, standard_material())))
        c = integration_constants(basis, np.zeros(8))
        np.testing.assert_allclose(np.abs(c), 0.0, atol=1e-14)

    def test_boundary_round_trip(self):
        rng = np.random.default_rng(17)
        cell = unit_square_cell(p=2, elems_per_side=2)
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, standard_material())))
        u_b = rng.standard_normal(cell.n_dof)
        c = integration_constants(basis, u_b)
        for ke, elem in enumerate(cell.elements):
            for node_idx, eta in ((0, -1.0), (elem.order, 1.0)):
                u = displacement_at(cell, basis, c, 1.0, ke, eta)
                gid = elem.local[node_idx]
                np.testing.assert_allclose(
                    u, u_b[2 * gid : 2 * gid + 2], atol=1e-10 * max(1, np.abs(u_b).max())
                )


class TestFieldRecovery:
    def test_translation_everywhere(self):
        cell = unit_square_cell(p=2)
        sol = solve_cell(cell, standard_material(), np.tile([0.3, -0.2], cell.n_nodes))
        for xi, ke, eta in ((1.0, 0, 0.5), (0.4, 2, -0.3), (0.0, 1, 0.0)):
            np.testing.assert_allclose(sol.displacement(xi, ke, eta), [0.3, -0.2], atol=1e-10)

    def test_patch_stress_uniform(self):
        mat = standard_material()
        rng = np.random.default_rng(4)
        for _ in range(5):
            cell = random_star_polygon_cell(rng, p=2)
            coords = np.array(
                [elem.coords[k] for elem in cell.elements for k in range(elem.order)]
            )
            if not cell.closed:
                coords = np.vstack([coords, cell.elements[-1].coords[-1]])
            A = np.array([[0.3, 0.1], [-0.2, 0.5]])
            u_b = np.zeros(cell.n_dof)
            for elem in cell.elements:
                for k, gid in enumerate(elem.local):
                    u_b[2 * gid : 2 * gid + 2] = A @ elem.coords[k]
            sol = solve_cell(cell, mat, u_b)
            eps = np.array([A[0, 0], A[1, 1], A[0, 1] + A[1, 0]])
            sig_exact = mat.constitutive() @ eps
            for xi, ke, eta in ((0.7, 0, 0.2), (0.35, 1, -0.6), (0.9, 2, 0.9)):
                sig = sol.stress(xi, ke, eta)
                np.testing.assert_allclose(
                    sig, sig_exact, atol=1e-8 * max(1.0, np.abs(sig_exact).max())
                )

    def test_rigid_motion_zero_stress(self):
        mat = standard_material()
        cell = unit_square_cell(p=2)
        u_b = np.zeros(cell.n_dof)
        for elem in cell.elements:
            for k, gid in enumerate(elem.local):
                x, y = elem.coords[k]
                u_b[2 * gid] = 0.1 - 0.4 * y
                u_b[2 * gid + 1] = -0.2 + 0.4 * x
        sol = solve_cell(cell, mat, u_b)
        scale = np.linalg.norm(mat.constitutive())
        for xi, ke, eta in ((0.8, 0, 0.1), (0.25, 3, -0.8)):
            assert np.abs(sol.stress(xi, ke, eta)).max() < 1e-9 * scale


class TestSingularModes:
    def test_crack_eigenvalues_minus_half(self):
        cell = open_square_crack_cell(p=3, n_per_side=6)
        mat = standard_material()
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, mat)))
        sing = singular_modes(cell, basis, mat, length_a=1.0, angle=0.0)
        np.testing.assert_allclose(sing.lam.real, -0.5, atol=1e-3)
        np.testing.assert_allclose(sing.lam.imag, 0.0, atol=1e-3)

    def test_closed_cell_rejected(self):
        cell = unit_square_cell(p=2)
        mat = standard_material()
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, mat)))
        with pytest.raises(SingularModeError):
            singular_modes(cell, basis, mat, length_a=1.0, angle=0.0)

    def test_stress_scales_like_inverse_sqrt(self):
        # sampling oracle: sigma(xi)/sigma(4 xi) = 2 within 1% along the ray
        # ahead of the tip when only the singular modes participate
        mat = standard_material()
        cell = open_square_crack_cell(p=3, n_per_side=6)
        basis = modal_decomposition(hamiltonian(*coefficient_matrices(cell, mat)))
        sing = singular_modes(cell, basis, mat, length_a=1.0, angle=0.0)
        c = np.zeros(basis.n_modes, dtype=complex)
        c[sing.columns[0]] = 1.0
        c[sing.columns[1]] = 1.0
        # the +x ray exits mid-element on the right side; locate it
        ke = next(
            k for k, e in enumerate(cell.elements)
            if e.coords[0, 0] == 1.0 and e.coords[-1, 0] == 1.0
            and e.coords[0, 1] < 0 < e.coords[-1, 1]
        )
        eta = -2.0 * cell.elements[ke].coords[0, 1] / (
            cell.elements[ke].coords[-1, 1] - cell.elements[ke].coords[0, 1]
        ) - 1.0
        s1 = stress_at(cell, basis, c.real, 0.02, ke, eta, mat)
        s4 = stress_at(cell, basis, c.real, 0.08, ke, eta, mat)
        assert abs(s1[1] / s4[1] - 2.0) < 0.02


class TestStressIntensityFactors:
    def test_griffith(self, griffith_result):
        res = griffith_result
        kref = math.sqrt(math.pi * 1.0)
        assert len(res.sifs) == 2
        for tip in res.sifs:
            assert abs(tip.k1 / kref - 1.0) < 0.02
            assert abs(tip.k2) < 1e-3 * tip.k1

    def test_mode_one_symmetry(self, griffith_result):
        for tip in griffith_result.sifs:
            assert abs(tip.k2) < 1e-3 * tip.k1

    def test_displacement_correlation_cross_check(self, griffith_result):
        # independent estimate from the crack-mouth opening of the tip cell:
        # delta(r) = (kappa + 1) K_I / mu * sqrt(r / (2 pi))
        res = griffith_result
        mat = standard_material()
        rec = res.mesh.cracks[0]
        cellrec = res.system.records[rec.cell_index]
        op = cellrec.operator
        sol = op.solve(res.solution.u[cellrec.dofs])
        scell = op.cell
        mouth = scell.elements[0].coords[0]
        r_mouth = math.hypot(*(mouth - scell.centre))
        xi = 1e-4
        u_start = sol.displacement(xi, 0, -1.0)
        u_end = sol.displacement(xi, len(scell.elements) - 1, 1.0)
        jump = u_start - u_end
        # rotate the jump into crack-local axes; the opening is the normal part
        ca, sa = math.cos(rec.angle), math.sin(rec.angle)
        delta_n = abs(-sa * jump[0] + ca * jump[1])
        k_dc = delta_n * mat.shear_modulus / (mat.kolosov + 1.0) * math.sqrt(
            2.0 * math.pi / (xi * r_mouth)
        )
        k_direct = [t for t in res.sifs if np.allclose(t.tip, rec.tip)][0].k1
        assert abs(k_dc / k_direct - 1.0) < 0.01
