import numpy as np
import pytest

from core.fe import (
    FeFunction, FeSpace, assemble_load, assemble_mass, assemble_stiffness,
    clement_stability_constant, error_f, error_l2, f_norm_sq, interpolate_clement,
    interpolate_lagrange, inverse_estimate_ratio, l2_norm, l2_project, mean_value_equivalence,
    solve_constrained
)
from core.interpolation import SmoothField
from core.mesh import Mesh, unit_square_mesh
from core.quadrature import QuadratureRule
from core.structure import StructureParams
from utils.error_handler import MeshError


def affine(x):
    return np.stack([1.0 + 2.0 * x[:, 0] - x[:, 1], 0.5 * x[:, 0] + 3.0 * x[:, 1]], axis=-1)


AFFINE_GRADIENT = np.array([[2.0, -1.0], [0.5, 3.0]])


def test_space_dimensions(space4):
    assert space4.num_dofs == 50
    assert len(space4.boundary_dofs) == 2 * 16
    assert len(space4.free_dofs) == 2 * 9
    assert space4.cell_dofs.shape == (32, 6)


def test_space_needs_triangles():
    tet = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 3]])
    with pytest.raises(MeshError):
        FeSpace(tet)


def test_function_shape_checked(space4):
    with pytest.raises(ValueError):
        FeFunction(space4, np.zeros(3))


class TestAssembly:
    def test_mass_integrates_constants(self, free_space4):
        M = assemble_mass(free_space4)
        ones = np.ones(free_space4.num_dofs)
        assert ones @ (M @ ones) == pytest.approx(2.0)
        assert abs(M - M.T).max() < 1e-15

    def test_stiffness_kernel_is_rigid_motions(self, free_space4):
        K = assemble_stiffness(free_space4)
        rotation = free_space4.vertex_values(lambda x: np.stack([-x[:, 1], x[:, 0]], axis=-1))
        translation = free_space4.vertex_values(lambda x: np.tile([1.0, -2.0], (len(x), 1)))
        assert np.abs(K @ rotation).max() < 1e-12
        assert np.abs(K @ translation).max() < 1e-12

    def test_load_of_constant(self, free_space4):
        load = assemble_load(free_space4, lambda x: np.tile([1.0, 0.0], (len(x), 1)))
        assert load[0::2].sum() == pytest.approx(1.0)
        assert np.abs(load[1::2]).max() == 0.0

    def test_constrained_solve_keeps_boundary(self, space4):
        M = assemble_mass(space4)
        lift = space4.vertex_values(affine)
        u = solve_constrained(space4, M, np.zeros(space4.num_dofs), lift)
        np.testing.assert_allclose(u[space4.boundary_dofs], lift[space4.boundary_dofs])


class TestProjections:
    def test_l2_projection_reproduces_affine(self, free_space4):
        u = l2_project(free_space4, affine)
        np.testing.assert_allclose(u.coefficients, free_space4.vertex_values(affine), atol=1e-12)

    def test_l2_projection_with_lift(self, space4):
        u = l2_project(space4, affine, boundary=affine)
        np.testing.assert_allclose(u.coefficients, space4.vertex_values(affine), atol=1e-12)

    def test_clement_reproduces_affine(self, free_space4):
        u = interpolate_clement(free_space4, affine)
        np.testing.assert_allclose(u.coefficients, free_space4.vertex_values(affine), atol=1e-10)

    def test_constrained_interpolants_vanish_on_boundary(self, space4):
        for interpolant in (interpolate_lagrange(space4, affine),
                            interpolate_clement(space4, affine)):
            assert interpolant.in_vh

    def test_lagrange_nodal_values(self, free_space4):
        u = interpolate_lagrange(free_space4, affine)
        np.testing.assert_allclose(u.nodal, affine(free_space4.mesh.vertices))


class TestNorms:
    def test_affine_errors_vanish(self, free_space4):
        u = interpolate_lagrange(free_space4, affine)
        assert error_l2(free_space4, u, affine) < 1e-13
        params = StructureParams(p=1.5, delta=0.1)
        exact_gradient = lambda x: np.broadcast_to(AFFINE_GRADIENT, (len(x), 2, 2))
        assert error_f(params, free_space4, u, exact_gradient) < 1e-13
        np.testing.assert_allclose(free_space4.gradient(u), np.broadcast_to(AFFINE_GRADIENT, (32, 2, 2)))

    def test_l2_error_is_second_order(self):
        field = SmoothField()
        errors = []
        for n in (8, 16, 32):
            space = FeSpace(unit_square_mesh(n))
            errors.append(error_l2(space, interpolate_lagrange(space, field), field))
        rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert np.all(rates > 1.9)

    def test_l2_norm_matches_quadrature(self, free_space4):
        u = interpolate_lagrange(free_space4, affine)
        zero = lambda x: np.zeros_like(x)
        assert l2_norm(free_space4, u) == pytest.approx(error_l2(free_space4, u, zero), rel=1e-12)

    def test_f_norm_linear_case(self, free_space4):
        u = interpolate_lagrange(free_space4, affine)
        sym_grad = 0.5 * (AFFINE_GRADIENT + AFFINE_GRADIENT.T)
        expected = np.sum(sym_grad ** 2)
        assert f_norm_sq(StructureParams(p=2.0), free_space4, u) == pytest.approx(expected)


class TestDiagnostics:
    def test_inverse_estimate_is_bounded(self):
        ratios = []
        for n in (4, 8, 16):
            space = FeSpace(unit_square_mesh(n))
            ratios.append(inverse_estimate_ratio(space, interpolate_lagrange(space, SmoothField())))
        assert all(1.0 <= r < 10.0 for r in ratios)

    def test_clement_stability(self):
        field = SmoothField(frequency=2)
        constants = []
        for n in (4, 8, 16):
            space = FeSpace(unit_square_mesh(n))
            result = clement_stability_constant(space, field, field.gradient)
            constants.append(result['constant'])
            assert result['cells'] > 0
        assert max(constants) < 10.0

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_mean_value_equivalence(self, p):
        params = StructureParams(p=p, delta=1e-2)
        space = FeSpace(unit_square_mesh(6))
        field = SmoothField()
        ratios = mean_value_equivalence(params, space, field.gradient)
        assert ratios.size > 0
        assert np.all(ratios <= 1.0 + 1e-10)
        assert np.all(ratios > 0.05)

    def test_quadrature_points_lie_in_cells(self, space4):
        rule = QuadratureRule.for_degree(3)
        points = space4.quadrature_points(rule)
        np.testing.assert_allclose(points.mean(axis=1), space4.mesh.barycenters, atol=0.1)
        assert space4.quadrature_weights(rule).sum() == pytest.approx(1.0)


@pytest.mark.parametrize("operator", [interpolate_lagrange, interpolate_clement])
def test_interpolants_are_linear(space4, operator):
    first = SmoothField()
    second = SmoothField(amplitude=0.3, frequency=2)
    combined = operator(space4, lambda x: first(x) + 2.0 * second(x))
    separate = operator(space4, first) + 2.0 * operator(space4, second)
    np.testing.assert_allclose(combined.coefficients, separate.coefficients, atol=1e-12)


def test_l2_projection_galerkin_orthogonality(space4):
    field = SmoothField(frequency=2)
    u = l2_project(space4, field)
    residual = assemble_mass(space4) @ u.coefficients - assemble_load(space4, field)
    assert np.abs(residual[space4.free_dofs]).max() < 1e-12
