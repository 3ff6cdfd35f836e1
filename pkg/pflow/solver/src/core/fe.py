"""Vector-valued conforming P1 finite elements.

Degrees of freedom are interleaved per vertex: dof = d * vertex + component.
Callbacks take points of shape (N, d) and return values of shape (N, d)
(gradients: (N, d, d) with grad[..., c, j] = d_j u_c).
"""
from __future__ import annotations
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Optional, Union

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from core.mesh import Mesh
from core.quadrature import QuadratureRule
from core.structure import StructureParams, f_map, sym, tensor_norm
from utils.config import solver_config
from utils.error_handler import MeshError, SolverError
from utils.logger import get_logger

logger = get_logger(__name__)

QUAD_DEGREE = int(solver_config.get('fe.quad_degree', 5))
MASS_DEGREE = int(solver_config.get('fe.mass_degree', 2))

# reference gradients of the P1 shape functions 1 - x - y, x, y
_REF_GRADIENTS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])

Field = Callable[[np.ndarray], np.ndarray]


class FeSpace:
    """P1^d over a triangle mesh.

    With ``constrained=True`` the space is V_h: every dof on a boundary
    vertex is Dirichlet (held fixed, zero unless a lift is given).
    """

    def __init__(self, mesh: Mesh, constrained: bool = True):
        if mesh.dim != 2:
            raise MeshError("FeSpace supports triangle meshes only")
        self.mesh = mesh
        self.constrained = constrained
        self.d = mesh.dim

    @property
    def num_dofs(self) -> int:
        return self.d * self.mesh.num_vertices

    @cached_property
    def dirichlet_mask(self) -> np.ndarray:
        if not self.constrained:
            mask = np.zeros(self.num_dofs, dtype=bool)
        else:
            mask = np.repeat(self.mesh.boundary_vertex_flags, self.d)
        mask.setflags(write=False)
        return mask

    @cached_property
    def free_dofs(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_mask)

    @cached_property
    def boundary_dofs(self) -> np.ndarray:
        return np.flatnonzero(self.dirichlet_mask)

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        """(nc, 3d) in local order (vertex a, component c) -> a * d + c"""
        d = self.d
        return (d * self.mesh.cells[:, :, None] + np.arange(d)).reshape(self.mesh.num_cells, -1)

    @cached_property
    def shape_gradients(self) -> np.ndarray:
        """(nc, 3, d) physical gradients of the vertex shape functions"""
        return np.einsum('aj,kji->kai', _REF_GRADIENTS, self.mesh.inverse_jacobians)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """(nc, 3d, d, d) gradient of each local vector basis function e_c phi_a"""
        nc = self.mesh.num_cells
        d = self.d
        out = np.zeros((nc, 3, d, d, d))
        for c in range(d):
            out[:, :, c, c, :] = self.shape_gradients
        return out.reshape(nc, 3 * d, d, d)

    @cached_property
    def basis_sym_gradients(self) -> np.ndarray:
        return sym(self.basis_gradients)

    def quadrature_points(self, rule: QuadratureRule) -> np.ndarray:
        """(nc, nq, d) physical quadrature points"""
        corners = self.mesh.vertices[self.mesh.cells]
        return np.einsum('qa,kai->kqi', rule.barycentric, corners)

    def quadrature_weights(self, rule: QuadratureRule) -> np.ndarray:
        """(nc, nq) weights including |det B_K|"""
        return np.abs(np.linalg.det(self.mesh.jacobians))[:, None] * rule.weights[None, :]

    def zero(self) -> 'FeFunction':
        return FeFunction(self, np.zeros(self.num_dofs))

    def vertex_values(self, g: Field) -> np.ndarray:
        values = np.array(g(self.mesh.vertices), dtype=float)
        return values.reshape(self.mesh.num_vertices, self.d).ravel()

    # evaluation of FE functions

    def evaluate(self, u: 'FeFunction', rule: QuadratureRule) -> np.ndarray:
        """(nc, nq, d) values at the quadrature points"""
        nodal = u.nodal[self.mesh.cells]
        return np.einsum('qa,kac->kqc', rule.barycentric, nodal)

    def gradient(self, u: 'FeFunction') -> np.ndarray:
        """(nc, d, d) cellwise constant gradient"""
        nodal = u.nodal[self.mesh.cells]
        return np.einsum('kac,kaj->kcj', nodal, self.shape_gradients)

    def sym_gradient(self, u: 'FeFunction') -> np.ndarray:
        return sym(self.gradient(u))

    def sample(self, g: Union[Field, 'FeFunction'], rule: QuadratureRule) -> np.ndarray:
        """Values of a callback or FE function at the quadrature points"""
        if isinstance(g, FeFunction):
            return self.evaluate(g, rule)
        points = self.quadrature_points(rule)
        values = np.asarray(g(points.reshape(-1, self.d)), dtype=float)
        return values.reshape(points.shape[:2] + (self.d,))


@dataclass
class FeFunction:
    space: FeSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.num_dofs,):
            raise ValueError(f"expected {self.space.num_dofs} coefficients, "
                             f"got shape {self.coefficients.shape}")

    @property
    def nodal(self) -> np.ndarray:
        """(nv, d) vertex values"""
        return self.coefficients.reshape(-1, self.space.d)

    @property
    def in_vh(self) -> bool:
        return bool(np.all(self.coefficients[self.space.dirichlet_mask] == 0))

    def copy(self) -> 'FeFunction':
        return FeFunction(self.space, self.coefficients.copy())

    def __add__(self, other: 'FeFunction') -> 'FeFunction':
        return FeFunction(self.space, self.coefficients + other.coefficients)

    def __sub__(self, other: 'FeFunction') -> 'FeFunction':
        return FeFunction(self.space, self.coefficients - other.coefficients)

    def __mul__(self, scalar: float) -> 'FeFunction':
        return FeFunction(self.space, scalar * self.coefficients)

    __rmul__ = __mul__

    def __call__(self, rule: QuadratureRule) -> np.ndarray:
        return self.space.evaluate(self, rule)


# ---------------------------------------------------------------------------
# assembly

def _scatter_matrix(space: FeSpace, local: np.ndarray) -> sparse.csr_matrix:
    """Sum (nc, nl, nl) element matrices into a global CSR matrix"""
    dofs = space.cell_dofs
    nl = dofs.shape[1]
    rows = np.repeat(dofs, nl, axis=1).ravel()
    cols = np.tile(dofs, (1, nl)).ravel()
    matrix = sparse.coo_matrix((local.ravel(), (rows, cols)),
                               shape=(space.num_dofs, space.num_dofs))
    return matrix.tocsr()


def scatter_vector(space: FeSpace, local: np.ndarray) -> np.ndarray:
    """Sum (nc, nl) element vectors into a global vector"""
    return np.bincount(space.cell_dofs.ravel(), weights=local.ravel(),
                       minlength=space.num_dofs)


def assemble_mass(space: FeSpace, rule: Optional[QuadratureRule] = None) -> sparse.csr_matrix:
    """Full mass matrix over all dofs (restrict with space.free_dofs)"""
    rule = rule or QuadratureRule.for_degree(MASS_DEGREE)
    weights = space.quadrature_weights(rule)
    phi = rule.barycentric
    scalar = np.einsum('kq,qa,qb->kab', weights, phi, phi)
    d = space.d
    local = np.einsum('kab,ce->kacbe', scalar, np.eye(d)).reshape(
        space.mesh.num_cells, 3 * d, 3 * d)
    return _scatter_matrix(space, local)


def assemble_stiffness(space: FeSpace) -> sparse.csr_matrix:
    """sum_K |K| Dphi_I : Dphi_J, the symmetric-gradient Laplacian"""
    basis = space.basis_sym_gradients
    local = np.einsum('k,kiab,kjab->kij', space.mesh.volumes, basis, basis)
    return _scatter_matrix(space, local)


def assemble_load(space: FeSpace, g: Union[Field, FeFunction],
                  rule: Optional[QuadratureRule] = None) -> np.ndarray:
    """(g, e_c phi_a) for every dof"""
    rule = rule or QuadratureRule.for_degree(QUAD_DEGREE)
    values = space.sample(g, rule)
    weights = space.quadrature_weights(rule)
    local = np.einsum('kq,qa,kqc->kac', weights, rule.barycentric, values)
    return scatter_vector(space, local.reshape(space.mesh.num_cells, -1))


def solve_constrained(space: FeSpace, matrix: sparse.spmatrix, rhs: np.ndarray,
                      boundary_values: Optional[np.ndarray] = None) -> np.ndarray:
    """Solve matrix u = rhs on the free dofs with prescribed boundary dofs"""
    u = np.zeros(space.num_dofs)
    bdofs = space.boundary_dofs
    free = space.free_dofs
    if boundary_values is not None and bdofs.size:
        u[bdofs] = boundary_values[bdofs]
    if not free.size:
        return u
    reduced_rhs = rhs[free] - matrix[free][:, bdofs] @ u[bdofs] if bdofs.size else rhs[free]
    try:
        lu = splinalg.splu(sparse.csc_matrix(matrix[free][:, free]))
        u[free] = lu.solve(reduced_rhs)
    except RuntimeError as e:
        raise SolverError(f"Linear solve failed: {e}", code='SLV_003')
    if not np.all(np.isfinite(u)):
        raise SolverError("Linear solve produced non-finite values", code='SLV_003')
    return u


def l2_project(space: FeSpace, g: Union[Field, FeFunction],
               rule: Optional[QuadratureRule] = None,
               boundary: Optional[Field] = None) -> FeFunction:
    """L2 projection; on a constrained space the boundary dofs take the
    nodal values of ``boundary`` (zero by default)"""
    mass = assemble_mass(space)
    rhs = assemble_load(space, g, rule)
    lift = space.vertex_values(boundary) if boundary is not None else None
    return FeFunction(space, solve_constrained(space, mass, rhs, lift))


# ---------------------------------------------------------------------------
# interpolation

def interpolate_lagrange(space: FeSpace, g: Field,
                         zero_boundary: Optional[bool] = None) -> FeFunction:
    coefficients = space.vertex_values(g)
    if zero_boundary is None:
        zero_boundary = space.constrained
    if zero_boundary:
        coefficients[space.dirichlet_mask] = 0.0
    return FeFunction(space, coefficients)


def interpolate_clement(space: FeSpace, g: Union[Field, FeFunction],
                        rule: Optional[QuadratureRule] = None,
                        zero_boundary: Optional[bool] = None) -> FeFunction:
    """Vertex value = patchwise L2 projection of g onto affines, evaluated at the vertex.

    The affine basis on the vertex patch is (1, (x - z)/h_z) with h_z the
    largest cell diameter around z; its value at z is the first coefficient.
    """
    rule = rule or QuadratureRule.for_degree(QUAD_DEGREE)
    mesh = space.mesh
    d = space.d
    nv = mesh.num_vertices
    points = space.quadrature_points(rule)
    weights = space.quadrature_weights(rule)
    values = space.sample(g, rule)

    h_z = np.zeros(nv)
    np.maximum.at(h_z, mesh.cells.ravel(), np.repeat(mesh.diameters, d + 1))

    z = mesh.vertices[mesh.cells]
    psi = np.concatenate([
        np.ones(points.shape[:1] + (d + 1,) + points.shape[1:2] + (1,)),
        (points[:, None, :, :] - z[:, :, None, :]) / h_z[mesh.cells][:, :, None, None]
    ], axis=-1)

    gram_local = np.einsum('kq,kaqi,kaqj->kaij', weights, psi, psi)
    rhs_local = np.einsum('kq,kaqi,kqc->kaic', weights, psi, values)
    owners = mesh.cells.ravel()
    gram = np.stack([
        np.bincount(owners, weights=gram_local[..., i, j].ravel(), minlength=nv)
        for i in range(d + 1) for j in range(d + 1)
    ], axis=-1).reshape(nv, d + 1, d + 1)
    rhs = np.stack([
        np.bincount(owners, weights=rhs_local[..., i, c].ravel(), minlength=nv)
        for i in range(d + 1) for c in range(d)
    ], axis=-1).reshape(nv, d + 1, d)

    coeffs = np.linalg.solve(gram, rhs)
    coefficients = coeffs[:, 0, :].ravel()
    if zero_boundary is None:
        zero_boundary = space.constrained
    if zero_boundary:
        coefficients[space.dirichlet_mask] = 0.0
    return FeFunction(space, coefficients)


# ---------------------------------------------------------------------------
# error functionals and diagnostics

def _integrate_cells(space: FeSpace, integrand: np.ndarray, rule: QuadratureRule) -> np.ndarray:
    return np.einsum('kq,kq->k', space.quadrature_weights(rule), integrand)


def lp_norm(space: FeSpace, values: np.ndarray, rule: QuadratureRule, r: float = 2.0) -> float:
    """(int |values|^r)^(1/r) for values sampled at quadrature points (pointwise Frobenius)"""
    flat = values.reshape(values.shape[:2] + (-1,))
    magnitude = np.sqrt(np.sum(flat ** 2, axis=-1))
    return float(np.sum(_integrate_cells(space, magnitude ** r, rule)) ** (1.0 / r))


def error_l2(space: FeSpace, u_h: FeFunction, exact: Field,
             quad_degree: int = QUAD_DEGREE) -> float:
    rule = QuadratureRule.for_degree(quad_degree)
    return lp_norm(space, space.evaluate(u_h, rule) - space.sample(exact, rule), rule)


def error_f(params: StructureParams, space: FeSpace, u_h: FeFunction,
            exact_gradient: Field, quad_degree: int = QUAD_DEGREE) -> float:
    """||F(Du_h) - F(Du)||_2"""
    rule = QuadratureRule.for_degree(quad_degree)
    points = space.quadrature_points(rule)
    grad = np.asarray(exact_gradient(points.reshape(-1, space.d)), dtype=float)
    F_exact = f_map(params, grad.reshape(points.shape[:2] + (space.d, space.d)))
    F_h = f_map(params, space.gradient(u_h))[:, None, :, :]
    return lp_norm(space, F_h - F_exact, rule)


def f_norm_sq(params: StructureParams, space: FeSpace, u_h: FeFunction) -> float:
    """||F(Du_h)||_2^2 (exact for P1, Du_h is cellwise constant)"""
    F = f_map(params, space.gradient(u_h))
    return float(np.sum(space.mesh.volumes * tensor_norm(F) ** 2))


def l2_norm(space: FeSpace, u_h: FeFunction, mass: Optional[sparse.spmatrix] = None) -> float:
    mass = assemble_mass(space) if mass is None else mass
    c = u_h.coefficients
    return float(np.sqrt(max(c @ (mass @ c), 0.0)))


def inverse_estimate_ratio(space: FeSpace, u_h: FeFunction, quad_degree: int = 8) -> float:
    """max_K sup_K |u_h| / mean_K |u_h|; sup of |affine| is attained at a vertex"""
    rule = QuadratureRule.for_degree(quad_degree)
    sup = np.max(np.linalg.norm(u_h.nodal[space.mesh.cells], axis=-1), axis=1)
    magnitude = np.linalg.norm(space.evaluate(u_h, rule), axis=-1)
    mean = _integrate_cells(space, magnitude, rule) / space.mesh.volumes
    keep = mean > 0
    return float(np.max(sup[keep] / mean[keep])) if np.any(keep) else 0.0


def clement_stability_constant(space: FeSpace, w: Field, grad_w: Field,
                               quad_degree: int = 8) -> Dict[str, float]:
    """Largest ratio of mean_K |P_h w| to mean_{S_K} |w| + h_K mean_{S_K} |grad w|"""
    rule = QuadratureRule.for_degree(quad_degree)
    mesh = space.mesh
    Pw = interpolate_clement(space, w, rule)
    lhs = _integrate_cells(space, np.linalg.norm(space.evaluate(Pw, rule), axis=-1), rule)
    lhs = lhs / mesh.volumes

    points = space.quadrature_points(rule)
    grads = np.asarray(grad_w(points.reshape(-1, space.d)), dtype=float)
    grads = grads.reshape(points.shape[:2] + (-1,))
    w_abs = _integrate_cells(space, np.linalg.norm(space.sample(w, rule), axis=-1), rule)
    g_abs = _integrate_cells(space, np.linalg.norm(grads, axis=-1), rule)

    patches = mesh.patch_matrix.astype(bool).astype(float)
    patch_volume = patches @ mesh.volumes
    rhs = (patches @ w_abs + mesh.diameters * (patches @ g_abs)) / patch_volume
    keep = rhs > 0
    ratios = lhs[keep] / rhs[keep]
    return {
        'constant': float(np.max(ratios)) if ratios.size else 0.0,
        'mean_ratio': float(np.mean(ratios)) if ratios.size else 0.0,
        'cells': int(keep.sum())
    }


def mean_value_equivalence(params: StructureParams, space: FeSpace,
                           H: Callable[[np.ndarray], np.ndarray],
                           quad_degree: int = 8) -> np.ndarray:
    """Per-cell int_K |F(H) - <F(H)>_K|^2 / int_K |F(H) - F(<H>_K)|^2.

    The numerator never exceeds the denominator since the mean is the L2-best
    constant; the equivalence bounds the ratio away from zero.
    """
    rule = QuadratureRule.for_degree(quad_degree)
    weights = space.quadrature_weights(rule)
    points = space.quadrature_points(rule)
    d = space.d
    values = np.asarray(H(points.reshape(-1, d)), dtype=float).reshape(points.shape[:2] + (d, d))
    F = f_map(params, values)
    vol = space.mesh.volumes[:, None, None]
    F_mean = np.einsum('kq,kqij->kij', weights, F) / vol
    H_mean = np.einsum('kq,kqij->kij', weights, values) / vol
    numerator = np.einsum('kq,kq->k', weights, tensor_norm(F - F_mean[:, None]) ** 2)
    denominator = np.einsum('kq,kq->k', weights,
                            tensor_norm(F - f_map(params, H_mean)[:, None]) ** 2)
    keep = denominator > 0
    return numerator[keep] / denominator[keep]
