"""Fully implicit Euler in time with P1 elements in space.

Each step minimises the strictly convex energy

    J(w) = 1/(2 kappa) ||w - u_prev||^2 + int phi(|Dw|) + eps/2 ||Dw||^2 - (f(t_m), w)

over the free dofs by Newton's method with a backtracking line search on J.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from core.fe import (
    FeFunction, FeSpace, assemble_load, assemble_mass, assemble_stiffness,
    f_norm_sq, l2_project, scatter_vector, _scatter_matrix
)
from core.structure import StructureParams, _phi, inner, stress, stress_derivative, tensor_norm
from utils.config import solver_config
from utils.error_handler import DomainError, IndefiniteTangentError, SolverError
from utils.logger import get_logger

logger = get_logger(__name__)

TOL = float(solver_config.get('stepper.tol', 1e-10))
MAX_ITERATIONS = int(solver_config.get('stepper.max_iterations', 100))
MAX_BACKTRACKS = int(solver_config.get('stepper.max_backtracks', 60))
ARMIJO = float(solver_config.get('stepper.armijo', 1e-4))
DEGENERATE_EPSILON = float(solver_config.get('stepper.degenerate_epsilon', 1e-10))
REGULARIZE_DEGENERATE = bool(solver_config.get('stepper.regularize_degenerate', True))
RETRY_EPSILON = float(solver_config.get('stepper.retry_epsilon', 1e-8))

SpaceTimeField = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError("final time must be positive")
        if int(self.M) != self.M or self.M < 1:
            raise DomainError("step count must be a positive integer")

    @property
    def kappa(self) -> float:
        return self.T / self.M

    def t(self, m: int) -> float:
        return m * self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        return np.array([self.t(m) for m in range(self.M + 1)])


@dataclass
class StepReport:
    newton_iterations: int
    final_residual_norm: float
    line_search_backtracks: int
    step_energy_decrease: float
    energy_inequality_residual: float = 0.0
    energy_history: List[float] = field(default_factory=list)
    residual_history: List[float] = field(default_factory=list)
    regularized: bool = False
    epsilon: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'newton_iterations': self.newton_iterations,
            'final_residual_norm': self.final_residual_norm,
            'line_search_backtracks': self.line_search_backtracks,
            'step_energy_decrease': self.step_energy_decrease,
            'energy_inequality_residual': self.energy_inequality_residual,
            'residual_history': self.residual_history,
            'regularized': self.regularized,
            'epsilon': self.epsilon
        }


def effective_params(params: StructureParams,
                     regularize_degenerate: Optional[bool] = None) -> StructureParams:
    """Degenerate problems get the small linear perturbation unless disabled"""
    if regularize_degenerate is None:
        regularize_degenerate = REGULARIZE_DEGENERATE
    if regularize_degenerate and params.degenerate and params.epsilon == 0:
        return params.with_epsilon(DEGENERATE_EPSILON)
    return params


class StepProblem:
    """Energy, residual and tangent of one implicit Euler step"""

    def __init__(self, params: StructureParams, space: FeSpace, u_prev: FeFunction,
                 t: float, f: SpaceTimeField, kappa: float,
                 mass: Optional[sparse.spmatrix] = None,
                 boundary: Optional[SpaceTimeField] = None):
        if kappa <= 0:
            raise DomainError("time step must be positive")
        self.params = params
        self.space = space
        self.kappa = kappa
        self.t = t
        self.u_prev = u_prev.coefficients
        self.mass = assemble_mass(space) if mass is None else mass
        self.load = assemble_load(space, lambda x: f(t, x))
        self.free = space.free_dofs
        self.lift = np.zeros(space.num_dofs)
        if boundary is not None:
            self.lift[space.boundary_dofs] = space.vertex_values(
                lambda x: boundary(t, x))[space.boundary_dofs]

    def admissible(self, w: np.ndarray) -> np.ndarray:
        """Copy of w with the boundary dofs set to the lift"""
        out = np.array(w, dtype=float)
        out[self.space.boundary_dofs] = self.lift[self.space.boundary_dofs]
        return out

    def _strains(self, w: np.ndarray) -> np.ndarray:
        return self.space.sym_gradient(FeFunction(self.space, w))

    def energy(self, w: np.ndarray) -> float:
        diff = w - self.u_prev
        Dw = self._strains(w)
        n = tensor_norm(Dw)
        cell = _phi(self.params.p, self.params.delta, n) + 0.5 * self.params.epsilon * n ** 2
        return float(0.5 / self.kappa * diff @ (self.mass @ diff)
                     + self.space.mesh.volumes @ cell
                     - self.load @ w)

    def residual(self, w: np.ndarray) -> np.ndarray:
        """Gradient of the energy over all dofs"""
        S = stress(self.params, self._strains(w))
        local = np.einsum('k,kab,kiab->ki', self.space.mesh.volumes, S,
                          self.space.basis_sym_gradients)
        return (self.mass @ (w - self.u_prev)) / self.kappa + scatter_vector(self.space, local) - self.load

    def tangent(self, w: np.ndarray) -> sparse.csr_matrix:
        basis = self.space.basis_sym_gradients
        DS = stress_derivative(self.params, self._strains(w)[:, None], basis)
        local = np.einsum('k,kjab,kiab->kij', self.space.mesh.volumes, DS, basis)
        return self.mass / self.kappa + _scatter_matrix(self.space, local)

    def reduced(self, w: np.ndarray) -> Tuple[np.ndarray, sparse.csr_matrix]:
        free = self.free
        return self.residual(w)[free], self.tangent(w)[free][:, free]


def newton_system(params: StructureParams, space: FeSpace, u: FeFunction, u_prev: FeFunction,
                  kappa: float, f: SpaceTimeField, t_m: float,
                  boundary: Optional[SpaceTimeField] = None) -> Tuple[np.ndarray, sparse.csr_matrix]:
    """Residual and tangent restricted to the free dofs"""
    problem = StepProblem(params, space, u_prev, t_m, f, kappa, boundary=boundary)
    return problem.reduced(u.coefficients)


def step_energy(params: StructureParams, space: FeSpace, u: FeFunction, u_prev: FeFunction,
                kappa: float, f: SpaceTimeField, t_m: float) -> float:
    return StepProblem(params, space, u_prev, t_m, f, kappa).energy(u.coefficients)


def _newton(problem: StepProblem, initial: np.ndarray, tol: float,
            max_iterations: int, max_backtracks: int) -> Tuple[np.ndarray, StepReport]:
    free = problem.free
    w = problem.admissible(initial)
    J = problem.energy(w)
    R = problem.residual(w)[free]
    res = float(np.linalg.norm(R))
    energies = [J]
    residuals = [res]
    backtracks = 0
    iterations = 0
    J0 = J

    while res > tol:
        if iterations >= max_iterations:
            raise SolverError(
                f"Newton did not converge in {max_iterations} iterations (residual {res:.3e})",
                residual_history=residuals)
        A = problem.tangent(w)[free][:, free]
        try:
            step = splinalg.splu(sparse.csc_matrix(A)).solve(-R)
        except RuntimeError as e:
            raise IndefiniteTangentError(f"Singular Newton system: {e}", residual_history=residuals)
        slope = float(R @ step)
        if not np.all(np.isfinite(step)) or not slope < 0:
            raise IndefiniteTangentError("Newton direction is not a descent direction",
                                         residual_history=residuals)

        allowance = 10 * np.finfo(float).eps * max(1.0, abs(J))
        alpha = 1.0
        for _ in range(max_backtracks + 1):
            trial = w.copy()
            trial[free] += alpha * step
            J_trial = problem.energy(trial)
            if J_trial <= J + ARMIJO * alpha * slope + allowance:
                break
            alpha *= 0.5
            backtracks += 1
        else:
            raise SolverError("Line search failed to decrease the step energy",
                              residual_history=residuals)

        w, J = trial, J_trial
        R = problem.residual(w)[free]
        res = float(np.linalg.norm(R))
        iterations += 1
        energies.append(J)
        residuals.append(res)
        logger.debug(f"Newton {iterations}: J={J:.12e} |R|={res:.3e} alpha={alpha:g}")

    report = StepReport(
        newton_iterations=iterations,
        final_residual_norm=res,
        line_search_backtracks=backtracks,
        step_energy_decrease=J0 - J,
        energy_history=energies,
        residual_history=residuals,
        epsilon=problem.params.epsilon
    )
    return w, report


def implicit_step(params: StructureParams, space: FeSpace, u_prev: FeFunction, t_m: float,
                  f: SpaceTimeField, kappa: float, tol: float = TOL,
                  initial: Optional[FeFunction] = None,
                  boundary: Optional[SpaceTimeField] = None,
                  mass: Optional[sparse.spmatrix] = None,
                  max_iterations: int = MAX_ITERATIONS,
                  max_backtracks: int = MAX_BACKTRACKS,
                  regularize_degenerate: Optional[bool] = None) -> Tuple[FeFunction, StepReport]:
    """One step of the scheme; the Newton iteration starts from u_prev unless initial is given"""
    if tol <= 0:
        raise DomainError("tolerance must be positive")
    params = effective_params(params, regularize_degenerate)
    mass = assemble_mass(space) if mass is None else mass
    start = (initial or u_prev).coefficients

    problem = StepProblem(params, space, u_prev, t_m, f, kappa, mass=mass, boundary=boundary)
    regularized = False
    try:
        w, report = _newton(problem, start, tol, max_iterations, max_backtracks)
    except IndefiniteTangentError as e:
        retry = params.with_epsilon(max(params.epsilon, RETRY_EPSILON))
        logger.warning(f"{e}; retrying with epsilon={retry.epsilon:g}")
        problem = StepProblem(retry, space, u_prev, t_m, f, kappa, mass=mass, boundary=boundary)
        w, report = _newton(problem, start, tol, max_iterations, max_backtracks)
        regularized = True
    report.regularized = regularized

    # (d_t u, u) >= 1/2 d_t ||u||^2, so this is bounded by |R . u|
    stress_work = float(space.mesh.volumes @ inner(stress(problem.params, problem._strains(w)),
                                                   problem._strains(w)))
    norm_new = float(w @ (mass @ w))
    norm_old = float(problem.u_prev @ (mass @ problem.u_prev))
    report.energy_inequality_residual = (0.5 * (norm_new - norm_old) / kappa
                                         + stress_work - float(problem.load @ w))
    return FeFunction(space, w), report


@dataclass
class Trajectory:
    params: StructureParams
    grid: TimeGrid
    states: List[FeFunction]
    reports: List[StepReport]
    l2_norms: List[float]
    f_norms_sq: List[float]

    def __len__(self) -> int:
        return len(self.states)

    @property
    def energy_bound(self) -> float:
        """max_m ||u^m||^2 + kappa sum_m ||F(Du^m)||^2"""
        return max(n ** 2 for n in self.l2_norms) + self.grid.kappa * sum(self.f_norms_sq[1:])

    @property
    def newton_total(self) -> int:
        return sum(r.newton_iterations for r in self.reports)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'params': self.params.to_dict(),
            'T': self.grid.T,
            'M': self.grid.M,
            'steps': [r.to_dict() for r in self.reports],
            'l2_norms': self.l2_norms,
            'energy_bound': self.energy_bound,
            'newton_total': self.newton_total
        }


def run_trajectory(params: StructureParams, space: FeSpace, grid: TimeGrid,
                   u0: Callable[[np.ndarray], np.ndarray], f: SpaceTimeField,
                   tol: float = TOL, boundary: Optional[SpaceTimeField] = None,
                   observer: Optional[Callable[[int, float, FeFunction], None]] = None,
                   **step_options) -> Trajectory:
    """u^0 is the L2 projection of u0; each later state solves one implicit step"""
    mass = assemble_mass(space)
    lift0 = (lambda x: boundary(0.0, x)) if boundary is not None else None
    u = l2_project(space, u0, boundary=lift0)
    effective = effective_params(params, step_options.get('regularize_degenerate'))

    states = [u]
    reports: List[StepReport] = []
    norms = [float(np.sqrt(u.coefficients @ (mass @ u.coefficients)))]
    f_norms = [f_norm_sq(effective, space, u)]
    if observer is not None:
        observer(0, 0.0, u)

    for m in range(1, grid.M + 1):
        t_m = grid.t(m)
        try:
            u, report = implicit_step(params, space, u, t_m, f, grid.kappa, tol=tol,
                                      boundary=boundary, mass=mass, **step_options)
        except SolverError as e:
            logger.error(f"Failed to solve time step {m}: {e}")
            raise e.at_step(m)
        states.append(u)
        reports.append(report)
        norms.append(float(np.sqrt(u.coefficients @ (mass @ u.coefficients))))
        f_norms.append(f_norm_sq(effective, space, u))
        if observer is not None:
            observer(m, t_m, u)

    logger.debug(f"Trajectory finished: {grid.M} steps, "
                 f"{sum(r.newton_iterations for r in reports)} Newton iterations")
    return Trajectory(params=effective, grid=grid, states=states, reports=reports,
                      l2_norms=norms, f_norms_sq=f_norms)


def consistency_residual(params: StructureParams, space: FeSpace,
                         exact: SpaceTimeField, f: SpaceTimeField, grid: TimeGrid) -> np.ndarray:
    """Per-step residual of the scheme at the nodal interpolant of the exact solution,
    measured in the dual norm of the symmetric-gradient energy on the free dofs"""
    free = space.free_dofs
    stiffness = assemble_stiffness(space)[free][:, free]
    lu = splinalg.splu(sparse.csc_matrix(stiffness))
    mass = assemble_mass(space)
    out = []
    for m in range(1, grid.M + 1):
        prev = FeFunction(space, space.vertex_values(lambda x: exact(grid.t(m - 1), x)))
        current = space.vertex_values(lambda x: exact(grid.t(m), x))
        problem = StepProblem(params, space, prev, grid.t(m), f, grid.kappa, mass=mass)
        R = problem.residual(current)[free]
        out.append(float(np.sqrt(max(R @ lu.solve(R), 0.0))))
    return np.array(out)
