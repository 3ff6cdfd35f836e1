"""Split-sample verification of the Young and shift-change inequalities.

A constant is learned as safety * sup of the relevant ratio over a seeded,
jittered logarithmic grid of normalised magnitudes; the inequality with that
constant is then checked on fresh random samples.
"""
from __future__ import annotations
from dataclasses import dataclass, asdict
from typing import Any, Dict, Optional

import numpy as np

from core.structure import (
    StructureParams, SCALES, _phi, f_map, random_tensor_pairs, shifted_conjugate,
    sym, tensor_norm
)
from utils.config import solver_config
from utils.error_handler import DomainError
from utils.logger import get_logger

logger = get_logger(__name__)

GRID_POINTS = int(solver_config.get('inequalities.grid_points', 201))
GRID_DECADES = float(solver_config.get('inequalities.grid_decades', 10))
SAFETY = float(solver_config.get('inequalities.safety', 2.0))
TEST_SAMPLES = int(solver_config.get('structure.samples', 10000))

# relative slack absorbing roundoff in the fresh-sample comparison
_ROUNDOFF = 1e-12


@dataclass
class SplitSampleReport:
    name: str
    constant: float
    grid_sup: float
    safety: float
    train_points: int
    test_points: int
    violations: int
    max_test_ratio: float
    seed: int

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out['passed'] = self.passed
        return out


def _log_grid(rng: np.random.Generator, points: int, decades: float) -> np.ndarray:
    exponents = np.linspace(-decades, decades, points)
    spacing = 2 * decades / max(points - 1, 1)
    exponents = exponents + rng.uniform(-0.25, 0.25, size=points) * spacing
    return 10.0 ** exponents


def _fresh_scalars(rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=count) * rng.choice(np.asarray(SCALES), size=count)


def _young_ratio(params: StructureParams, eps_y: float, shift, t, s) -> np.ndarray:
    """(t s - eps_y phi_a(t)) / (phi_a)*(s) with shift = delta + a"""
    lhs = t * s - eps_y * _phi(params.p, shift, t)
    conj = shifted_conjugate(replace_delta(params, 0.0), shift, s)
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(conj > 0, lhs / np.where(conj > 0, conj, 1.0), -np.inf)


def replace_delta(params: StructureParams, delta: float) -> StructureParams:
    return StructureParams(p=params.p, delta=delta, epsilon=params.epsilon)


def young_check(params: StructureParams, eps_y: float, seed: int = 0,
                n_test: int = TEST_SAMPLES, grid_points: int = GRID_POINTS,
                decades: float = GRID_DECADES, safety: float = SAFETY) -> SplitSampleReport:
    """t s <= eps_y phi_a(t) + c (phi_a)*(s) for all a, s, t >= 0.

    With b = delta + a the ratio only depends on (t/b, s/b^(p-1)), so the
    training grid is two-dimensional at b = 1.
    """
    if eps_y <= 0:
        raise DomainError("eps_y must be positive")
    rng = np.random.default_rng(seed)

    t_grid = _log_grid(rng, grid_points, decades)
    s_grid = _log_grid(rng, grid_points, decades)
    T, S = np.meshgrid(t_grid, s_grid, indexing='ij')
    grid_sup = float(np.max(_young_ratio(params, eps_y, 1.0, T, S)))
    grid_sup = max(grid_sup, np.finfo(float).tiny)
    constant = safety * grid_sup

    a = tensor_norm(sym(random_tensor_pairs(n_test, seed=seed + 1)[0]))
    t = _fresh_scalars(rng, n_test)
    s = _fresh_scalars(rng, n_test)
    shift = params.delta + a
    lhs = t * s
    rhs = (eps_y * _phi(params.p, shift, t)
           + constant * shifted_conjugate(replace_delta(params, 0.0), shift, s))
    bad = lhs > rhs * (1 + _ROUNDOFF)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), 0.0)

    report = SplitSampleReport(
        name='young', constant=constant, grid_sup=grid_sup, safety=safety,
        train_points=int(T.size), test_points=int(n_test), violations=int(bad.sum()),
        max_test_ratio=float(np.max(ratio)), seed=seed
    )
    logger.debug(f"Young check (p={params.p}, delta={params.delta}, eps={eps_y}): "
                 f"c={constant:.4g}, violations={report.violations}")
    return report


def _f_magnitude(p: float, delta: float, n) -> np.ndarray:
    return (delta + n) ** ((p - 2) / 2) * n


def shift_change_check(params: StructureParams, eps: float, seed: int = 0,
                       n_test: int = TEST_SAMPLES, grid_points: Optional[int] = None,
                       decades: float = 8.0, safety: float = SAFETY) -> SplitSampleReport:
    """phi_|Q|(t) <= c phi_|P|(t) + eps |F(Q) - F(P)|^2.

    Aligned tensors minimise |F(Q) - F(P)|, so the grid runs over the
    magnitudes (|P|, |Q|, t) normalised by delta (or by 1 when delta = 0).
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    if grid_points is None:
        grid_points = int(round(20 * decades)) + 1
    rng = np.random.default_rng(seed)
    p = params.p
    delta_n = 1.0 if params.delta > 0 else 0.0

    alphas = _log_grid(rng, grid_points, decades)
    B, T = np.meshgrid(_log_grid(rng, grid_points, decades),
                       _log_grid(rng, grid_points, decades), indexing='ij')
    phi_q = _phi(p, delta_n + B, T)
    f_q = _f_magnitude(p, delta_n, B)
    grid_sup = 0.0
    for alpha in alphas:
        gap = (f_q - _f_magnitude(p, delta_n, alpha)) ** 2
        ratio = (phi_q - eps * gap) / _phi(p, delta_n + alpha, T)
        grid_sup = max(grid_sup, float(np.max(ratio)))
    grid_sup = max(grid_sup, np.finfo(float).tiny)
    constant = safety * grid_sup

    P, Q = random_tensor_pairs(n_test, seed=seed + 1)
    t = _fresh_scalars(rng, n_test)
    lhs = _phi(p, params.delta + tensor_norm(sym(Q)), t)
    gap = tensor_norm(f_map(params, Q) - f_map(params, P)) ** 2
    rhs = constant * _phi(p, params.delta + tensor_norm(sym(P)), t) + eps * gap
    bad = lhs > rhs * (1 + _ROUNDOFF)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), 0.0)

    report = SplitSampleReport(
        name='shift_change', constant=constant, grid_sup=grid_sup, safety=safety,
        train_points=int(grid_points ** 3), test_points=int(n_test),
        violations=int(bad.sum()), max_test_ratio=float(np.max(ratio)), seed=seed
    )
    logger.debug(f"Shift change check (p={p}, delta={params.delta}, eps={eps}): "
                 f"c={constant:.4g}, violations={report.violations}")
    return report
