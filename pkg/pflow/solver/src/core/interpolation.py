"""Approximation-rate studies for the nodal and quasi-interpolation operators."""
from __future__ import annotations
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from core.fe import (
    FeSpace, interpolate_clement, interpolate_lagrange, lp_norm
)
from core.mesh import Mesh, refine, unit_square_mesh
from core.quadrature import QuadratureRule
from core.rates import ConvergenceTable
from core.structure import StructureParams, _phi, f_map, f_map_derivative, sym, tensor_norm
from utils.error_handler import ConfigError, DomainError
from utils.logger import get_logger

logger = get_logger(__name__)

SLOPE_TOLERANCE = 0.2
OPERATORS = {
    'clement': interpolate_clement,
    'lagrange': interpolate_lagrange,
}


def embedding_valid(ell: int, q: float, m: int, r: float, d: int = 2) -> bool:
    """Compactness of W^{ell,q} -> W^{m,r} on a bounded Lipschitz domain"""
    if q < 1 or r < 1:
        return False
    return ell > m and ell - m - d * max(0.0, 1.0 / q - 1.0 / r) > 0


def predicted_exponent(ell: int, q: float, r: float, d: int = 2) -> float:
    return ell + d * min(0.0, 1.0 / r - 1.0 / q)


class SmoothField:
    """amplitude * sin(k pi x) sin(k pi y) in both components; vanishes on the unit square boundary"""

    def __init__(self, amplitude: float = 1.0, frequency: int = 1):
        self.amplitude = amplitude
        self.k = math.pi * frequency
        self.name = f"smooth(a={amplitude},k={frequency})"

    def member(self, mesh: Mesh) -> 'SmoothField':
        return self

    def _trig(self, x):
        kx, ky = self.k * x[..., 0], self.k * x[..., 1]
        return np.sin(kx), np.cos(kx), np.sin(ky), np.cos(ky)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        sx, _, sy, _ = self._trig(x)
        s = self.amplitude * sx * sy
        return np.stack([s, s], axis=-1)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        sx, cx, sy, cy = self._trig(x)
        row = self.amplitude * self.k * np.stack([cx * sy, sx * cy], axis=-1)
        return np.stack([row, row], axis=-2)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        sx, cx, sy, cy = self._trig(x)
        a = self.amplitude * self.k ** 2
        block = np.stack([
            np.stack([-a * sx * sy, a * cx * cy], axis=-1),
            np.stack([a * cx * cy, -a * sx * sy], axis=-1),
        ], axis=-2)
        return np.stack([block, block], axis=-3)


def _bump_profile_norm(ell: int, q: float) -> float:
    """||grad^ell b||_q over the unit disk for b(x) = (1 - |x|^2)^4"""
    if ell == 1:
        def radial(rho):
            return 8 * rho * (1 - rho ** 2) ** 3
    elif ell == 2:
        def radial(rho):
            tangential = -8 * (1 - rho ** 2) ** 3
            normal = tangential + 48 * rho ** 2 * (1 - rho ** 2) ** 2
            return math.hypot(tangential, normal)
    else:
        raise DomainError("bump fields support ell in {1, 2}")
    value, _ = integrate.quad(lambda rho: radial(rho) ** q * rho, 0.0, 1.0,
                              epsabs=0.0, epsrel=1e-12, limit=200)
    return (2 * math.pi * value) ** (1.0 / q)


class Bump:
    """amplitude * (1 - |x - c|^2 / L^2)^4 along (1, 1)/sqrt(2); three times continuously differentiable"""

    def __init__(self, center: Sequence[float], radius: float, amplitude: float):
        self.center = np.asarray(center, dtype=float)
        self.radius = radius
        self.amplitude = amplitude
        self.direction = np.array([1.0, 1.0]) / math.sqrt(2.0)

    def _local(self, x):
        rho = (np.asarray(x, dtype=float) - self.center) / self.radius
        gap = np.maximum(1.0 - np.sum(rho ** 2, axis=-1), 0.0)
        return rho, gap

    def __call__(self, x: np.ndarray) -> np.ndarray:
        _, gap = self._local(x)
        return (self.amplitude * gap ** 4)[..., None] * self.direction

    def gradient(self, x: np.ndarray) -> np.ndarray:
        rho, gap = self._local(x)
        row = (-8 * self.amplitude / self.radius * gap ** 3)[..., None] * rho
        return self.direction[:, None] * row[..., None, :]

    def hessian(self, x: np.ndarray) -> np.ndarray:
        rho, gap = self._local(x)
        scale = self.amplitude / self.radius ** 2
        eye = np.eye(rho.shape[-1])
        block = scale * (-8 * (gap ** 3)[..., None, None] * eye
                         + 48 * (gap ** 2)[..., None, None] * rho[..., :, None] * rho[..., None, :])
        return self.direction[:, None, None] * block[..., None, :, :]


@dataclass
class BumpFamily:
    """Bumps of radius width_factor * (mesh side), centred on a vertex, with ||grad^ell g||_q = 1.

    The mesh family is self-similar around the centre, so the interpolation
    error scales exactly like a power of h.
    """
    ell: int
    q: float
    center: Sequence[float] = (0.5, 0.5)
    width_factor: float = 1.5

    @property
    def name(self) -> str:
        return f"bump(ell={self.ell},q={self.q})"

    def member(self, mesh: Mesh) -> Bump:
        d = mesh.dim
        radius = self.width_factor * mesh.h / math.sqrt(2.0)
        amplitude = radius ** (self.ell - d / self.q) / _bump_profile_norm(self.ell, self.q)
        return Bump(self.center, radius, amplitude)


def _resolve_order(ell: int, q: float, r: float, j_max: Optional[int], d: int) -> int:
    if j_max is None:
        valid = [m for m in (1, 0) if embedding_valid(ell, q, m, r, d)]
        if not valid:
            raise ConfigError(f"W^({ell},{q}) does not embed compactly into L^{r}",
                              code='CFG_003')
        return valid[0]
    if j_max not in (0, 1) or not embedding_valid(ell, q, j_max, r, d):
        raise ConfigError(f"W^({ell},{q}) does not embed compactly into W^({j_max},{r})",
                          code='CFG_003')
    return j_max


def interpolation_study(q: float, r: float, ell: int, levels: int = 4,
                        j_max: Optional[int] = None, base_n: Optional[int] = None,
                        field=None, operator: str = 'clement',
                        quad_degree: int = 8) -> ConvergenceTable:
    """Measure sum_{j <= j_max} h^j ||grad^j (g - P_h g)||_r over a refinement family.

    Without an explicit field a smooth trigonometric field is used when
    r <= q and the normalised bump family otherwise.
    """
    if ell not in (1, 2):
        raise ConfigError("ell must be 1 or 2 for P1 elements")
    if operator not in OPERATORS:
        raise ConfigError(f"Unknown interpolation operator: {operator}")
    d = 2
    j_max = _resolve_order(ell, q, r, j_max, d)
    if field is None:
        field = BumpFamily(ell, q) if r > q else SmoothField()
    if base_n is None:
        base_n = 8 if isinstance(field, BumpFamily) else 4

    predicted = predicted_exponent(ell, q, r, d)
    table = ConvergenceTable(['level', 'h', 'value'], meta={
        'ell': ell, 'q': q, 'r': r, 'j_max': j_max, 'd': d,
        'operator': operator, 'field': field.name, 'predicted': predicted
    })
    rule = QuadratureRule.for_degree(quad_degree)
    interpolate = OPERATORS[operator]

    for level, mesh in enumerate(refine(unit_square_mesh(base_n), levels)):
        space = FeSpace(mesh)
        g = field.member(mesh)
        Pg = interpolate(space, g)
        points = space.quadrature_points(rule).reshape(-1, d)
        shape = (mesh.num_cells, rule.size)

        value = lp_norm(space, space.sample(g, rule) - space.evaluate(Pg, rule), rule, r)
        if j_max >= 1:
            grad_g = np.asarray(g.gradient(points)).reshape(shape + (d, d))
            grad_err = grad_g - space.gradient(Pg)[:, None]
            value += mesh.h * lp_norm(space, grad_err, rule, r)
        table.add_row(level=level, h=mesh.h, value=value)
        logger.debug(f"interpolation level {level}: h={mesh.h:.4e} value={value:.6e}")

    table.add_slope_column('h', 'value')
    fit = table.fit('h', 'value', name='value_vs_h')
    table.meta['passed'] = fit.slope is not None and abs(fit.slope - predicted) <= SLOPE_TOLERANCE
    return table


def f_interpolation_check(params: StructureParams, levels: int = 3, base_n: int = 4,
                          v=None, w=None, operator: str = 'clement',
                          quad_degree: int = 8, slope_min: float = 0.85) -> ConvergenceTable:
    """||F(Dv) - F(D P_h v)||_2 against h, plus the constant of

        int phi_{|Dv|}(|D P_h v - D P_h w|) <= C (h^2 ||grad F(Dv)||^2 + ||F(Dv) - F(Dw)||^2)
    """
    if operator not in OPERATORS:
        raise ConfigError(f"Unknown interpolation operator: {operator}")
    v = v or SmoothField()
    w = w or SmoothField(amplitude=0.8, frequency=2)
    d = 2
    rule = QuadratureRule.for_degree(quad_degree)
    interpolate = OPERATORS[operator]
    table = ConvergenceTable(['level', 'h', 'f_error', 'lhs', 'rhs', 'constant'],
                             meta={'params': params.to_dict(), 'operator': operator,
                                   'v': v.name, 'w': w.name})

    for level, mesh in enumerate(refine(unit_square_mesh(base_n), levels)):
        space = FeSpace(mesh)
        shape = (mesh.num_cells, rule.size)
        points = space.quadrature_points(rule).reshape(-1, d)
        weights = space.quadrature_weights(rule)

        Dv = sym(np.asarray(v.gradient(points)).reshape(shape + (d, d)))
        Dw = sym(np.asarray(w.gradient(points)).reshape(shape + (d, d)))
        DPv = space.sym_gradient(interpolate(space, v))[:, None]
        DPw = space.sym_gradient(interpolate(space, w))[:, None]
        Fv = f_map(params, Dv)

        f_error = lp_norm(space, Fv - f_map(params, DPv), rule)
        lhs = float(np.sum(weights * _phi(params.p, params.delta + tensor_norm(Dv),
                                          tensor_norm(DPv - DPw))))

        hess = np.asarray(v.hessian(points)).reshape(shape + (d, d, d))
        grad_F_sq = sum(tensor_norm(f_map_derivative(params, Dv, sym(hess[..., k]))) ** 2
                        for k in range(d))
        rhs = (mesh.h ** 2 * float(np.sum(weights * grad_F_sq))
               + lp_norm(space, Fv - f_map(params, Dw), rule) ** 2)
        constant = lhs / rhs if rhs > 0 else 0.0
        table.add_row(level=level, h=mesh.h, f_error=f_error, lhs=lhs, rhs=rhs, constant=constant)

    table.add_slope_column('h', 'f_error')
    fit = table.fit('h', 'f_error', name='f_error_vs_h')
    constants = table.column('constant')
    table.meta.update({
        'max_constant': float(constants.max()),
        'min_constant': float(constants.min()),
        'passed': fit.at_least(slope_min)
    })
    return table
