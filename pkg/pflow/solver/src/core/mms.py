"""Manufactured solutions u(t, x) with closed-form derivatives.

Spatial arrays follow the fe conventions: values (N, d), gradients (N, d, d)
with grad[..., c, j] = d_j u_c, second derivatives (N, d, d, d) with
hess[..., c, j, k] = d_k d_j u_c.
"""
from __future__ import annotations
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from core.interpolation import SmoothField
from core.structure import CLAMP, StructureParams, stress_derivative, sym
from utils.error_handler import ConfigError

SpaceTime = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ManufacturedSolution:
    name: str
    u: SpaceTime
    dt: SpaceTime
    grad: SpaceTime
    hess: SpaceTime
    zero_boundary: bool = True
    lower: Tuple[float, float] = (0.0, 0.0)
    size: float = 1.0

    def initial(self, x: np.ndarray) -> np.ndarray:
        return self.u(0.0, x)

    @property
    def boundary(self) -> Optional[SpaceTime]:
        """Dirichlet data for the lift; None when the solution vanishes on the boundary"""
        return None if self.zero_boundary else self.u


def _trig() -> ManufacturedSolution:
    s = SmoothField()
    return ManufacturedSolution(
        name='trig',
        u=lambda t, x: np.sin(t) * s(x),
        dt=lambda t, x: np.cos(t) * s(x),
        grad=lambda t, x: np.sin(t) * s.gradient(x),
        hess=lambda t, x: np.sin(t) * s.hessian(x),
    )


def _poly_parts(x):
    X, Y = x[..., 0], x[..., 1]
    q = 16 * X * (1 - X) * Y * (1 - Y)
    qx = 16 * (1 - 2 * X) * Y * (1 - Y)
    qy = 16 * X * (1 - X) * (1 - 2 * Y)
    qxx = -32 * Y * (1 - Y)
    qyy = -32 * X * (1 - X)
    qxy = 16 * (1 - 2 * X) * (1 - 2 * Y)
    return q, qx, qy, qxx, qxy, qyy


def _poly_value(x):
    q = _poly_parts(x)[0]
    return np.stack([q, np.zeros_like(q)], axis=-1)


def _poly_grad(x):
    _, qx, qy, _, _, _ = _poly_parts(x)
    out = np.zeros(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = qx
    out[..., 0, 1] = qy
    return out


def _poly_hess(x):
    _, _, _, qxx, qxy, qyy = _poly_parts(x)
    out = np.zeros(x.shape[:-1] + (2, 2, 2))
    out[..., 0, 0, 0] = qxx
    out[..., 0, 0, 1] = qxy
    out[..., 0, 1, 0] = qxy
    out[..., 0, 1, 1] = qyy
    return out


def _poly() -> ManufacturedSolution:
    return ManufacturedSolution(
        name='poly',
        u=lambda t, x: np.exp(-t) * _poly_value(x),
        dt=lambda t, x: -np.exp(-t) * _poly_value(x),
        grad=lambda t, x: np.exp(-t) * _poly_grad(x),
        hess=lambda t, x: np.exp(-t) * _poly_hess(x),
    )


def _affine() -> ManufacturedSolution:
    def grad(t, x):
        return np.exp(t) * np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    return ManufacturedSolution(
        name='affine',
        u=lambda t, x: np.exp(t) * np.asarray(x, dtype=float),
        dt=lambda t, x: np.exp(t) * np.asarray(x, dtype=float),
        grad=grad,
        hess=lambda t, x: np.zeros(x.shape[:-1] + (2, 2, 2)),
        zero_boundary=False,
        lower=(1.0, 1.0),
    )


CATALOG: Dict[str, Callable[[], ManufacturedSolution]] = {
    'trig': _trig,
    'poly': _poly,
    'affine': _affine,
}


def get_mms(name: str) -> ManufacturedSolution:
    try:
        return CATALOG[name]()
    except KeyError:
        raise ConfigError(f"Unknown manufactured solution '{name}' "
                          f"(choose from {', '.join(sorted(CATALOG))})")


def stress_divergence(params: StructureParams, grad: np.ndarray, hess: np.ndarray,
                      clamp: float = CLAMP) -> np.ndarray:
    """(div S(Du))_i = sum_j DS(Du)[d_j Du]_ij"""
    Du = sym(grad)
    d = grad.shape[-1]
    out = np.zeros(grad.shape[:-1])
    for j in range(d):
        out += stress_derivative(params, Du, sym(hess[..., j]), clamp=clamp)[..., :, j]
    return out


def forcing(params: StructureParams, mms: ManufacturedSolution, t: float,
            x: np.ndarray) -> np.ndarray:
    """f = d_t u - div S(Du)"""
    x = np.asarray(x, dtype=float)
    return mms.dt(t, x) - stress_divergence(params, mms.grad(t, x), mms.hess(t, x))


def forcing_fn(params: StructureParams, mms: ManufacturedSolution) -> SpaceTime:
    return lambda t, x: forcing(params, mms, t, x)
