from __future__ import annotations
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from utils.error_handler import DomainError


@dataclass(frozen=True)
class QuadratureRule:
    """Rule on the reference triangle {x, y >= 0, x + y <= 1}.

    points has shape (nq, 2), weights (nq,); weights sum to 1/2.
    """
    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def barycentric(self) -> np.ndarray:
        """(nq, 3) values of the P1 shape functions at the points"""
        x, y = self.points.T
        return np.column_stack([1.0 - x - y, x, y])

    @classmethod
    def for_degree(cls, degree: int) -> 'QuadratureRule':
        return _conical_rule(int(degree))


@lru_cache(maxsize=None)
def _conical_rule(degree: int) -> QuadratureRule:
    # collapsed product: Gauss-Jacobi(1, 0) absorbs the (1 - x) Jacobian of
    # the Duffy map (x, y) = (u, v (1 - u)), Gauss-Legendre handles v
    if degree < 0:
        raise DomainError(f"quadrature degree must be nonnegative, got {degree}", code='NUM_003')
    n = max(1, math.ceil((degree + 1) / 2))
    s, ws = special.roots_jacobi(n, 1.0, 0.0)
    r, wr = special.roots_legendre(n)
    u = 0.5 * (1.0 + s)
    wu = ws / 4.0
    v = 0.5 * (1.0 + r)
    wv = wr / 2.0

    U, V = np.meshgrid(u, v, indexing='ij')
    W = np.outer(wu, wv)
    points = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
    weights = W.ravel()
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(points=points, weights=weights, degree=degree)
