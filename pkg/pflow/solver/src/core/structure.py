"""Constitutive algebra for stresses with (p, delta)-structure.

Tensors are numpy arrays of shape (..., d, d); every kernel broadcasts over
the leading axes so the finite element code can evaluate whole meshes at once.
"""
from __future__ import annotations
from dataclasses import dataclass, field, replace, asdict
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize

from utils.config import solver_config
from utils.error_handler import DomainError, SingularityError
from utils.logger import get_logger

logger = get_logger(__name__)

CLAMP = float(solver_config.get('structure.clamp', 1e-12))
FD_STEP = float(solver_config.get('structure.fd_step', 1e-6))
RATIO_BOUND = float(solver_config.get('structure.ratio_bound', 1e6))
SCALES = tuple(solver_config.get('structure.scales', [1e-4, 1.0, 1e4]))

# below t/delta = 1e-2 the closed form of phi loses digits to cancellation
_SERIES_SWITCH = 1e-2
_SERIES_TERMS = 6

StressFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class StructureParams:
    p: float
    delta: float = 0.0
    epsilon: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.p) or self.p <= 1:
            raise DomainError("p must exceed 1")
        if not np.isfinite(self.delta) or self.delta < 0:
            raise DomainError("delta must be nonnegative")
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise DomainError("epsilon must be nonnegative")

    @property
    def p_conj(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def degenerate(self) -> bool:
        """delta = 0 and p < 2: the stress derivative blows up at zero strain"""
        return self.delta == 0 and self.p < 2

    def with_epsilon(self, epsilon: float) -> 'StructureParams':
        return replace(self, epsilon=float(epsilon))

    def shifted(self, a: float) -> 'StructureParams':
        """phi_a coincides with phi for the shift delta + a"""
        return replace(self, delta=self.delta + float(a), epsilon=0.0)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


# ---------------------------------------------------------------------------
# tensor helpers

def sym(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def inner(A, B) -> np.ndarray:
    return np.einsum('...ij,...ij->...', A, B)


def tensor_norm(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    return np.sqrt(inner(P, P))


def _scalar_out(value, like):
    return float(value) if np.ndim(like) == 0 else value


# ---------------------------------------------------------------------------
# the N-function phi and its derivatives, broadcasting over delta and t

def _phi(p: float, delta, t) -> np.ndarray:
    delta, t = np.broadcast_arrays(np.asarray(delta, dtype=float), np.asarray(t, dtype=float))
    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        safe = np.where(delta > 0, delta, 1.0)
        x = np.where(delta > 0, t / safe, np.inf)
        closed = ((delta + t) ** (p - 1) * ((p - 1) * t - delta) + delta ** p) / (p * (p - 1))

        acc = np.zeros_like(t)
        xk = np.ones_like(t)
        coeff = 1.0
        xs = np.where(x < _SERIES_SWITCH, x, 0.0)
        for k in range(_SERIES_TERMS):
            acc = acc + coeff / (k + 2) * xk
            coeff *= (p - 2 - k) / (k + 1)
            xk = xk * xs
        series = safe ** (p - 2) * t ** 2 * acc

        return np.where(x < _SERIES_SWITCH, series, closed)


def _phi_prime(p: float, delta, t) -> np.ndarray:
    delta, t = np.broadcast_arrays(np.asarray(delta, dtype=float), np.asarray(t, dtype=float))
    base = delta + t
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(base > 0, np.where(base > 0, base, 1.0) ** (p - 2) * t, 0.0)


def _phi_second(p: float, delta, t) -> np.ndarray:
    delta, t = np.broadcast_arrays(np.asarray(delta, dtype=float), np.asarray(t, dtype=float))
    if p == 2:
        return np.ones_like(t)
    base = delta + t
    with np.errstate(divide='ignore', invalid='ignore'):
        value = np.where(base > 0, base, 1.0) ** (p - 3) * (delta + (p - 1) * t)
    return np.where(base > 0, value, np.inf if p < 2 else 0.0)


def _check_nonnegative(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError(f"{name} must be finite and nonnegative")
    return arr


def phi(params: StructureParams, t):
    return _scalar_out(_phi(params.p, params.delta, t), t)


def phi_prime(params: StructureParams, t):
    return _scalar_out(_phi_prime(params.p, params.delta, t), t)


def phi_second(params: StructureParams, t):
    return _scalar_out(_phi_second(params.p, params.delta, t), t)


def phi_family(params: StructureParams, t, second: bool = True) -> Tuple[Any, Any, Any]:
    """Return (phi, phi', phi'') at t >= 0.

    phi is evaluated in closed form; phi'' is undefined at t = 0 in the
    degenerate case and raises SingularityError there.
    """
    arr = _check_nonnegative('t', t)
    values = _phi(params.p, params.delta, arr)
    first = _phi_prime(params.p, params.delta, arr)
    if not second:
        return _scalar_out(values, t), _scalar_out(first, t), None
    if params.degenerate and np.any(arr == 0):
        raise SingularityError("phi'' is singular at t = 0 for delta = 0 and p < 2")
    return (_scalar_out(values, t), _scalar_out(first, t),
            _scalar_out(_phi_second(params.p, params.delta, arr), t))


def shifted_phi(params: StructureParams, a, t, method: str = 'closed') -> Tuple[Any, Any]:
    """Return (phi_a(t), phi_a'(t)) with phi_a'(t) = phi'(a + t) t / (a + t).

    The shifted derivative simplifies to (delta + a + t)^(p-2) t, so phi_a is
    phi with delta replaced by delta + a. ``method='quadrature'`` integrates
    phi_a' adaptively instead.
    """
    a_arr = _check_nonnegative('a', a)
    t_arr = _check_nonnegative('t', t)
    shift = params.delta + a_arr
    derivative = _phi_prime(params.p, shift, t_arr)

    if method == 'closed':
        values = _phi(params.p, shift, t_arr)
    elif method == 'quadrature':
        def one(shift_k, t_k):
            if t_k == 0:
                return 0.0
            result, _ = integrate.quad(
                lambda s: float(_phi_prime(params.p, shift_k, s)), 0.0, t_k,
                epsabs=0.0, epsrel=1e-12, limit=200
            )
            return result
        values = np.vectorize(one, otypes=[float])(shift, t_arr)
    else:
        raise DomainError(f"Unknown integration method: {method}")

    like = t if np.ndim(t) else a
    return _scalar_out(values, like), _scalar_out(derivative, like)


def shifted_conjugate(params: StructureParams, a, t):
    """Closed-form equivalent ((delta+a)^(p-1) + t)^(p'-2) t^2 of (phi_a)*"""
    a_arr = _check_nonnegative('a', a)
    t_arr = _check_nonnegative('t', t)
    base = (params.delta + a_arr) ** (params.p - 1) + t_arr
    with np.errstate(divide='ignore', invalid='ignore'):
        value = np.where(base > 0, base, 1.0) ** (params.p_conj - 2) * t_arr ** 2
    value = np.where(t_arr > 0, value, 0.0)
    like = t if np.ndim(t) else a
    return _scalar_out(value, like)


def legendre_conjugate(params: StructureParams, a, t):
    """Numeric (phi_a)*(t) = sup_s (t s - phi_a(s)), via phi_a'(s*) = t"""
    a_arr = _check_nonnegative('a', a)
    t_arr = _check_nonnegative('t', t)

    def one(a_k, t_k):
        if t_k == 0:
            return 0.0
        shift = params.delta + a_k

        def gap(s):
            return float(_phi_prime(params.p, shift, s)) - t_k

        hi = max(t_k, 1.0)
        while gap(hi) <= 0:
            hi *= 2.0
        s_star = optimize.brentq(gap, 0.0, hi, xtol=1e-300,
                                 rtol=4 * np.finfo(float).eps, maxiter=1000)
        return t_k * s_star - float(_phi(params.p, shift, s_star))

    values = np.vectorize(one, otypes=[float])(a_arr, t_arr)
    like = t if np.ndim(t) else a
    return _scalar_out(values, like)


# ---------------------------------------------------------------------------
# stress, its derivative and F

def stress(params: StructureParams, P, clamp: float = CLAMP) -> np.ndarray:
    """S(P) = (delta + |P^sym|)^(p-2) P^sym + epsilon P^sym"""
    A = sym(P)
    base = np.maximum(params.delta + tensor_norm(A), clamp)
    coeff = base ** (params.p - 2) + params.epsilon
    return coeff[..., None, None] * A


def stress_derivative(params: StructureParams, P, Q,
                      clamp: Optional[float] = CLAMP) -> np.ndarray:
    """Directional derivative DS(P)[Q] of the canonical stress"""
    A = sym(P)
    B = sym(Q)
    n = tensor_norm(A)

    if not clamp:
        if params.degenerate and np.any(n == 0):
            raise SingularityError("DS(P) is singular at sym(P) = 0 for delta = 0 and p < 2")
        clamp = np.finfo(float).tiny

    p = params.p
    n_c = np.maximum(n, clamp)
    base = np.maximum(params.delta + n, clamp)
    tangential = base ** (p - 2)
    radial = base ** (p - 3) * (params.delta + (p - 1) * n)
    if p == 2:
        radial = np.ones_like(base)

    weight = inner(A, B) / n_c ** 2
    radial_part = weight[..., None, None] * A
    return (radial[..., None, None] * radial_part
            + tangential[..., None, None] * (B - radial_part)
            + params.epsilon * B)


def f_map(params: StructureParams, P, clamp: float = CLAMP) -> np.ndarray:
    """F(P) = (delta + |P^sym|)^((p-2)/2) P^sym"""
    A = sym(P)
    base = np.maximum(params.delta + tensor_norm(A), clamp)
    return (base ** ((params.p - 2) / 2))[..., None, None] * A


def f_map_derivative(params: StructureParams, P, Q, clamp: float = CLAMP) -> np.ndarray:
    """DF(P)[Q]"""
    A = sym(P)
    B = sym(Q)
    n = tensor_norm(A)
    n_c = np.maximum(n, clamp)
    base = np.maximum(params.delta + n, clamp)
    scale = base ** ((params.p - 2) / 2)
    weight = 0.5 * (params.p - 2) * inner(A, B) / (n_c * base)
    return scale[..., None, None] * (B + weight[..., None, None] * A)


def stress_jacobian(stress_fn: StressFn, P, scale, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian J[..., i, j, k, l] = d S_ij / d P_kl"""
    P = np.asarray(P, dtype=float)
    d = P.shape[-1]
    h = step * np.asarray(scale, dtype=float)
    jac = np.zeros(P.shape + (d, d))
    for k in range(d):
        for l in range(d):
            E = np.zeros((d, d))
            E[k, l] = 1.0
            shift = h[..., None, None] * E
            diff = np.asarray(stress_fn(P + shift)) - np.asarray(stress_fn(P - shift))
            jac[..., :, :, k, l] = diff / (2 * h[..., None, None])
    return jac


# ---------------------------------------------------------------------------
# sampling and checkers

def random_tensor_pairs(count: int, d: int = 2, seed: int = 0,
                        scales: Sequence[float] = SCALES) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded pairs with entries U[-1, 1], each tensor rescaled by a factor from scales"""
    rng = np.random.default_rng(seed)
    scales = np.asarray(scales, dtype=float)
    P = rng.uniform(-1.0, 1.0, size=(count, d, d)) * rng.choice(scales, size=count)[:, None, None]
    Q = rng.uniform(-1.0, 1.0, size=(count, d, d)) * rng.choice(scales, size=count)[:, None, None]
    return P, Q


@dataclass
class StructureReport:
    min_coercivity_ratio: float
    max_growth_ratio: float
    sample_count: int
    violations: List[Dict[str, float]] = field(default_factory=list)
    seed: Optional[int] = None
    ratio_bound: float = RATIO_BOUND

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self, max_violations: int = 20) -> Dict[str, Any]:
        return {
            'min_coercivity_ratio': self.min_coercivity_ratio,
            'max_growth_ratio': self.max_growth_ratio,
            'sample_count': self.sample_count,
            'violation_count': len(self.violations),
            'violations': self.violations[:max_violations],
            'seed': self.seed,
            'ratio_bound': self.ratio_bound,
            'passed': self.passed
        }


def check_structure(stress_fn: StressFn, params: StructureParams,
                    samples: Tuple[np.ndarray, np.ndarray],
                    fd_step: float = FD_STEP,
                    ratio_bound: float = RATIO_BOUND,
                    seed: Optional[int] = None) -> StructureReport:
    """Measure the coercivity and growth constants of a stress callback.

    Both are normalised by (delta + |P^sym|)^(p-2); a sample whose ratio leaves
    [1/ratio_bound, ratio_bound] (or is not finite) is recorded as a violation.
    """
    P, Q = (np.asarray(x, dtype=float) for x in samples)
    A = sym(P)
    B = sym(Q)
    n = tensor_norm(A)
    weight = (params.delta + n) ** (params.p - 2)
    scale = np.maximum(params.delta + n, CLAMP)

    q_norm = tensor_norm(Q)
    q_unit = Q / np.where(q_norm > 0, q_norm, 1.0)[..., None, None]
    h = (fd_step * scale)[..., None, None]
    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        directional = (np.asarray(stress_fn(P + h * q_unit))
                       - np.asarray(stress_fn(P - h * q_unit))) / (2 * h)
        directional = directional * q_norm[..., None, None]
        coercivity = inner(directional, Q) / (weight * inner(B, B))

        jac = stress_jacobian(stress_fn, P, scale, fd_step)
        growth = np.max(np.abs(jac), axis=(-4, -3, -2, -1)) / weight

    coercivity = np.where(np.isfinite(coercivity), coercivity, -np.inf)
    growth = np.where(np.isfinite(growth), growth, np.inf)
    bad = (coercivity <= 1.0 / ratio_bound) | (growth >= ratio_bound)

    violations = [
        {
            'index': int(i),
            'coercivity_ratio': float(coercivity[i]),
            'growth_ratio': float(growth[i]),
            'strain_norm': float(n[i])
        }
        for i in np.flatnonzero(bad)
    ]
    report = StructureReport(
        min_coercivity_ratio=float(np.min(coercivity)),
        max_growth_ratio=float(np.max(growth)),
        sample_count=int(len(P)),
        violations=violations,
        seed=seed,
        ratio_bound=ratio_bound
    )
    if violations:
        logger.warning(f"Structure check found {len(violations)} violations "
                       f"out of {report.sample_count} samples")
    return report


@dataclass
class EquivalenceReport:
    brackets: Dict[str, Tuple[float, float]]
    sample_count: int
    skipped: int
    seed: Optional[int] = None

    @property
    def positive_and_finite(self) -> bool:
        return all(lo > 0 and np.isfinite(hi) for lo, hi in self.brackets.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'brackets': {k: [lo, hi] for k, (lo, hi) in self.brackets.items()},
            'sample_count': self.sample_count,
            'skipped': self.skipped,
            'seed': self.seed
        }


def equivalence_ratios(params: StructureParams, P, Q) -> Dict[str, np.ndarray]:
    """Per-sample ratios r1, r2, r3 of the monotonicity equivalences"""
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    A = sym(P)
    B = sym(Q)
    a = tensor_norm(A)
    gap = tensor_norm(A - B)
    keep = gap > 1e-14 * np.maximum(a, tensor_norm(B))

    dS = stress(params, P) - stress(params, Q)
    numerator = inner(dS, P - Q)
    shift = params.delta + a
    with np.errstate(divide='ignore', invalid='ignore'):
        r1 = numerator / tensor_norm(f_map(params, P) - f_map(params, Q)) ** 2
        r2 = numerator / _phi(params.p, shift, gap)
        r3 = tensor_norm(dS) / _phi_prime(params.p, shift, gap)
    return {'r1': r1[keep], 'r2': r2[keep], 'r3': r3[keep], 'kept': keep}


def equivalence_probe(params: StructureParams, samples: Tuple[np.ndarray, np.ndarray],
                      seed: Optional[int] = None) -> EquivalenceReport:
    P, Q = samples
    ratios = equivalence_ratios(params, P, Q)
    kept = ratios.pop('kept')
    brackets = {
        name: (float(np.min(values)), float(np.max(values))) if values.size else (np.nan, np.nan)
        for name, values in ratios.items()
    }
    return EquivalenceReport(
        brackets=brackets,
        sample_count=int(kept.sum()),
        skipped=int((~kept).sum()),
        seed=seed
    )


def field_equivalence_probe(params: StructureParams,
                            field_fn: Callable[[np.ndarray], np.ndarray],
                            points: np.ndarray, step: float = 1e-5) -> Dict[str, Any]:
    """Compare P_i(Q), phi''(|Q|)|d_iQ|^2, |d_iF(Q)|^2 and |d_iS(Q)|^2/phi''(|Q|).

    Derivatives along each coordinate direction are central differences of
    the composed maps; points where d_iQ is negligible are dropped.
    Returns the per-pair ratio brackets and their widths (max/min).
    """
    points = np.asarray(points, dtype=float)
    d = points.shape[-1]
    Q0 = sym(field_fn(points))
    curvature = _phi_second(params.p, params.delta, tensor_norm(Q0))

    quantities = {'P': [], 'phi2': [], 'F': [], 'S': []}
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        Qp = sym(field_fn(points + e))
        Qm = sym(field_fn(points - e))
        dQ = (Qp - Qm) / (2 * step)
        dS = (stress(params, Qp) - stress(params, Qm)) / (2 * step)
        dF = (f_map(params, Qp) - f_map(params, Qm)) / (2 * step)

        dq2 = inner(dQ, dQ)
        keep = dq2 > 1e-8 * np.max(dq2)
        quantities['P'].append(inner(dS, dQ)[keep])
        quantities['phi2'].append((curvature * dq2)[keep])
        quantities['F'].append(inner(dF, dF)[keep])
        quantities['S'].append((inner(dS, dS) / curvature)[keep])

    q = {k: np.concatenate(v) for k, v in quantities.items()}
    pairs = [('P', 'phi2'), ('P', 'F'), ('phi2', 'F'), ('P', 'S')]
    brackets = {}
    for num, den in pairs:
        ratio = q[num] / q[den]
        lo, hi = float(np.min(ratio)), float(np.max(ratio))
        brackets[f"{num}/{den}"] = {'min': lo, 'max': hi, 'width': hi / lo if lo > 0 else np.inf}
    return {'brackets': brackets, 'points': int(q['P'].size)}
