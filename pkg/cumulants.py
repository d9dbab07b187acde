"""Moment-cumulant transforms, total-population cumulants and the Galton-Watson generating function"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_simpson, cumulative_trapezoid
from tqdm import tqdm

import config
from bounds import build_certificate, operational_constant
from errors import BoundViolated, NoConvergenceWithinBudget, TableHorizonTooShort, ValidationError
from model import ModelLike, ValidatedModel, validate
from moment_hierarchy import MomentTable, max_stable_step, solve_hierarchy, uniform_grid

INFINITY = 'infinity'


@dataclass(frozen=True)
class FactorialMomentVector:
    """m_1..m_L of a counting variable (m_0 = 1 implicit)"""
    values: Tuple[float, ...]

    @property
    def order(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class CumulantVector:
    """Factorial cumulants chi_1..chi_L at a time (or at 'infinity')"""
    values: Tuple[float, ...]
    time_label: Union[float, str, None] = None
    horizon: Optional[float] = None
    bound_constant: Optional[float] = None

    @property
    def order(self) -> int:
        return len(self.values)


@lru_cache(maxsize=None)
def partitions(l: int) -> Tuple[Tuple[int, ...], ...]:
    """All (j_1..j_l) >= 0 with 1*j_1 + 2*j_2 + ... + l*j_l = l (bounded depth-first search)"""
    out = []

    def search(part: int, remaining: int, prefix: Tuple[int, ...]):
        if part > l:
            if remaining == 0:
                out.append(prefix)
            return
        for count in range(remaining // part + 1):
            search(part + 1, remaining - count * part, prefix + (count,))

    search(1, l, ())
    return tuple(out)


def _values(vector) -> Tuple[float, ...]:
    return tuple(float(v) for v in getattr(vector, 'values', vector))


def _scaled_monomial(values: Sequence[float], multiplicities: Sequence[int]) -> float:
    term = 1.0
    for i, j in enumerate(multiplicities, start=1):
        if j:
            term *= (values[i - 1] / math.factorial(i)) ** j / math.factorial(j)
    return term


def moments_to_cumulants(m) -> CumulantVector:
    """
    chi_l = l! sum (-1)^(J-1) (J-1)! prod_k (m_k/k!)^j_k / j_k!,  J = j_1 + ... + j_l
    """
    m = _values(m)
    if not m:
        raise ValidationError("need at least one factorial moment")
    chi = []
    for l in range(1, len(m) + 1):
        terms = []
        for js in partitions(l):
            blocks = sum(js)
            terms.append((-1) ** (blocks - 1) * math.factorial(blocks - 1) * _scaled_monomial(m, js))
        chi.append(math.factorial(l) * math.fsum(terms))
    return CumulantVector(values=tuple(chi))


def cumulants_to_moments(chi) -> FactorialMomentVector:
    """m_l = l! sum prod_k (chi_k/k!)^j_k / j_k!"""
    chi = _values(chi)
    if not chi:
        raise ValidationError("need at least one cumulant")
    moments = []
    for l in range(1, len(chi) + 1):
        moments.append(math.factorial(l) * math.fsum(_scaled_monomial(chi, js) for js in partitions(l)))
    return FactorialMomentVector(values=tuple(moments))


def chi_total_curve(params: ModelLike, l: int, table: MomentTable, rule: str = 'simpson') -> np.ndarray:
    """gamma * int_0^t sum_x m_l(s, x; 0) ds at every grid time of the table"""
    model = validate(params)
    integrand = model.gamma * table.site_sums(l)
    if table.time_grid.size == 1:
        return np.zeros(1)
    if rule == 'simpson' and table.time_grid.size >= 3:
        return cumulative_simpson(integrand, x=table.time_grid, initial=0.0)
    if rule not in ('simpson', 'trapezoid'):
        raise ValidationError(f"unknown quadrature rule {rule!r}")
    return cumulative_trapezoid(integrand, x=table.time_grid, initial=0.0)


def chi_total(params: ModelLike, l: int, t: float, table: MomentTable, rule: str = 'simpson') -> float:
    """
    l-th factorial cumulant of the total field N(t, 0).

    Args:
        params: model
        l: cumulant order (<= table.k_max)
        t: time within the table's horizon
        table: solved moment table
        rule: 'simpson' (default) or 'trapezoid'

    Returns:
        chi_l(N(t, 0)) = gamma * int_0^t sum_x m_l(s, x; 0) ds
    """
    if t < 0:
        raise ValidationError(f"time must be nonnegative, got {t}")
    if t > table.horizon * (1 + 1e-12):
        raise TableHorizonTooShort(f"table ends at t={table.horizon}, requested t={t}")
    curve = chi_total_curve(params, l, table, rule)
    return float(np.interp(t, table.time_grid, curve))


def carleman_constant(chi) -> float:
    """Smallest C with |chi_l| <= C^l l! over the computed orders"""
    values = _values(chi)
    return max((abs(v) / math.factorial(l)) ** (1.0 / l) for l, v in enumerate(values, start=1))


def steady_state_cumulants(params: ModelLike, l_max: int, tol: float = config.STEADY_STATE_TOL,
                           torus_side: int = 32, dt: float = 0.025,
                           initial_horizon: float = config.STEADY_STATE_INITIAL_HORIZON,
                           max_horizon: float = config.STEADY_STATE_MAX_HORIZON,
                           progress: bool = False) -> CumulantVector:
    """
    Limit of chi_1..chi_lmax(N(t, 0)) as t -> infinity by horizon doubling.

    Horizons are measured in units of 1/Delta. The search stops once doubling
    the horizon changes every cumulant by less than tol relative; the result is
    then checked against chi_l <= c^l l! gamma/Delta with the operational
    constant of the factorial-moment bound.
    """
    model = validate(params)
    horizon = initial_horizon / model.delta
    limit = max_horizon / model.delta
    bar = tqdm(desc="Doubling horizon", disable=not progress)
    while True:
        if 2 * horizon > limit:
            bar.close()
            raise NoConvergenceWithinBudget(
                f"cumulants still moving at horizon {horizon:.4g}; budget ends at {limit:.4g}"
            )
        table = solve_hierarchy(model, torus_side, l_max, uniform_grid(2 * horizon, dt))
        before = [chi_total(model, l, horizon, table) for l in range(1, l_max + 1)]
        after = [chi_total(model, l, 2 * horizon, table) for l in range(1, l_max + 1)]
        bar.update(1)
        if all(abs(b - a) <= tol * abs(b) for a, b in zip(before, after)):
            break
        horizon *= 2
    bar.close()

    certificate = build_certificate(model, l_max, torus_side=torus_side)
    c = operational_constant(table, model, certificate.seed_constant)
    ceiling = model.gamma / model.delta
    for l, value in enumerate(after, start=1):
        allowed = c ** l * math.factorial(l) * ceiling
        if value > allowed * (1 + config.BOUND_RELATIVE_SLACK) + config.BOUND_ABSOLUTE_FLOOR:
            raise BoundViolated(f"chi_{l} = {value:.6g} exceeds c^l l! gamma/Delta = {allowed:.6g}")
    return CumulantVector(values=tuple(after), time_label=INFINITY, horizon=2 * horizon, bound_constant=c)


def _offspring_generating(model: ValidatedModel, psi: np.ndarray) -> np.ndarray:
    """sum beta_l psi^l - (sum beta_l + mu) psi + mu"""
    total = np.zeros_like(psi)
    for l, rate in zip(model.params.offspring_counts(), model.beta):
        total = total + rate * psi ** int(l)
    return total - (model.branch_total + model.mu) * psi + model.mu


def _integrate_psi(model: ValidatedModel, z: np.ndarray, times: np.ndarray) -> np.ndarray:
    """RK4 for d psi/dt with psi(0) = z, same step ceiling as the hierarchy; rows follow `times`"""
    ceiling = max_stable_step(model)
    psi = np.array(z, dtype=float)
    out = np.empty((len(times),) + psi.shape)
    now = 0.0
    for index, target in enumerate(times):
        span = target - now
        count = max(1, math.ceil(span / ceiling - 1e-12)) if span > 0 else 0
        for _ in range(count):
            h = span / count
            k1 = _offspring_generating(model, psi)
            k2 = _offspring_generating(model, psi + 0.5 * h * k1)
            k3 = _offspring_generating(model, psi + 0.5 * h * k2)
            k4 = _offspring_generating(model, psi + h * k3)
            psi = psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[index] = psi
        now = target
    return out


def gw_generating_function(params: ModelLike, z: float, t):
    """
    psi_z(t) = E z^nu(t) for the total progeny nu of one particle.

    Args:
        params: model
        z: argument in [0, 1]
        t: time or increasing sequence of times

    Returns:
        psi_z(t) as a float (or an array for a sequence of times)
    """
    model = validate(params)
    if not 0 <= z <= 1:
        raise ValidationError(f"z must lie in [0, 1], got {z}")
    times = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValidationError("times must be nonnegative and increasing")
    values = _integrate_psi(model, np.array(z, dtype=float), times)
    return float(values[0]) if np.ndim(t) == 0 else values


# central stencils on z = 1 + j*h, j = -2..2
_STENCILS = {
    1: np.array([1, -8, 0, 8, -1]) / 12.0,
    2: np.array([-1, 16, -30, 16, -1]) / 12.0,
    3: np.array([-1, 2, 0, -2, 1]) / 2.0,
    4: np.array([1, -4, 6, -4, 1], dtype=float),
}


def gw_factorial_moments(params: ModelLike, t: float, order: int = 2,
                         step: float = config.GW_FINITE_DIFFERENCE_STEP,
                         high_order_step: float = config.GW_HIGH_ORDER_STEP) -> Tuple[float, ...]:
    """
    Factorial moments E[nu(nu-1)...(nu-k+1)], k = 1..order, of the total progeny at t.

    Central differences of psi around z = 1; orders 3 and 4 use the wider
    `high_order_step`.
    """
    model = validate(params)
    if order not in _STENCILS:
        raise ValidationError(f"finite differences are resolved for orders 1..{len(_STENCILS)}, got {order}")
    at = np.array([t], dtype=float)
    offsets = np.arange(-2, 3)
    psi = _integrate_psi(model, 1.0 + step * offsets, at)[0]
    wide = _integrate_psi(model, 1.0 + high_order_step * offsets, at)[0] if order > 2 else None
    out = []
    for k in range(1, order + 1):
        h, values = (step, psi) if k <= 2 else (high_order_step, wide)
        out.append(float(_STENCILS[k] @ values) / h ** k)
    return tuple(out)


def empirical_factorial_cumulants(samples: Sequence[int], order: int = 2,
                                  n_batches: int = 20) -> Tuple[CumulantVector, np.ndarray]:
    """
    Factorial cumulants of integer samples with batch-means standard errors.

    Returns:
        (cumulants from all samples, standard error per order)
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2 * n_batches:
        raise ValidationError(f"need at least {2 * n_batches} samples, got {x.size}")

    def estimate(values):
        falling = np.ones_like(values)
        moments = []
        for k in range(order):
            falling = falling * (values - k)
            moments.append(falling.mean())
        return moments_to_cumulants(moments).values

    whole = estimate(x)
    batches = np.array([estimate(chunk) for chunk in np.array_split(x, n_batches)])
    se = batches.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return CumulantVector(values=tuple(whole)), se
