"""Constants of the factorial-moment bound and its verification on solved moment tables"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from errors import BoundViolated, DegenerateSequence, ValidationError
from kernels import default_level, midpoint_mesh, torus_symbol_grid, torus_transition_field
from model import ModelLike, validate
from moment_hierarchy import MomentTable, compositions


@dataclass(frozen=True)
class GrowthRate:
    rate: float
    converging: bool
    ratios: Tuple[float, ...]


@dataclass(frozen=True)
class BoundCertificate:
    """B, D_1..D_K and the seed max(B, growth) of the power-law constant c"""
    B: float
    D: Tuple[float, ...]
    growth_estimate: float
    converging: bool
    tail_delta: float
    torus_side: Optional[int] = None

    @property
    def seed_constant(self) -> float:
        return max(self.B, self.growth_estimate)

    def as_record(self) -> dict:
        return {
            'B': self.B,
            'D': list(self.D),
            'growth_estimate': self.growth_estimate,
            'converging': self.converging,
            'tail_delta': self.tail_delta,
            'torus_side': self.torus_side,
            'seed_constant': self.seed_constant,
        }


@dataclass
class MarginReport:
    """Outcome of checking m_k <= k! B^(k-1) D_k e^(-Delta t) p(t,x,0) on every stored value"""
    min_margin: Dict[int, float]
    checked: int
    violations: List[Tuple[int, float, Tuple[int, ...], float]] = field(default_factory=list)
    corollary_constant: Optional[float] = None

    @property
    def passed(self) -> bool:
        return not self.violations

    def as_record(self) -> dict:
        return {
            'min_margin': {str(k): v for k, v in sorted(self.min_margin.items())},
            'checked': self.checked,
            'violations': [
                {'k': k, 't': t, 'site': list(site), 'excess': excess}
                for k, t, site, excess in self.violations
            ],
            'corollary_constant': self.corollary_constant,
        }


def B_constant(params: ModelLike, quad_horizon: Optional[float] = None,
               torus_side: Optional[int] = None) -> float:
    """
    B = max(1, beta * int_0^inf e^{-Delta s} p(s,0,0) ds), beta the tail-certificate rate.

    The time integral up to T is done exactly mode by mode,
    (1 - e^{-(Delta+Lambda)T}) / (Delta+Lambda), and averaged over the torus
    modes (or over midpoint nodes of the frequency cube on Z^d). The remainder
    is covered by the bound beta e^{-Delta T} / Delta, so the result is an
    upper estimate of B.

    Args:
        params: model
        quad_horizon: T (default B_QUADRATURE_HORIZON / Delta)
        torus_side: use the torus transition probability of this side

    Returns:
        B >= 1
    """
    model = validate(params)
    delta = model.delta
    horizon = config.B_QUADRATURE_HORIZON / delta if quad_horizon is None else float(quad_horizon)
    if horizon < 0:
        raise ValidationError(f"quadrature horizon must be nonnegative, got {horizon}")

    if torus_side is not None:
        rates = torus_symbol_grid(model.walk, torus_side) + delta
    else:
        rates = model.walk.exponent(midpoint_mesh(model.d, default_level(model.d))) + delta
    head = float(np.mean(-np.expm1(-rates * horizon) / rates))
    tail = math.exp(-delta * horizon) / delta
    return max(1.0, model.params.tail_beta * (head + tail))


def _tail_coefficient(delta: float, i: int) -> float:
    """sum over l >= i+1 of C(l-1, i) delta^l = (delta/(1-delta))^(i+1)"""
    return (delta / (1.0 - delta)) ** (i + 1)


def _composition_sums(known: Sequence[float], top: int) -> np.ndarray:
    """[w^r] D(w)^i for 0 <= i, r <= top, with D(w) = sum_n D_n w^n over the known prefix"""
    series = np.zeros(top + 1)
    series[1:len(known) + 1] = known
    powers = np.zeros((top + 1, top + 1))
    powers[0, 0] = 1.0
    for i in range(1, top + 1):
        powers[i] = np.convolve(powers[i - 1], series)[:top + 1]
    return powers


def D_sequence(delta: float, K: int) -> List[float]:
    """
    D_1 = 1 and, for k >= 2,

        D_k = sum_l delta^l [ sum_{n<k} D_n sum_{i=1}^{l-1} C(l-1,i) P_i(k-n)
                              + sum_{i=2}^{l-1} C(l-1,i) P_i(k) ]

    where P_i(r) sums D_{j_1}...D_{j_i} over compositions of r into i
    positive parts. The l-sums are exchanged with the i-sums and summed in
    closed form.
    """
    if not 0 < delta < 1:
        raise ValidationError(f"delta must lie in (0, 1), got {delta}")
    if K < 1:
        raise ValidationError(f"K must be >= 1, got {K}")
    coefficients = [0.0] + [_tail_coefficient(delta, i) for i in range(1, K + 1)]
    D = [1.0]
    for k in range(2, K + 1):
        P = _composition_sums(D, k)
        terms = []
        for n in range(1, k):
            for i in range(1, k - n + 1):
                terms.append(D[n - 1] * coefficients[i] * P[i, k - n])
        for i in range(2, k + 1):
            terms.append(coefficients[i] * P[i, k])
        D.append(math.fsum(terms))
    return D


def D_growth_rate(D: Sequence[float]) -> GrowthRate:
    """Largest ratio D_{k+1}/D_k over k >= 2, and whether the last third of the ratios has settled"""
    values = np.asarray(D, dtype=float)
    if values.size < 4:
        raise ValidationError(f"need at least 4 terms to estimate growth, got {values.size}")
    if np.any(values[1:] <= 0):
        raise DegenerateSequence("D_k vanishes for some k >= 2; ratios are undefined")
    ratios = values[2:] / values[1:-1]
    last = ratios[-max(1, len(ratios) // 3):]
    spread = (last.max() - last.min()) / last.max()
    return GrowthRate(rate=float(ratios.max()), converging=bool(spread < config.D_GROWTH_VARIATION),
                      ratios=tuple(float(r) for r in ratios))


def build_certificate(params: ModelLike, K: int, torus_side: Optional[int] = None,
                      quad_horizon: Optional[float] = None) -> BoundCertificate:
    """B from the (torus) transition probability and D up to max(K, 4)"""
    model = validate(params)
    delta = model.params.tail_delta
    D = D_sequence(delta, max(K, 4))
    growth = D_growth_rate(D)
    return BoundCertificate(
        B=B_constant(model, quad_horizon, torus_side),
        D=tuple(D),
        growth_estimate=growth.rate,
        converging=growth.converging,
        tail_delta=delta,
        torus_side=torus_side,
    )


def operational_constant(table: MomentTable, params: ModelLike, seed: float) -> float:
    """Smallest c = seed * 1.05^n with sum_x m_k(t,x) <= c^k k! e^{-Delta t} on the whole table"""
    model = validate(params)
    decay = np.exp(model.delta * table.time_grid)
    required = 0.0
    for k in range(1, table.k_max + 1):
        scaled = table.site_sums(k) * decay / math.factorial(k)
        required = max(required, float(np.max(np.clip(scaled, 0.0, None))) ** (1.0 / k))
    c = max(seed, 1e-300)
    while c < required * (1 - config.BOUND_RELATIVE_SLACK):
        c *= config.CONSTANT_ENLARGE_FACTOR
    return c


def verify_factorial_bound(table: MomentTable, cert: BoundCertificate, params: ModelLike,
                           strict: bool = True) -> MarginReport:
    """
    Check m_k(t,x;0) <= k! B^(k-1) D_k e^(-Delta t) p_L(t,x,0) on every grid time t > 0 and site.

    Args:
        table: solved moment table
        cert: certificate built for the same model (and torus side)
        params: model
        strict: raise BoundViolated instead of only recording violations

    Returns:
        MarginReport with the smallest relative margin (bound - m)/bound per order
    """
    model = validate(params)
    if len(cert.D) < table.k_max:
        raise ValidationError(f"certificate has D up to {len(cert.D)}, table needs {table.k_max}")
    coords = table.centered_coordinates()
    report = MarginReport(min_margin={k: math.inf for k in range(1, table.k_max + 1)}, checked=0)

    for index, t in enumerate(table.time_grid):
        if t <= 0:
            continue
        kernel = math.exp(-model.delta * t) * torus_transition_field(model.walk, t, table.torus_side)
        for k in range(1, table.k_max + 1):
            bound = math.factorial(k) * cert.B ** (k - 1) * cert.D[k - 1] * kernel
            stored = table.values[k - 1, index]
            excess = stored - bound * (1 + config.BOUND_RELATIVE_SLACK) - config.BOUND_ABSOLUTE_FLOOR
            report.checked += stored.size
            for flat in np.flatnonzero(excess > 0):
                report.violations.append((k, float(t), tuple(int(c) for c in coords[flat]),
                                          float(excess.ravel()[flat])))
            resolved = bound > max(config.BOUND_ABSOLUTE_FLOOR, config.MARGIN_RESOLUTION * float(bound.max()))
            if resolved.any():
                margin = float(np.min((bound[resolved] - stored[resolved]) / bound[resolved]))
                report.min_margin[k] = min(report.min_margin[k], margin)

    report.corollary_constant = operational_constant(table, model, cert.seed_constant)
    if strict and report.violations:
        k, t, site, excess = report.violations[0]
        raise BoundViolated(
            f"{len(report.violations)} violation(s); first at k={k}, t={t}, x={site}, excess {excess:.3e}"
        )
    return report


def D_sequence_enumerated(delta: float, K: int, l_cut: int = 200) -> List[float]:
    """D_1..D_K by literal enumeration of (l, n, i, composition) with l <= l_cut"""
    D = [1.0]
    for k in range(2, K + 1):
        terms = []
        for l in range(2, l_cut + 1):
            weight = delta ** l
            for n in range(1, k):
                for i in range(1, l):
                    for parts in compositions(k - n, i):
                        terms.append(weight * D[n - 1] * math.comb(l - 1, i) * math.prod(D[j - 1] for j in parts))
            for i in range(2, l):
                for parts in compositions(k, i):
                    terms.append(weight * math.comb(l - 1, i) * math.prod(D[j - 1] for j in parts))
        D.append(math.fsum(terms))
    return D
