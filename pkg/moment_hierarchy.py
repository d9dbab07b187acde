"""Factorial moments of a single immigrant subpopulation from the moment equations on the torus"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import simpson
from tqdm import tqdm

import config
from errors import NonPositiveDetected, UnstableStep, ValidationError
from kernels import StepDistribution, torus_symbol_grid, transition_probability
from model import ModelLike, ValidatedModel, validate


@dataclass(frozen=True)
class MomentTable:
    """m_k(t, x; 0) for k = 1..K on a time grid; the target site is the origin (index 0)"""
    torus_side: int
    k_max: int
    dimension: int
    time_grid: np.ndarray
    values: np.ndarray   # (K, n_times) + (L,)*d, unnormalized moments

    def order(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.k_max:
            raise ValidationError(f"order {k} outside 1..{self.k_max}")
        return self.values[k - 1]

    def normalized(self, k: int) -> np.ndarray:
        return self.order(k) / math.factorial(k)

    def site_sums(self, k: int) -> np.ndarray:
        axes = tuple(range(1, self.dimension + 1))
        return self.order(k).sum(axis=axes)

    @property
    def horizon(self) -> float:
        return float(self.time_grid[-1])

    def centered_coordinates(self) -> np.ndarray:
        """Coordinates in [-L/2, L/2) for every site in storage order, shape (L^d, d)"""
        axis = np.arange(self.torus_side)
        axis = np.where(axis >= (self.torus_side + 1) // 2, axis - self.torus_side, axis)
        grids = np.meshgrid(*([axis] * self.dimension), indexing='ij')
        return np.stack([g.ravel() for g in grids], axis=-1)


@lru_cache(maxsize=None)
def compositions(total: int, parts: int) -> Tuple[Tuple[int, ...], ...]:
    """All ordered tuples of `parts` positive integers summing to `total`"""
    if parts == 0:
        return ((),) if total == 0 else ()
    if parts == 1:
        return ((total,),) if total >= 1 else ()
    out = []
    for first in range(1, total - parts + 2):
        for rest in compositions(total - first, parts - 1):
            out.append((first,) + rest)
    return tuple(out)


def convolve_b(values: np.ndarray, dist_b: StepDistribution, axes: Tuple[int, ...]) -> np.ndarray:
    """(f * b)(x) = sum_v b(v) f(x + v) on the torus, by direct summation over the support of b"""
    out = np.zeros_like(values)
    for step, weight in dist_b.entries:
        out += weight * np.roll(values, shift=tuple(-s for s in step), axis=axes)
    return out


def _normalized_source(k: int, lower: Sequence[np.ndarray], model: ValidatedModel,
                       axes: Tuple[int, ...]) -> np.ndarray:
    """Source of the equation for m_k/k!, built from m_1/1!, ..., m_{k-1}/(k-1)!"""
    source = np.zeros_like(lower[0])
    if k < 2:
        return source
    smoothed = [convolve_b(m, model.params.dist_b, axes) for m in lower[:k - 1]]
    products: Dict[Tuple[int, int], np.ndarray] = {}

    def product_sum(total: int, parts: int) -> np.ndarray:
        key = (total, parts)
        if key not in products:
            acc = np.zeros_like(source)
            for parts_tuple in compositions(total, parts):
                term = smoothed[parts_tuple[0] - 1]
                for j in parts_tuple[1:]:
                    term = term * smoothed[j - 1]
                acc = acc + term
            products[key] = acc
        return products[key]

    for l, rate in zip(model.params.offspring_counts(), model.beta):
        if rate == 0:
            continue
        l = int(l)
        inner = np.zeros_like(source)
        for n in range(1, k):
            for i in range(1, min(l - 1, k - n) + 1):
                inner += lower[n - 1] * math.comb(l - 1, i) * product_sum(k - n, i)
        for i in range(2, min(l - 1, k) + 1):
            inner += math.comb(l - 1, i) * product_sum(k, i)
        source += rate * inner
    return source


def source_term(k: int, lower_moments: Sequence[np.ndarray], params: ModelLike,
                field_time: Optional[float] = None) -> np.ndarray:
    """
    Source S_k of the k-th factorial moment equation at one time.

    Args:
        k: moment order
        lower_moments: normalized moments m_1/1!, ..., m_{k-1}/(k-1)! on the torus
        params: model
        field_time: time label of the fields (the equations are autonomous)

    Returns:
        S_k for the unnormalized moment m_k
    """
    model = validate(params)
    if k < 1:
        raise ValidationError(f"moment order must be >= 1, got {k}")
    if k == 1:
        return np.zeros_like(np.asarray(lower_moments[0], dtype=float)) if lower_moments else 0.0
    if len(lower_moments) < k - 1:
        raise ValidationError(f"order {k} needs {k - 1} lower moments, got {len(lower_moments)}")
    lower = [np.asarray(m, dtype=float) for m in lower_moments]
    axes = tuple(range(lower[0].ndim))
    return math.factorial(k) * _normalized_source(k, lower, model, axes)


def max_stable_step(model: ModelLike) -> float:
    """Step ceiling 0.1/(kappa + mu + sum(beta_l)*L_max)"""
    model = validate(model)
    return config.HIERARCHY_STEP_FACTOR / (model.kappa + model.mu + model.branch_total * model.l_max)


class _HierarchyRHS:
    """Spectral linear part and physical-space sources for all orders at once"""

    def __init__(self, model: ValidatedModel, side: int, k_max: int):
        self.model = model
        self.k_max = k_max
        self.spatial_axes = tuple(range(1, model.d + 1))
        self.rates = torus_symbol_grid(model.walk, side) + model.delta

    def physical(self, spectral: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(spectral, axes=self.spatial_axes).real

    def sources(self, spectral: np.ndarray) -> np.ndarray:
        moments = self.physical(spectral)
        out = np.zeros_like(spectral)
        field_axes = tuple(a - 1 for a in self.spatial_axes)
        for k in range(2, self.k_max + 1):
            physical_source = _normalized_source(k, list(moments[:k - 1]), self.model, field_axes)
            out[k - 1] = np.fft.fftn(physical_source)
        return out

    def lawson_rk4(self, u: np.ndarray, h: float) -> np.ndarray:
        """One Runge-Kutta step in the integrating-factor variables (linear part exact)"""
        half = np.exp(-0.5 * h * self.rates)
        full = half * half
        a = self.sources(u)
        b = self.sources(half * (u + 0.5 * h * a))
        c = self.sources(half * u + 0.5 * h * b)
        d = self.sources(full * u + h * half * c)
        return full * u + (h / 6.0) * (full * a + 2.0 * half * (b + c) + d)


def solve_hierarchy(params: ModelLike, torus_side: int, k_max: int, time_grid: Sequence[float],
                    substeps: Optional[int] = None, progress: bool = False) -> MomentTable:
    """
    Integrate the factorial-moment equations for orders 1..K on the torus.

    The linear generator is applied exactly in the discrete Fourier basis and
    the sources, which only involve lower orders, are evaluated in physical
    space at every Runge-Kutta stage.

    Args:
        params: model
        torus_side: L (L = 1 collapses every displacement onto the origin)
        k_max: highest order K
        time_grid: increasing times starting at 0
        substeps: fixed number of steps per grid interval (default: from the step ceiling)
        progress: show a tqdm bar

    Returns:
        MomentTable of unnormalized moments
    """
    model = validate(params)
    if k_max < 1:
        raise ValidationError(f"k_max must be >= 1, got {k_max}")
    grid = np.asarray(time_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1 or grid[0] != 0 or np.any(np.diff(grid) <= 0):
        raise ValidationError("time grid must be strictly increasing and start at 0")

    ceiling = max_stable_step(model)
    rhs = _HierarchyRHS(model, torus_side, k_max)
    shape = (torus_side,) * model.d
    spectral = np.zeros((k_max,) + shape, dtype=complex)
    spectral[0] = 1.0  # transform of the point mass at the origin

    values = np.zeros((k_max, grid.size) + shape)
    factorials = np.array([math.factorial(k) for k in range(1, k_max + 1)], dtype=float)
    factor_shape = (k_max,) + (1,) * model.d
    values[:, 0] = rhs.physical(spectral) * factorials.reshape(factor_shape)

    for index in tqdm(range(1, grid.size), desc="Integrating moments", disable=not progress):
        interval = grid[index] - grid[index - 1]
        count = substeps or max(1, math.ceil(interval / ceiling - 1e-12))
        h = interval / count
        if h > ceiling * (1 + 1e-12):
            raise UnstableStep(f"step {h:.4g} exceeds the stability ceiling {ceiling:.4g}")
        for _ in range(count):
            spectral = rhs.lawson_rk4(spectral, h)
        values[:, index] = rhs.physical(spectral) * factorials.reshape(factor_shape)

    lowest = values.min()
    if lowest < -config.NONNEGATIVITY_TOLERANCE:
        raise NonPositiveDetected(f"moment value {lowest:.3e} below the nonnegativity tolerance")
    return MomentTable(torus_side=torus_side, k_max=k_max, dimension=model.d, time_grid=grid, values=values)


def uniform_grid(t_max: float, dt: float = config.HIERARCHY_DEFAULT_DT) -> np.ndarray:
    count = max(1, int(round(t_max / dt)))
    return np.linspace(0.0, t_max, count + 1)


def m1_exact(params: ModelLike, t: float, x: Sequence[int]) -> float:
    """e^{-Delta t} p(t, x, 0) on the infinite lattice"""
    model = validate(params)
    return math.exp(-model.delta * t) * transition_probability(model.walk, t, x, (0,) * model.d)


def duhamel_residual(k: int, table: MomentTable, params: ModelLike) -> float:
    """
    Sup-norm gap between the stored m_k/k! and its Duhamel representation.

    The representation integrates e^{-Delta(t-s)} p(t-s) * source(s) over the
    table's own grid (composite Simpson, trapezoid on the first interval);
    for k = 1 it reduces to the homogeneous solution e^{-Delta t} p(t).
    """
    model = validate(params)
    if not 1 <= k <= table.k_max:
        raise ValidationError(f"order {k} not in the table (K={table.k_max})")
    axes = tuple(range(1, table.dimension + 1))
    rates = torus_symbol_grid(model.walk, table.torus_side) + model.delta
    grid = table.time_grid
    stored = table.normalized(k)

    if k == 1:
        exact = np.stack([np.fft.ifftn(np.exp(-t * rates)).real for t in grid])
        return float(np.max(np.abs(exact - stored)))

    lower = [table.normalized(j) for j in range(1, k)]
    field_axes = tuple(range(table.dimension))
    sources_hat = np.stack([
        np.fft.fftn(_normalized_source(k, [m[i] for m in lower], model, field_axes))
        for i in range(grid.size)
    ])

    worst = float(np.max(np.abs(stored[0])))
    for n in range(1, grid.size):
        s = grid[:n + 1]
        lag = (grid[n] - s).reshape((-1,) + (1,) * table.dimension)
        integrand = np.exp(-lag * rates) * sources_hat[:n + 1]
        if n == 1:
            integral_hat = 0.5 * (s[1] - s[0]) * (integrand[0] + integrand[1])
        else:
            integral_hat = (simpson(integrand.real, x=s, axis=0)
                            + 1j * simpson(integrand.imag, x=s, axis=0))
        represented = np.fft.ifftn(integral_hat, axes=tuple(a - 1 for a in axes)).real
        worst = max(worst, float(np.max(np.abs(represented - stored[n]))))
    return worst
