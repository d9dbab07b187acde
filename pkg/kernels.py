"""Step distributions, Fourier symbols and transition probabilities of the effective walk"""

import math
from dataclasses import dataclass
from functools import reduce
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from errors import (
    AsymmetricSupport,
    InvalidStepDistribution,
    NotNormalized,
    QuadratureUnderResolved,
    ReducibleSupport,
    ValidationError,
    ZeroDisplacement,
)

Vector = Tuple[int, ...]


@dataclass(frozen=True)
class StepDistribution:
    """Symmetric, normalized law on nonzero lattice vectors"""
    entries: Tuple[Tuple[Vector, float], ...]
    dimension: int

    @property
    def displacements(self) -> np.ndarray:
        return np.array([z for z, _ in self.entries], dtype=np.int64).reshape(-1, self.dimension)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for _, p in self.entries], dtype=float)

    def as_dict(self) -> Dict[Vector, float]:
        return dict(self.entries)


@dataclass(frozen=True)
class EffectiveWalk:
    """Walk with generator kappa*L_a + sum((l-1)*beta_l)*L_b.

    Both rates zero is accepted and gives the frozen walk p(t,x,y) = delta_x(y).
    """
    jump_rate_a: float
    branch_spread_weight: float
    dist_a: StepDistribution
    dist_b: StepDistribution

    def __post_init__(self):
        if self.jump_rate_a < 0 or self.branch_spread_weight < 0:
            raise InvalidStepDistribution("effective walk rates must be nonnegative")
        if self.dist_a.dimension != self.dist_b.dimension:
            raise InvalidStepDistribution(
                f"dimension mismatch: a is {self.dist_a.dimension}-dimensional, "
                f"b is {self.dist_b.dimension}-dimensional"
            )

    @property
    def dimension(self) -> int:
        return self.dist_a.dimension

    @property
    def is_frozen(self) -> bool:
        return self.jump_rate_a == 0 and self.branch_spread_weight == 0

    def exponent(self, k: np.ndarray) -> np.ndarray:
        """kappa*(1 - a_hat(k)) + w*(1 - b_hat(k)), the decay rate of mode k"""
        return (self.jump_rate_a * (1.0 - symbol(self.dist_a, k))
                + self.branch_spread_weight * (1.0 - symbol(self.dist_b, k)))


def _integer_determinant(matrix: List[List[int]]) -> int:
    """Fraction-free (Bareiss) determinant of a square integer matrix"""
    m = [row[:] for row in matrix]
    n = len(m)
    sign = 1
    previous = 1
    for i in range(n - 1):
        if m[i][i] == 0:
            swap = next((r for r in range(i + 1, n) if m[r][i] != 0), None)
            if swap is None:
                return 0
            m[i], m[swap] = m[swap], m[i]
            sign = -sign
        for r in range(i + 1, n):
            for c in range(i + 1, n):
                m[r][c] = (m[r][c] * m[i][i] - m[r][i] * m[i][c]) // previous
        previous = m[i][i]
    return sign * m[n - 1][n - 1]


def lattice_index(vectors: Sequence[Vector], dimension: int) -> int:
    """Index of the lattice generated by `vectors` in Z^d (0 when rank < d).

    The index is the gcd of all d x d minors, i.e. the product of the
    invariant factors of the Smith normal form.
    """
    rows = [list(v) for v in vectors]
    if len(rows) < dimension:
        return 0
    minors = (abs(_integer_determinant([rows[i] for i in subset]))
              for subset in combinations(range(len(rows)), dimension))
    return reduce(math.gcd, minors, 0)


def validate_step_distribution(raw: Sequence[Tuple[Sequence[int], float]],
                               dimension: Optional[int] = None,
                               normalize: bool = False) -> StepDistribution:
    """
    Check and freeze a raw list of (displacement, weight) pairs.

    Args:
        raw: pairs of integer vectors and positive weights
        dimension: expected lattice dimension (inferred from the vectors if omitted)
        normalize: rescale weights to sum 1 instead of requiring it

    Returns:
        StepDistribution with probabilities summing to 1
    """
    if not raw:
        raise InvalidStepDistribution("step distribution has an empty support")

    entries: Dict[Vector, float] = {}
    for vector, weight in raw:
        z = tuple(int(c) for c in np.atleast_1d(vector))
        if dimension is None:
            dimension = len(z)
        if len(z) != dimension:
            raise InvalidStepDistribution(f"displacement {z} is not {dimension}-dimensional")
        if not weight > 0:
            raise InvalidStepDistribution(f"weight of {z} must be positive, got {weight}")
        if all(c == 0 for c in z):
            raise ZeroDisplacement("the zero vector cannot be a displacement")
        if z in entries:
            raise InvalidStepDistribution(f"displacement {z} listed twice")
        entries[z] = float(weight)

    total = math.fsum(entries.values())
    if normalize:
        entries = {z: w / total for z, w in entries.items()}
    elif abs(total - 1.0) > config.NORMALIZATION_TOLERANCE:
        raise NotNormalized(f"probabilities sum to {total!r}, not 1")

    for z, p in entries.items():
        mirror = tuple(-c for c in z)
        q = entries.get(mirror)
        if q is None or abs(p - q) > config.NORMALIZATION_TOLERANCE:
            raise AsymmetricSupport(f"a({z}) = {p} but a({mirror}) = {q}")

    if lattice_index(list(entries), dimension) != 1:
        raise ReducibleSupport("support does not generate the full lattice Z^%d" % dimension)

    ordered = tuple(sorted(entries.items()))
    return StepDistribution(entries=ordered, dimension=dimension)


def nearest_neighbour_distribution(dimension: int) -> StepDistribution:
    """Simple symmetric walk: +-e_i with probability 1/(2d) each"""
    raw = []
    for axis in range(dimension):
        for sign in (1, -1):
            z = [0] * dimension
            z[axis] = sign
            raw.append((z, 1.0 / (2 * dimension)))
    return validate_step_distribution(raw, dimension)


def symbol(dist: StepDistribution, k) -> np.ndarray:
    """a_hat(k) = sum_z cos(k.z) a(z); k has shape (..., d)"""
    k = np.asarray(k, dtype=float)
    if k.ndim == 0:
        k = k.reshape(1)
    phases = np.tensordot(k, dist.displacements.T.astype(float), axes=1)
    value = np.cos(phases) @ dist.probabilities
    return float(value) if np.ndim(value) == 0 else value


def default_level(dimension: int) -> int:
    return config.QUADRATURE_LEVEL_LOW_DIM if dimension <= 2 else config.QUADRATURE_LEVEL_3D


def midpoint_nodes(level: int) -> np.ndarray:
    n = 2 ** level
    return -np.pi + (np.arange(n) + 0.5) * (2.0 * np.pi / n)


def midpoint_mesh(dimension: int, level: int) -> np.ndarray:
    """Tensor midpoint nodes on [-pi, pi)^d, shape (2**level,)*d + (d,); each node carries weight 2**(-level*d)"""
    nodes = midpoint_nodes(level)
    return np.stack(np.meshgrid(*([nodes] * dimension), indexing='ij'), axis=-1)


def _grid_quadrature(walk: EffectiveWalk, t: float, coords: Sequence[np.ndarray], level: int) -> np.ndarray:
    """Midpoint tensor rule for (2pi)^-d int exp(-t*Lambda(k)) cos(k.n) dk on a product of coordinate lists"""
    n = 2 ** level
    nodes = midpoint_nodes(level)
    mesh = midpoint_mesh(walk.dimension, level)
    values = np.exp(-t * walk.exponent(mesh)).astype(complex) / n ** walk.dimension
    # each pass contracts the leading node axis and appends a site axis
    for axis_coords in coords:
        phases = np.exp(1j * np.outer(np.asarray(axis_coords, dtype=float), nodes))
        values = np.tensordot(values, phases, axes=([0], [1]))
    return values.real


def _richardson(walk, t, coords, level, tol):
    fine = _grid_quadrature(walk, t, coords, level)
    coarse = _grid_quadrature(walk, t, coords, level - 1)
    error = float(np.max(np.abs(fine - coarse)))
    if error > tol:
        raise QuadratureUnderResolved(
            f"quadrature error estimate {error:.3e} exceeds {tol:.1e} at t={t}, level={level}"
        )
    return np.clip(fine, 0.0, 1.0)


def transition_probability(walk: EffectiveWalk, t: float, x: Sequence[int], y: Sequence[int],
                           level: Optional[int] = None, tol: float = config.QUADRATURE_TOLERANCE) -> float:
    """
    Transition probability p(t,x,y) of the effective walk on Z^d.

    Args:
        walk: effective walk
        t: elapsed time (>= 0)
        x, y: start and end sites
        level: 2**level quadrature nodes per axis (dimension-dependent default)
        tol: maximal accepted Richardson error estimate

    Returns:
        p(t,x,y) in [0, 1]
    """
    if t < 0:
        raise ValidationError(f"time must be nonnegative, got {t}")
    x = np.atleast_1d(np.asarray(x, dtype=np.int64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    offset = x - y
    if t == 0 or walk.is_frozen:
        return 1.0 if not offset.any() else 0.0
    level = level or default_level(walk.dimension)
    coords = [np.array([c]) for c in offset]
    return float(_richardson(walk, t, coords, level, tol).reshape(()))


def transition_window(walk: EffectiveWalk, t: float, radius: int,
                      level: Optional[int] = None, tol: float = config.QUADRATURE_TOLERANCE) -> np.ndarray:
    """p(t, n, 0) for every n in [-radius, radius]^d, centred array of side 2*radius+1"""
    side = 2 * radius + 1
    offsets = np.arange(-radius, radius + 1)
    if t == 0 or walk.is_frozen:
        window = np.zeros((side,) * walk.dimension)
        window[(radius,) * walk.dimension] = 1.0
        return window
    level = level or default_level(walk.dimension)
    if 2 * radius >= 2 ** (level - 1):
        raise QuadratureUnderResolved(f"window radius {radius} aliases on 2**{level - 1} nodes")
    return _richardson(walk, t, [offsets] * walk.dimension, level, tol)


def escape_mass(walk: EffectiveWalk, t: float, radius: int, level: Optional[int] = None) -> float:
    """Mass of p(t, 0, .) outside the sup-norm ball of the given radius"""
    return max(0.0, 1.0 - float(transition_window(walk, t, radius, level).sum()))


def torus_frequencies(dimension: int, side: int) -> np.ndarray:
    """Discrete Fourier frequencies of Z_side^d in FFT order, shape (side,)*d + (d,)"""
    axis = 2.0 * np.pi * np.fft.fftfreq(side)
    return np.stack(np.meshgrid(*([axis] * dimension), indexing='ij'), axis=-1)


def torus_symbol_grid(walk: EffectiveWalk, side: int) -> np.ndarray:
    """Decay rate of every torus Fourier mode (FFT order)"""
    return walk.exponent(torus_frequencies(walk.dimension, side))


def torus_transition_field(walk: EffectiveWalk, t: float, side: int) -> np.ndarray:
    """p_L(t, x, 0) on the torus Z_side^d, origin at index 0"""
    rates = torus_symbol_grid(walk, side)
    return np.fft.ifftn(np.exp(-t * rates)).real
