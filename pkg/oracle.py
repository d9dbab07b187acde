"""Master-equation ground truth for tiny tori with a per-site occupancy cap"""

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.integrate import simpson
from scipy.sparse.linalg import expm_multiply
from scipy.stats import chisquare, poisson

import config
from errors import (
    BudgetExceeded,
    InsufficientSamples,
    NonPositiveDetected,
    TruncationTooCoarse,
    ValidationError,
)
from model import ModelLike, ValidatedModel, validate


@dataclass(frozen=True)
class TruncatedStateSpace:
    """Count vectors in {0..C}^(L^d), indexed in mixed radix C+1 with site 0 least significant"""
    torus_side: int
    dimension: int
    cap: int
    budget: int = config.ORACLE_STATE_BUDGET

    def __post_init__(self):
        if self.torus_side < 1 or self.dimension < 1 or self.cap < 0:
            raise ValidationError(
                f"invalid state space L={self.torus_side}, d={self.dimension}, C={self.cap}"
            )
        if self.size > self.budget:
            raise BudgetExceeded(
                f"(C+1)^(L^d) = {self.cap + 1}^{self.n_sites} = {self.size} states exceeds budget {self.budget}"
            )

    @property
    def n_sites(self) -> int:
        return self.torus_side ** self.dimension

    @property
    def size(self) -> int:
        return (self.cap + 1) ** self.n_sites

    @property
    def radix_powers(self) -> np.ndarray:
        return (self.cap + 1) ** np.arange(self.n_sites, dtype=np.int64)

    def site_index(self, site: Sequence[int]) -> int:
        wrapped = tuple(int(c) % self.torus_side for c in site)
        return int(np.ravel_multi_index(wrapped, (self.torus_side,) * self.dimension))

    def site_coordinates(self, index: int) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(index, (self.torus_side,) * self.dimension))

    def encode(self, counts: Sequence[int]) -> int:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.n_sites,) or counts.min() < 0 or counts.max() > self.cap:
            raise ValidationError(f"configuration {counts.tolist()} outside {{0..{self.cap}}}^{self.n_sites}")
        return int(counts @ self.radix_powers)

    def decode(self, index: int) -> np.ndarray:
        if not 0 <= index < self.size:
            raise ValidationError(f"state index {index} outside 0..{self.size - 1}")
        return (index // self.radix_powers) % (self.cap + 1)

    def all_states(self) -> np.ndarray:
        """Every configuration, row i decoding index i; shape (size, n_sites)"""
        indices = np.arange(self.size, dtype=np.int64)[:, None]
        return (indices // self.radix_powers[None, :]) % (self.cap + 1)


@dataclass
class MasterGenerator:
    """Rate matrix Q of the capped chain; p' = p Q for row vectors p"""
    space: TruncatedStateSpace
    matrix: sparse.csr_matrix
    model: ValidatedModel = field(repr=False)
    blocked_rates: np.ndarray = field(default=None, repr=False)   # rate of events removed by the cap, per state

    @property
    def exit_rates(self) -> np.ndarray:
        return -self.matrix.diagonal()


@dataclass
class FitReport:
    statistic: float
    p_value: float
    dof: int
    samples: int
    bins: Tuple[Tuple[int, int], ...]   # pooled count ranges [lo, hi]
    observed: Tuple[float, ...]
    expected: Tuple[float, ...]

    def as_record(self) -> dict:
        return {
            'statistic': self.statistic,
            'p_value': self.p_value,
            'dof': self.dof,
            'samples': self.samples,
            'bins': [list(b) for b in self.bins],
            'observed': list(self.observed),
            'expected': list(self.expected),
        }


def _split_placements(model: ValidatedModel, offspring: int, space: TruncatedStateSpace) -> Dict[Tuple[int, ...], float]:
    """Distinct offspring placements relative to a parent at site 0: increment per site -> probability"""
    dist = model.params.dist_b
    placements: Dict[Tuple[int, ...], float] = defaultdict(float)
    for combo in itertools.product(dist.entries, repeat=offspring - 1):
        increments = [0] * space.n_sites
        weight = 1.0
        for step, probability in combo:
            increments[space.site_index(step)] += 1
            weight *= probability
        placements[tuple(increments)] += weight
    return placements


def build_generator(params: ModelLike, torus_side: int, cap: int,
                    budget: int = config.ORACLE_STATE_BUDGET) -> MasterGenerator:
    """
    Assemble the sparse generator of the particle field on Z_L^d with at most C particles per site.

    Any event that would push a site above C is removed from the chain
    (immigration at a full site, a jump onto a full site, a split whose
    placement overfills some site). Jumps and offspring that wrap back onto
    the parent's site follow the torus geometry.

    Args:
        params: model
        torus_side: L
        cap: per-site cap C
        budget: largest allowed number of states

    Returns:
        MasterGenerator whose matrix has zero row sums
    """
    model = validate(params)
    space = TruncatedStateSpace(torus_side, model.d, cap, budget)
    states = space.all_states()
    powers = space.radix_powers
    indices = np.arange(space.size, dtype=np.int64)
    rows, cols, rates = [], [], []
    blocked = np.zeros(space.size)

    def emit(possible, fits, targets, values):
        values = np.broadcast_to(np.asarray(values, dtype=float), possible.shape)
        keep = possible & fits & (values > 0)
        blocked[possible & ~fits] += values[possible & ~fits]
        rows.append(indices[keep])
        cols.append(targets[keep])
        rates.append(values[keep])

    jump_table = [(step, model.kappa * p) for step, p in model.params.dist_a.entries]
    split_tables = [
        (model.beta[l - 2], _split_placements(model, l, space))
        for l in range(2, model.l_max + 1) if model.beta[l - 2] > 0
    ]

    for j in range(space.n_sites):
        occupied = states[:, j]
        coords = np.array(space.site_coordinates(j))
        everywhere = np.ones(space.size, dtype=bool)
        emit(everywhere, occupied < cap, indices + powers[j], model.gamma)
        emit(occupied > 0, everywhere, indices - powers[j], model.mu * occupied)

        for step, rate in jump_table:
            k = space.site_index(coords + np.array(step))
            if k == j:
                continue
            emit(occupied > 0, states[:, k] < cap, indices - powers[j] + powers[k], rate * occupied)

        for rate, placements in split_tables:
            for increments, probability in placements.items():
                # shift the placement pattern from the origin to site j
                shifted = np.zeros(space.n_sites, dtype=np.int64)
                for origin_site, extra in enumerate(increments):
                    if extra:
                        offset = np.array(space.site_coordinates(origin_site))
                        shifted[space.site_index(coords + offset)] += extra
                fits = np.all(states + shifted[None, :] <= cap, axis=1)
                emit(occupied > 0, fits, indices + int(shifted @ powers), rate * probability * occupied)

    row = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    col = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    val = np.concatenate(rates).astype(float) if rates else np.zeros(0)
    off_diagonal = sparse.coo_matrix((val, (row, col)), shape=(space.size, space.size)).tocsr()
    off_diagonal.sum_duplicates()
    exits = np.asarray(off_diagonal.sum(axis=1)).ravel()
    matrix = (off_diagonal - sparse.diags(exits)).tocsr()
    return MasterGenerator(space=space, matrix=matrix, model=model, blocked_rates=blocked)


def distribution_at(generator: MasterGenerator, t: float,
                    initial: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Transient law p(t) = p(0) exp(tQ), starting from the empty torus by default.

    Uniformization is used while the jump count it needs stays below
    UNIFORMIZATION_MAX_JUMPS; beyond that scipy's expm_multiply takes over.
    """
    if t < 0:
        raise ValidationError(f"time must be nonnegative, got {t}")
    size = generator.space.size
    if initial is None:
        initial = np.zeros(size)
        initial[0] = 1.0
    p0 = np.asarray(initial, dtype=float)
    if t == 0:
        return p0.copy()

    uniform_rate = float(generator.exit_rates.max()) if size else 0.0
    if uniform_rate <= 0:
        return p0.copy()

    mean_jumps = uniform_rate * t
    horizon = int(poisson.isf(1e-15, mean_jumps)) + 1
    if horizon <= config.UNIFORMIZATION_MAX_JUMPS:
        step = (sparse.identity(size, format='csr') + generator.matrix / uniform_rate).T.tocsr()
        weights = poisson.pmf(np.arange(horizon + 1), mean_jumps)
        vector = p0.copy()
        result = weights[0] * vector
        for n in range(1, horizon + 1):
            vector = step @ vector
            result += weights[n] * vector
    else:
        result = expm_multiply(generator.matrix.T.tocsc() * t, p0)

    if result.min() < -1e-12:
        raise NonPositiveDetected(f"probability {result.min():.3e} below zero at t={t}")
    return result


def marginal(space: TruncatedStateSpace, distribution: np.ndarray,
             site: Optional[Sequence[int]] = None) -> np.ndarray:
    """Law of the count at one site (the origin by default), indexed 0..C"""
    j = space.site_index(site if site is not None else (0,) * space.dimension)
    counts = space.all_states()[:, j]
    return np.bincount(counts, weights=distribution, minlength=space.cap + 1)


def boundary_mass(space: TruncatedStateSpace, distribution: np.ndarray) -> float:
    """Probability of the configurations with at least one site at the cap"""
    at_cap = np.any(space.all_states() == space.cap, axis=1)
    return float(distribution[at_cap].sum())


def choose_cap(params: ModelLike, torus_side: int, times: Sequence[float], start: int = 4,
               tol: float = config.ORACLE_OVERFLOW_TOL,
               budget: int = config.ORACLE_STATE_BUDGET) -> Tuple[MasterGenerator, Dict[float, np.ndarray]]:
    """
    Raise the cap from `start` until the boundary mass is below tol at every requested time.

    Returns:
        (generator, {t: distribution}) for the first cap that qualifies
    """
    model = validate(params)
    cap = start
    while True:
        try:
            generator = build_generator(model, torus_side, cap, budget)
        except BudgetExceeded as exc:
            raise TruncationTooCoarse(f"boundary mass still above {tol:g} when the budget ran out: {exc}") from exc
        laws = {float(t): distribution_at(generator, t) for t in times}
        worst = max(boundary_mass(generator.space, p) for p in laws.values())
        if worst < tol:
            return generator, laws
        cap += 1


def _pool(expected: np.ndarray, observed: np.ndarray, minimum: float):
    """Merge adjacent count bins until each expected count reaches `minimum`; leftovers join the last group"""
    groups = []
    lo = 0
    exp_acc = obs_acc = 0.0
    for index, (e, o) in enumerate(zip(expected, observed)):
        exp_acc += e
        obs_acc += o
        if exp_acc >= minimum:
            groups.append([lo, index, exp_acc, obs_acc])
            lo = index + 1
            exp_acc = obs_acc = 0.0
    if lo < len(expected):
        if groups:
            groups[-1][1] = len(expected) - 1
            groups[-1][2] += exp_acc
            groups[-1][3] += obs_acc
        else:
            groups.append([lo, len(expected) - 1, exp_acc, obs_acc])
    return groups


def compare_to_simulation(oracle_marginal: Sequence[float], ensemble_histogram: Sequence[int],
                          boundary: float = 0.0,
                          min_expected: float = config.ORACLE_MIN_EXPECTED) -> FitReport:
    """
    Chi-square goodness of fit of simulated counts against the oracle marginal.

    Args:
        oracle_marginal: probabilities of the count 0..C
        ensemble_histogram: number of replicates with count 0, 1, 2, ...
        boundary: boundary mass of the oracle solve
        min_expected: bins are pooled until each expects at least this many samples

    Returns:
        FitReport with statistic, p-value and the pooled bins
    """
    if boundary >= config.ORACLE_OVERFLOW_TOL:
        raise TruncationTooCoarse(f"oracle boundary mass {boundary:.3e} is not negligible")
    probabilities = np.asarray(oracle_marginal, dtype=float)
    histogram = np.asarray(ensemble_histogram, dtype=float)
    samples = int(histogram.sum())
    if samples == 0:
        raise InsufficientSamples("empty ensemble histogram")

    width = max(len(probabilities), len(histogram))
    probabilities = np.pad(probabilities, (0, width - len(probabilities)))
    histogram = np.pad(histogram, (0, width - len(histogram)))
    expected = samples * probabilities / probabilities.sum()

    groups = _pool(expected, histogram, min_expected)
    if len(groups) < 2 or any(g[2] < min_expected for g in groups):
        raise InsufficientSamples(
            f"{samples} samples leave fewer than two bins with expected count >= {min_expected:g}"
        )
    observed = np.array([g[3] for g in groups])
    pooled = np.array([g[2] for g in groups])
    statistic, p_value = chisquare(observed, pooled)
    return FitReport(
        statistic=float(statistic),
        p_value=float(p_value),
        dof=len(groups) - 1,
        samples=samples,
        bins=tuple((int(g[0]), int(g[1])) for g in groups),
        observed=tuple(float(o) for o in observed),
        expected=tuple(float(e) for e in pooled),
    )


def oracle_mean(space: TruncatedStateSpace, distribution: np.ndarray) -> float:
    law = marginal(space, distribution)
    return float(np.arange(len(law)) @ law)


def overflow_bound(generator: MasterGenerator, t: float, points: int = 33) -> float:
    """
    Expected number of cap-blocked event attempts on [0, t].

    The capped and uncapped chains can be run together until the first blocked
    attempt, so this bounds the total-variation distance between their laws at t.
    """
    if t <= 0:
        return 0.0
    times = np.linspace(0.0, t, points)
    rates = np.array([distribution_at(generator, s) @ generator.blocked_rates for s in times])
    return float(simpson(rates, x=times))


def truncation_gap(params: ModelLike, torus_side: int, cap: int, t: float) -> Tuple[float, float]:
    """Total-variation change of the origin marginal from cap C to C+1, and the sum of both overflow bounds"""
    coarse = build_generator(params, torus_side, cap)
    fine = build_generator(params, torus_side, cap + 1)
    a = marginal(coarse.space, distribution_at(coarse, t))
    b = marginal(fine.space, distribution_at(fine, t))
    a = np.pad(a, (0, len(b) - len(a)))
    return 0.5 * float(np.abs(a - b).sum()), overflow_bound(coarse, t) + overflow_bound(fine, t)
