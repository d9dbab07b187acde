"""Exact event-driven simulation of the particle field on a d-dimensional torus"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, NamedTuple, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import config
from errors import DeadlockNoEvents, HorizonTooLarge, InvalidSimConfig
from kernels import escape_mass
from model import ModelLike, ValidatedModel, validate

Site = Tuple[int, ...]

IMMIGRATION = 'immigration'
JUMP = 'jump'
DEATH = 'death'
SPLIT = 'split'


class Event(NamedTuple):
    kind: str
    site: Site
    offspring: int = 0  # l for a split


@dataclass
class ParticleField:
    """Sparse occupancy of the torus Z_L^d; zero counts are never stored"""
    torus_side: int
    dimension: int
    occupancy: Dict[Site, int] = field(default_factory=dict)
    total_particles: int = 0
    current_time: float = 0.0

    def add(self, site: Site, count: int = 1) -> None:
        self.occupancy[site] = self.occupancy.get(site, 0) + count
        self.total_particles += count

    def remove(self, site: Site) -> None:
        remaining = self.occupancy[site] - 1
        if remaining:
            self.occupancy[site] = remaining
        else:
            del self.occupancy[site]
        self.total_particles -= 1

    def count(self, site: Site) -> int:
        return self.occupancy.get(site, 0)

    def particle_site(self, index: int) -> Site:
        """Site of the index-th particle in occupancy order (cumulative scan)"""
        for site, n in self.occupancy.items():
            if index < n:
                return site
            index -= n
        raise IndexError("particle index out of range")

    def wrap(self, site: Sequence[int]) -> Site:
        return tuple(int(c) % self.torus_side for c in site)

    def check_invariants(self) -> None:
        assert all(n > 0 for n in self.occupancy.values()), "zero count stored"
        assert sum(self.occupancy.values()) == self.total_particles, "total out of sync"


@dataclass(frozen=True)
class SimConfig:
    torus_side: int
    t_max: float
    record_times: Tuple[float, ...]
    observe_sites: Tuple[Site, ...] = ()
    seed: int = 0
    replicate_index: int = 0
    initial_sites: Tuple[Site, ...] = ()
    event_budget: int = config.SIM_EVENT_BUDGET


@dataclass
class Trajectory:
    """Occupancy at the observed sites and total population at each record time"""
    record_times: Tuple[float, ...]
    observe_sites: Tuple[Site, ...]
    counts: np.ndarray   # (n_times, n_sites)
    totals: np.ndarray   # (n_times,)
    events: int


@dataclass
class EnsembleStats:
    """Per record time and observed site: histogram, mean, variance, factorial moments"""
    record_times: Tuple[float, ...]
    observe_sites: Tuple[Site, ...]
    samples: np.ndarray               # (replicates, n_times, n_sites)
    totals: np.ndarray                # (replicates, n_times)
    mean: np.ndarray                  # (n_times, n_sites)
    variance: np.ndarray
    factorial_moments: np.ndarray     # (n_times, n_sites, order)
    factorial_moment_se: np.ndarray
    seed: int = 0

    @property
    def replicates(self) -> int:
        return self.samples.shape[0]

    def histogram(self, time_index: int = -1, site_index: int = 0) -> np.ndarray:
        """Empirical law of the count: probability of 0, 1, 2, ..."""
        values = self.samples[:, time_index, site_index]
        return np.bincount(values) / len(values)

    def counts_histogram(self, time_index: int = -1, site_index: int = 0) -> np.ndarray:
        return np.bincount(self.samples[:, time_index, site_index])


def validate_sim_config(cfg: SimConfig, dimension: int, allow_small_torus: bool = False) -> SimConfig:
    """Check invariants and fill in the default observation site (the origin)"""
    if allow_small_torus:
        if cfg.torus_side < 1:
            raise InvalidSimConfig(f"torus side must be positive, got {cfg.torus_side}")
    elif cfg.torus_side < config.SIM_MIN_TORUS_SIDE or cfg.torus_side % 2:
        raise InvalidSimConfig(f"torus side must be even and >= {config.SIM_MIN_TORUS_SIDE}, got {cfg.torus_side}")
    if not cfg.t_max > 0:
        raise InvalidSimConfig(f"horizon must be positive, got {cfg.t_max}")
    times = tuple(float(t) for t in cfg.record_times)
    if not times:
        raise InvalidSimConfig("at least one record time is required")
    if list(times) != sorted(times) or times[0] < 0 or times[-1] > cfg.t_max:
        raise InvalidSimConfig(f"record times must be sorted within [0, {cfg.t_max}]")
    sites = cfg.observe_sites or ((0,) * dimension,)
    for site in sites + tuple(cfg.initial_sites):
        if len(site) != dimension:
            raise InvalidSimConfig(f"site {site} is not {dimension}-dimensional")
    sites = tuple(tuple(int(c) % cfg.torus_side for c in s) for s in sites)
    initial = tuple(tuple(int(c) % cfg.torus_side for c in s) for s in cfg.initial_sites)
    return replace(cfg, record_times=times, observe_sites=sites, initial_sites=initial)


def replicate_rng(seed: int, replicate_index: int) -> np.random.Generator:
    """Independent stream per replicate, derived from (seed, replicate_index)"""
    sequence = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                      spawn_key=(int(replicate_index),))
    return np.random.Generator(np.random.PCG64(sequence))


class _Sampler:
    """Precomputed categorical tables for one validated model"""

    def __init__(self, model: ValidatedModel):
        params = model.params
        self.model = model
        self.a_steps = params.dist_a.displacements
        self.a_cdf = np.cumsum(params.dist_a.probabilities)
        self.b_steps = params.dist_b.displacements
        self.b_cdf = np.cumsum(params.dist_b.probabilities)
        self.offspring = params.offspring_counts()
        self.split_cdf = np.cumsum(params.beta) / model.branch_total if model.branch_total > 0 else None
        rates = np.array([params.kappa, params.mu, model.branch_total])
        self.kind_cdf = np.cumsum(rates) / rates.sum()

    @staticmethod
    def _pick(cdf: np.ndarray, u: float) -> int:
        return min(int(np.searchsorted(cdf, u, side='right')), len(cdf) - 1)

    def apply(self, state: ParticleField, rng: np.random.Generator, immigration: bool = True) -> Event:
        gamma = self.model.gamma if immigration else 0.0
        immigration_rate = gamma * state.torus_side ** state.dimension
        particle_rate = state.total_particles * self.model.per_particle_rate
        u = rng.random() * (immigration_rate + particle_rate)

        if u < immigration_rate:
            site = tuple(int(c) for c in rng.integers(state.torus_side, size=state.dimension))
            state.add(site)
            return Event(IMMIGRATION, site)

        site = state.particle_site(int(rng.integers(state.total_particles)))
        kind = self._pick(self.kind_cdf, rng.random())
        if kind == 0:
            step = self.a_steps[self._pick(self.a_cdf, rng.random())]
            state.remove(site)
            state.add(state.wrap(np.add(site, step)))
            return Event(JUMP, site)
        if kind == 1:
            state.remove(site)
            return Event(DEATH, site)
        l = int(self.offspring[self._pick(self.split_cdf, rng.random())])
        for _ in range(l - 1):
            step = self.b_steps[self._pick(self.b_cdf, rng.random())]
            state.add(state.wrap(np.add(site, step)))
        return Event(SPLIT, site, l)


@lru_cache(maxsize=8)
def _sampler_for(model: ValidatedModel) -> _Sampler:
    return _Sampler(model)


def total_event_rate(state: ParticleField, model: ModelLike) -> float:
    """n*(kappa + mu + sum(beta_l)) + L^d*gamma"""
    model = validate(model)
    return (state.total_particles * model.per_particle_rate
            + state.torus_side ** state.dimension * model.gamma)


def step(state: ParticleField, model: ModelLike, rng: np.random.Generator) -> Tuple[ParticleField, float, Event]:
    """
    Advance the field by one Gillespie event (the field is updated in place).

    Returns:
        (field, elapsed time, event)
    """
    model = validate(model)
    rate = total_event_rate(state, model)
    if rate <= 0:
        raise DeadlockNoEvents("no enabled transition: empty field and gamma = 0")
    elapsed = float(rng.exponential(1.0 / rate))
    event = _sampler_for(model).apply(state, rng)
    state.current_time += elapsed
    return state, elapsed, event


def projected_events(model: ValidatedModel, cfg: SimConfig, dimension: int) -> float:
    """Expected event count, using the steady-state population as the particle load"""
    volume = cfg.torus_side ** dimension
    population = volume * model.gamma / model.delta + len(cfg.initial_sites)
    return cfg.t_max * (volume * model.gamma + population * model.per_particle_rate)


def _initial_field(cfg: SimConfig, dimension: int) -> ParticleField:
    state = ParticleField(torus_side=cfg.torus_side, dimension=dimension)
    for site in cfg.initial_sites:
        state.add(site)
    return state


def simulate(model: ModelLike, cfg: SimConfig, allow_small_torus: bool = False) -> Trajectory:
    """
    Simulate one replicate and record the field at every requested time.

    Counts at a record time include every event that occurred at or before it.
    """
    model = validate(model)
    cfg = validate_sim_config(cfg, model.d, allow_small_torus)
    if projected_events(model, cfg, model.d) > cfg.event_budget:
        raise HorizonTooLarge(
            f"about {projected_events(model, cfg, model.d):.3g} events projected, budget is {cfg.event_budget}"
        )

    rng = replicate_rng(cfg.seed, cfg.replicate_index)
    sampler = _sampler_for(model)
    state = _initial_field(cfg, model.d)
    n_times = len(cfg.record_times)
    counts = np.zeros((n_times, len(cfg.observe_sites)), dtype=np.int64)
    totals = np.zeros(n_times, dtype=np.int64)

    def record(index):
        counts[index] = [state.count(s) for s in cfg.observe_sites]
        totals[index] = state.total_particles

    next_record = 0
    events = 0
    while next_record < n_times:
        rate = total_event_rate(state, model)
        event_time = state.current_time + rng.exponential(1.0 / rate) if rate > 0 else math.inf
        while next_record < n_times and cfg.record_times[next_record] < event_time:
            record(next_record)
            next_record += 1
        if next_record >= n_times:
            break
        sampler.apply(state, rng)
        state.current_time = event_time
        events += 1
        if events > cfg.event_budget:
            raise HorizonTooLarge(f"event budget of {cfg.event_budget} exhausted at t={state.current_time:.4g}")

    return Trajectory(record_times=cfg.record_times, observe_sites=cfg.observe_sites,
                      counts=counts, totals=totals, events=events)


def factorial_moment_estimates(values: np.ndarray, order: int = config.FACTORIAL_MOMENT_ORDER,
                               axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Sample means of X(X-1)...(X-k+1) for k = 1..order with their standard errors"""
    x = np.asarray(values, dtype=float)
    n = x.shape[axis]
    falling = np.ones_like(x)
    estimates, errors = [], []
    for k in range(order):
        falling = falling * (x - k)
        estimates.append(falling.mean(axis=axis))
        spread = falling.std(axis=axis, ddof=1) if n > 1 else np.zeros_like(estimates[-1])
        errors.append(spread / math.sqrt(n))
    return np.stack(estimates, axis=-1), np.stack(errors, axis=-1)


def summarize(samples: np.ndarray, totals: np.ndarray, cfg: SimConfig,
              order: int = config.FACTORIAL_MOMENT_ORDER) -> EnsembleStats:
    moments, moment_se = factorial_moment_estimates(samples, order)
    return EnsembleStats(
        record_times=cfg.record_times,
        observe_sites=cfg.observe_sites,
        samples=samples,
        totals=totals,
        mean=samples.mean(axis=0),
        variance=samples.var(axis=0, ddof=1),
        factorial_moments=moments,
        factorial_moment_se=moment_se,
        seed=cfg.seed,
    )


def _replicate_worker(job):
    model, cfg, allow_small_torus = job
    trajectory = simulate(model, cfg, allow_small_torus)
    return trajectory.counts, trajectory.totals


def run_ensemble(model: ModelLike, cfg: SimConfig, replicates: int, workers: int = 1,
                 allow_small_torus: bool = False, progress: bool = False) -> EnsembleStats:
    """
    Run independent replicates and reduce them in replicate order.

    Args:
        model: model parameters
        cfg: simulation config; replicate r uses stream (cfg.seed, r)
        replicates: number of replicates (>= 2)
        workers: process count (1 runs inline)
        allow_small_torus: accept torus sides below the experiment minimum
        progress: show a tqdm bar

    Returns:
        EnsembleStats over all replicates
    """
    if replicates < 2:
        raise InvalidSimConfig(f"an ensemble needs at least 2 replicates, got {replicates}")
    model = validate(model)
    cfg = validate_sim_config(cfg, model.d, allow_small_torus)
    jobs = [(model, replace(cfg, replicate_index=r), allow_small_torus) for r in range(replicates)]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, replicates // (8 * workers))
            results = list(tqdm(pool.map(_replicate_worker, jobs, chunksize=chunk),
                                total=replicates, desc="Simulating replicates", disable=not progress))
    else:
        results = [_replicate_worker(job) for job in tqdm(jobs, desc="Simulating replicates", disable=not progress)]

    samples = np.stack([counts for counts, _ in results])
    totals = np.stack([total for _, total in results])
    return summarize(samples, totals, cfg)


def total_variation(p: Sequence[float], q: Sequence[float]) -> float:
    """Half the L1 distance between two laws on 0, 1, 2, ..."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    size = max(len(p), len(q))
    p = np.pad(p, (0, size - len(p)))
    q = np.pad(q, (0, size - len(q)))
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def empirical_distribution_distance(stats_a, stats_b, time_a: int = -1, time_b: int = -1,
                                    site_index: int = 0) -> float:
    """Total-variation distance between the empirical laws of N(t, site) of two ensembles (or histograms)"""
    p = stats_a.histogram(time_a, site_index) if isinstance(stats_a, EnsembleStats) else stats_a
    q = stats_b.histogram(time_b, site_index) if isinstance(stats_b, EnsembleStats) else stats_b
    return total_variation(p, q)


def _evolve_lineage(sampler: _Sampler, site: Site, age: float, cfg: SimConfig, dimension: int,
                    rng: np.random.Generator) -> List[int]:
    """Counts at the observed sites of the progeny of one particle after `age`"""
    state = ParticleField(torus_side=cfg.torus_side, dimension=dimension)
    state.add(site)
    per_particle = sampler.model.per_particle_rate
    while state.total_particles:
        wait = rng.exponential(1.0 / (state.total_particles * per_particle))
        if state.current_time + wait > age:
            break
        sampler.apply(state, rng, immigration=False)
        state.current_time += wait
    return [state.count(s) for s in cfg.observe_sites]


def sample_by_superposition(model: ModelLike, cfg: SimConfig, t: float, replicates: int,
                            allow_small_torus: bool = False, progress: bool = False) -> np.ndarray:
    """
    Sample N(t, observed sites) as a sum of independent immigrant subpopulations.

    Each replicate draws a Poisson(gamma*t*L^d) number of immigrants with uniform
    arrival times and sites and evolves every lineage on its own.

    Returns:
        integer array of shape (replicates, n_sites)
    """
    model = validate(model)
    cfg = validate_sim_config(cfg, model.d, allow_small_torus)
    sampler = _sampler_for(model)
    volume = cfg.torus_side ** model.d
    out = np.zeros((replicates, len(cfg.observe_sites)), dtype=np.int64)
    for r in tqdm(range(replicates), desc="Superposing lineages", disable=not progress):
        # streams disjoint from run_ensemble under the same seed
        rng = replicate_rng(cfg.seed ^ config.SEED_MIX_CONSTANT, r)
        for _ in range(rng.poisson(model.gamma * t * volume)):
            site = tuple(int(c) for c in rng.integers(cfg.torus_side, size=model.d))
            age = t - rng.uniform(0.0, t)
            out[r] += _evolve_lineage(sampler, site, age, cfg, model.d, rng)
    return out


def recommend_torus_side(model: ModelLike, t_max: float, tol: float = 1e-6, largest: int = 256) -> int:
    """Smallest even side whose half-width holds all but `tol` of the walk's mass at t_max"""
    model = validate(model)
    side = config.SIM_MIN_TORUS_SIDE
    while side <= largest:
        if escape_mass(model.walk, t_max, side // 2) < tol:
            return side
        side += 2
    raise HorizonTooLarge(f"no torus side up to {largest} contains the walk at t={t_max}")
