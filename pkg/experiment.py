"""Experiment configuration, command dispatch and the acceptance pipeline"""

import copy
import json
import math
import re
import time
from dataclasses import dataclass, replace
from itertools import count
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import poisson
from tqdm import tqdm

import config
from bounds import D_growth_rate, D_sequence, D_sequence_enumerated, build_certificate, verify_factorial_bound
from cumulants import (
    CumulantVector,
    carleman_constant,
    chi_total,
    chi_total_curve,
    cumulants_to_moments,
    empirical_factorial_cumulants,
    gw_factorial_moments,
    gw_generating_function,
    moments_to_cumulants,
    steady_state_cumulants,
)
from errors import BifieldError, ParseError
from io_utils import (
    CheckResult,
    Manifest,
    cumulant_record,
    export_cumulant_curve,
    export_ensemble,
    export_histograms,
    export_kernel_window,
    export_moment_table,
    export_oracle_marginal,
    format_acceptance_report,
    format_model_summary,
    status,
    write_json,
)
from kernels import (
    default_level,
    nearest_neighbour_distribution,
    torus_transition_field,
    transition_window,
    validate_step_distribution,
)
from model import ModelParams, ValidatedModel, neglected_tail_mass, offspring_mean, validate
from moment_hierarchy import duhamel_residual, solve_hierarchy, uniform_grid
from oracle import boundary_mass, choose_cap, compare_to_simulation, marginal
from simulator import SimConfig, empirical_distribution_distance, run_ensemble, validate_sim_config

MODEL_FIELDS = {
    'd': 'int',
    'kappa': 'float',
    'a': 'dist',
    'mu': 'float',
    'beta': 'floats',
    'b': 'dist',
    'gamma': 'float',
    'tail': 'tail',
    'beta_exhaustive': 'bool',
}

SCHEMA = {
    'model': MODEL_FIELDS,
    'sim': {
        'torus_side': 'int', 't_max': 'float', 'record_times': 'floats?', 'observe_sites': 'sites',
        'initial_sites': 'sites', 'replicates': 'int', 'workers': 'int?', 'event_budget': 'int',
    },
    'kernel': {'times': 'floats', 'radius': 'int'},
    'hierarchy': {'torus_side': 'int', 'k_max': 'int', 't_max': 'float?', 'dt': 'float'},
    'cumulants': {
        'l_max': 'int', 'tol': 'float', 'torus_side': 'int', 'dt': 'float',
        'initial_horizon': 'float', 'max_horizon': 'float',
    },
    'oracle': {'torus_side': 'int', 'cap': 'int', 'times': 'floats', 'replicates': 'int', 'model': 'model'},
    'acceptance': {
        'mc_replicates': 'int', 'oracle_replicates': 'int', 'steady_replicates': 'int',
        'poisson_replicates': 'int', 'extra_models': 'models',
    },
    'output_dir': 'str',
    'seed': 'int',
}

DEFAULTS = {
    'model': {
        'd': 1, 'kappa': 1.0, 'a': 'nearest', 'mu': 1.0, 'beta': [], 'b': 'nearest', 'gamma': 0.1,
        'tail': None, 'beta_exhaustive': True,
    },
    'sim': {
        'torus_side': 32, 't_max': 5.0, 'record_times': None, 'observe_sites': [], 'initial_sites': [],
        'replicates': 1000, 'workers': None, 'event_budget': config.SIM_EVENT_BUDGET,
    },
    'kernel': {'times': [0.5, 1.0, 2.0, 5.0], 'radius': 16},
    'hierarchy': {'torus_side': 32, 'k_max': 4, 't_max': None, 'dt': config.HIERARCHY_DEFAULT_DT},
    'cumulants': {
        'l_max': 4, 'tol': config.STEADY_STATE_TOL, 'torus_side': 32, 'dt': 0.025,
        'initial_horizon': config.STEADY_STATE_INITIAL_HORIZON, 'max_horizon': config.STEADY_STATE_MAX_HORIZON,
    },
    'oracle': {
        'torus_side': 3, 'cap': 4, 'times': [1.0, 3.0], 'replicates': 100_000,
        'model': {'kappa': 0.5, 'mu': 1.0, 'beta': [0.2], 'gamma': 0.3},
    },
    'acceptance': {
        'mc_replicates': 10_000, 'oracle_replicates': 100_000, 'steady_replicates': 10_000,
        'poisson_replicates': 10_000,
        'extra_models': [{'beta': [0.2, 0.1], 'tail': {'beta': 1.0, 'delta': 0.6}}],
    },
    'output_dir': config.DEFAULT_OUTPUT_DIR,
    'seed': 0,
}


@dataclass(frozen=True)
class SimBlock:
    sim: SimConfig
    replicates: int
    workers: Optional[int]


@dataclass(frozen=True)
class KernelBlock:
    times: Tuple[float, ...]
    radius: int


@dataclass(frozen=True)
class HierarchyBlock:
    torus_side: int
    k_max: int
    t_max: float
    dt: float

    @property
    def grid(self) -> np.ndarray:
        return uniform_grid(self.t_max, self.dt)


@dataclass(frozen=True)
class CumulantBlock:
    l_max: int
    tol: float
    torus_side: int
    dt: float
    initial_horizon: float
    max_horizon: float


@dataclass(frozen=True)
class OracleBlock:
    torus_side: int
    cap: int
    times: Tuple[float, ...]
    replicates: int
    model: ModelParams


@dataclass(frozen=True)
class AcceptanceBlock:
    mc_replicates: int
    oracle_replicates: int
    steady_replicates: int
    poisson_replicates: int
    extra_models: Tuple[ModelParams, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment: every block validated, `resolved` is the echo written next to the outputs"""
    model: ModelParams
    sim: SimBlock
    kernel: KernelBlock
    hierarchy: HierarchyBlock
    cumulants: CumulantBlock
    oracle: OracleBlock
    acceptance: AcceptanceBlock
    output_dir: Path
    seed: int
    resolved: Dict[str, Any]

    @property
    def validated(self) -> ValidatedModel:
        return validate(self.model)

    @property
    def workers(self) -> int:
        return self.sim.workers or config.get_thread_cap()


# Parsing

def _line_of(text: str, key: str) -> Optional[int]:
    match = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count('\n', 0, match.start()) + 1 if match else None


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ParseError(f"duplicate key '{key}'", field=key)
        seen[key] = value
    return seen


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check(kind: str, value: Any, path: str, text: str) -> Any:
    """Type-check one leaf and return its normalized form"""
    leaf = path.rsplit('.', 1)[-1]

    def fail(expected):
        raise ParseError(f"expected {expected}, got {value!r}", field=path, line=_line_of(text, leaf))

    if kind.endswith('?'):
        if value is None:
            return None
        kind = kind[:-1]
    if kind == 'int':
        if not isinstance(value, int) or isinstance(value, bool):
            fail("an integer")
        return value
    if kind == 'float':
        if not _is_number(value):
            fail("a number")
        return float(value)
    if kind == 'bool':
        if not isinstance(value, bool):
            fail("true or false")
        return value
    if kind == 'str':
        if not isinstance(value, str):
            fail("a string")
        return value
    if kind == 'floats':
        if not isinstance(value, list) or not all(_is_number(v) for v in value):
            fail("a list of numbers")
        return [float(v) for v in value]
    if kind == 'sites':
        if not isinstance(value, list) or not all(
                isinstance(s, list) and s and all(isinstance(c, int) and not isinstance(c, bool) for c in s)
                for s in value):
            fail("a list of integer coordinate lists")
        return value
    if kind == 'dist':
        if value == 'nearest':
            return value
        if not isinstance(value, list) or not value or not all(
                isinstance(e, list) and len(e) == 2 and isinstance(e[0], list) and _is_number(e[1])
                for e in value):
            fail("'nearest' or a list of [displacement, probability] pairs")
        return value
    if kind == 'tail':
        if value is None:
            return None
        if not isinstance(value, dict):
            fail("an object with 'beta' and 'delta'")
        _strict_keys(value, {'beta': 'float', 'delta': 'float'}, path, text)
        if set(value) != {'beta', 'delta'}:
            fail("both 'beta' and 'delta'")
        return {k: float(v) for k, v in value.items()}
    if kind == 'model':
        if not isinstance(value, dict):
            fail("an object of model fields")
        return _merge_block({}, value, MODEL_FIELDS, path, text)
    if kind == 'models':
        if not isinstance(value, list):
            fail("a list of model objects")
        return [_check('model', v, f"{path}[{i}]", text) for i, v in enumerate(value)]
    raise AssertionError(f"unknown schema kind {kind}")


def _strict_keys(block: dict, schema: dict, path: str, text: str) -> None:
    for key in block:
        if key not in schema:
            where = f"{path}.{key}" if path else key
            raise ParseError(f"unknown key '{key}'", field=where, line=_line_of(text, key))


def _merge_block(base: dict, block: dict, schema: dict, path: str, text: str) -> dict:
    _strict_keys(block, schema, path, text)
    merged = dict(base)
    for key, value in block.items():
        merged[key] = _check(schema[key], value, f"{path}.{key}", text)
    return merged


def _apply_override(raw: dict, assignment: str) -> None:
    """'a.b.c=value' sets raw[a][b][c]; the value is read as JSON when possible"""
    if '=' not in assignment:
        raise ParseError(f"override '{assignment}' is not of the form path=value")
    dotted, text_value = assignment.split('=', 1)
    keys = [k for k in dotted.strip().lstrip('-').split('.') if k]
    if not keys:
        raise ParseError(f"override '{assignment}' has an empty path")
    try:
        value = json.loads(text_value)
    except json.JSONDecodeError:
        value = text_value
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ParseError(f"override path crosses a non-object at '{key}'", field=dotted)
    node[keys[-1]] = value


def default_tail(beta: Sequence[float]) -> Dict[str, float]:
    """Smallest tail rate certifying beta_l <= rate * delta^l at the default delta"""
    delta = config.DEFAULT_TAIL_DELTA
    ratios = [b / delta ** l for l, b in zip(count(2), beta)]
    rate = max(ratios, default=0.0)
    return {'beta': rate if rate > 0 else 1.0, 'delta': delta}


def _distribution(entry, d: int):
    if entry == 'nearest':
        return nearest_neighbour_distribution(d)
    return validate_step_distribution([(vector, weight) for vector, weight in entry], d)


def build_model(block: Dict[str, Any]) -> ModelParams:
    tail = block['tail'] or default_tail(block['beta'])
    d = block['d']
    return ModelParams(
        d=d,
        kappa=block['kappa'],
        dist_a=_distribution(block['a'], d),
        mu=block['mu'],
        beta=tuple(block['beta']),
        dist_b=_distribution(block['b'], d),
        gamma=block['gamma'],
        tail_beta=tail['beta'],
        tail_delta=tail['delta'],
        beta_exhaustive=block['beta_exhaustive'],
    )


def _resolved_model(block: Dict[str, Any]) -> Tuple[ModelParams, Dict[str, Any]]:
    params = build_model(block)
    model = validate(params)
    echo = dict(block)
    echo['tail'] = {'beta': params.tail_beta, 'delta': params.tail_delta}
    echo['derived'] = {'delta': model.delta, 'branch_total': model.branch_total,
                       'neglected_tail': neglected_tail_mass(model)}
    return params, echo


def _require(condition: bool, message: str, field: str, text: str) -> None:
    if not condition:
        raise ParseError(message, field=field, line=_line_of(text, field.rsplit('.', 1)[-1]))


def parse_config(path, overrides: Sequence[str] = (), write_echo: bool = True) -> ExperimentConfig:
    """
    Parse an experiment file strictly and resolve it against the defaults.

    Args:
        path: JSON experiment file
        overrides: 'block.key=value' assignments that take precedence over the file
        write_echo: write the resolved configuration into the output directory

    Returns:
        ExperimentConfig
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise ParseError(f"config file {path} not found")
    try:
        raw = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno)
    if not isinstance(raw, dict):
        raise ParseError("top level must be a JSON object", line=1)
    for assignment in overrides:
        _apply_override(raw, assignment)

    _strict_keys(raw, SCHEMA, '', text)
    resolved = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        schema = SCHEMA[key]
        if isinstance(schema, dict):
            if not isinstance(value, dict):
                raise ParseError("expected an object", field=key, line=_line_of(text, key))
            resolved[key] = _merge_block(resolved[key], value, schema, key, text)
        else:
            resolved[key] = _check(schema, value, key, text)

    # oracle and acceptance models are partial objects layered over the main model
    model, model_echo = _resolved_model(resolved['model'])
    oracle_model, oracle_echo = _resolved_model({**resolved['model'], **resolved['oracle']['model']})
    extras = [_resolved_model({**resolved['model'], **extra}) for extra in resolved['acceptance']['extra_models']]

    sim = resolved['sim']
    if sim['record_times'] is None:
        sim['record_times'] = [sim['t_max']]
    for block, key in (('sim', 'replicates'), ('oracle', 'replicates'), ('acceptance', 'mc_replicates'),
                       ('acceptance', 'oracle_replicates'), ('acceptance', 'steady_replicates'),
                       ('acceptance', 'poisson_replicates')):
        _require(resolved[block][key] >= 2, f"{key} must be at least 2, got {resolved[block][key]}",
                 f"{block}.{key}", text)
    _require(sim['workers'] is None or sim['workers'] >= 1, "workers must be positive", 'sim.workers', text)
    sim_config = validate_sim_config(SimConfig(
        torus_side=sim['torus_side'],
        t_max=sim['t_max'],
        record_times=tuple(sim['record_times']),
        observe_sites=tuple(tuple(s) for s in sim['observe_sites']),
        seed=resolved['seed'],
        initial_sites=tuple(tuple(s) for s in sim['initial_sites']),
        event_budget=sim['event_budget'],
    ), model.d)

    hierarchy = resolved['hierarchy']
    if hierarchy['t_max'] is None:
        hierarchy['t_max'] = sim['t_max']
    _require(hierarchy['t_max'] >= max(sim['record_times']),
             f"hierarchy horizon {hierarchy['t_max']} is shorter than the last record time "
             f"{max(sim['record_times'])}", 'hierarchy.t_max', text)
    _require(hierarchy['k_max'] >= 1, "k_max must be >= 1", 'hierarchy.k_max', text)
    _require(hierarchy['dt'] > 0 and hierarchy['t_max'] > 0, "hierarchy grid must be positive",
             'hierarchy.dt', text)
    _require(hierarchy['torus_side'] >= 1, "torus side must be positive", 'hierarchy.torus_side', text)

    cumulant = resolved['cumulants']
    _require(1 <= cumulant['l_max'] <= 8, "l_max must lie in 1..8", 'cumulants.l_max', text)
    _require(cumulant['tol'] > 0 and cumulant['dt'] > 0, "tol and dt must be positive", 'cumulants.tol', text)
    _require(0 < cumulant['initial_horizon'] < cumulant['max_horizon'],
             "need 0 < initial_horizon < max_horizon", 'cumulants.max_horizon', text)

    oracle = resolved['oracle']
    _require(oracle['times'] and min(oracle['times']) >= 0, "oracle times must be nonnegative", 'oracle.times', text)
    _require(oracle['cap'] >= 1, "oracle cap must be >= 1", 'oracle.cap', text)
    kernel = resolved['kernel']
    _require(kernel['radius'] >= 0 and all(t >= 0 for t in kernel['times']),
             "kernel radius and times must be nonnegative", 'kernel.radius', text)

    resolved['model'] = model_echo
    resolved['oracle']['model'] = oracle_echo
    resolved['acceptance']['extra_models'] = [echo for _, echo in extras]

    cfg = ExperimentConfig(
        model=model,
        sim=SimBlock(sim=sim_config, replicates=sim['replicates'], workers=sim['workers']),
        kernel=KernelBlock(times=tuple(kernel['times']), radius=kernel['radius']),
        hierarchy=HierarchyBlock(**hierarchy),
        cumulants=CumulantBlock(**cumulant),
        oracle=OracleBlock(torus_side=oracle['torus_side'], cap=oracle['cap'], times=tuple(oracle['times']),
                           replicates=oracle['replicates'], model=oracle_model),
        acceptance=AcceptanceBlock(
            mc_replicates=resolved['acceptance']['mc_replicates'],
            oracle_replicates=resolved['acceptance']['oracle_replicates'],
            steady_replicates=resolved['acceptance']['steady_replicates'],
            poisson_replicates=resolved['acceptance']['poisson_replicates'],
            extra_models=tuple(params for params, _ in extras),
        ),
        output_dir=Path(resolved['output_dir']),
        seed=resolved['seed'],
        resolved=resolved,
    )
    if write_echo:
        write_json(cfg.output_dir / config.RESOLVED_CONFIG_NAME, resolved)
    return cfg


# Verbs

def centered_window(field: np.ndarray, radius: int) -> np.ndarray:
    """Torus field with the origin at index 0 -> array over [-radius, radius]^d"""
    d = field.ndim
    rolled = np.roll(field, shift=(radius,) * d, axis=tuple(range(d)))
    return rolled[(slice(0, 2 * radius + 1),) * d]


def _run_validate(cfg: ExperimentConfig, out: Path, manifest: Manifest, progress: bool) -> int:
    model = cfg.validated
    print(format_model_summary(model))
    summary = {
        'delta': model.delta,
        'branch_total': model.branch_total,
        'offspring_mean': offspring_mean(model) if model.branch_total > 0 else None,
        'neglected_tail': neglected_tail_mass(model),
        'mean_density': model.gamma / model.delta,
    }
    manifest.add(write_json(out / 'model.json', summary))
    return 0


def _run_kernel(cfg: ExperimentConfig, out: Path, manifest: Manifest, progress: bool) -> int:
    model = cfg.validated
    radius = cfg.kernel.radius
    windows, checks = [], []
    for t in tqdm(cfg.kernel.times, desc="Kernel windows", disable=not progress):
        window = transition_window(model.walk, t, radius)
        windows.append(window)
        checks.append({'t': t, 'window_mass': float(window.sum()), 'at_origin': float(window[(radius,) * model.d]),
                       'max': float(window.max())})
    manifest.add(export_kernel_window(out / 'kernel.csv', cfg.kernel.times, windows, radius))
    manifest.add(write_json(out / 'kernel_summary.json', checks))
    print(status('summary', f"Kernel evaluated at {len(windows)} times on radius {radius}"))
    return 0


def _run_simulate(cfg: ExperimentConfig, out: Path, manifest: Manifest, progress: bool) -> int:
    model = cfg.validated
    print(status('start', f"Simulating {cfg.sim.replicates} replicates with seed {cfg.seed}"))
    stats = run_ensemble(model, cfg.sim.sim, cfg.sim.replicates, workers=cfg.workers, progress=progress)
    manifest.add(export_ensemble(out / 'ensemble.csv', stats))
    manifest.add(export_histograms(out / 'histograms.csv', stats))
    analytic = [model.gamma * -math.expm1(-model.delta * t) / model.delta for t in stats.record_times]
    manifest.add(write_json(out / 'simulation.json', {
        'seed': cfg.seed, 'replicates': stats.replicates, 'record_times': list(stats.record_times),
        'analytic_mean': analytic, 'mean': stats.mean.tolist(),
    }))
    print(status('summary', f"Mean at t={stats.record_times[-1]}: {stats.mean[-1, 0]:.5g} "
                            f"(analytic {analytic[-1]:.5g}), seed {cfg.seed}"))
    return 0


def _run_moments(cfg: ExperimentConfig, out: Path, manifest: Manifest, progress: bool) -> int:
    model = cfg.validated
    block = cfg.hierarchy
    table = solve_hierarchy(model, block.torus_side, block.k_max, block.grid, progress=progress)
    manifest.add(export_moment_table(out / 'moments.csv', table))
    residuals = {str(k): duhamel_residual(k, table, model) for k in range(1, table.k_max + 1)}
    manifest.add(write_json(out / 'moments_summary.json', {
        'torus_side': table.torus_side, 'k_max': table.k_max, 'horizon': table.horizon,
        'duhamel_residual': residuals,
        'site_sums_at_horizon': [float(table.site_sums(k)[-1]) for k in range(1, table.k_max + 1)],
    }))
    print(status('summary', f"Solved orders 1..{table.k_max} up to t={table.horizon}; "
                            f"largest Duhamel residual {max(residuals.values()):.2e}"))
    return 0


def _run_cumulants(cfg: ExperimentConfig, out: Path, manifest: Manifest, progress: bool) -> int:
    model = cfg.validated
    block = cfg.cumulants
    table = solve_hierarchy(model, block.torus_side, block.l_max, uniform_grid(cfg.hierarchy.t_max, block.dt),
                            progress=progress)
    curves = {l: chi_total_curve(model, l, table) for l in range(1, block.l_max + 1)}
    manifest.add(export_cumulant_curve(out / 'cumulant_curve.csv', table.time_grid, curves))

    steady = {}
    for side in (block.torus_side, 2 * block.torus_side):
        vector = steady_state_cumulants(model, block.l_max, block.tol, torus_side=side, dt=block.dt,
                                        initial_horizon=block.initial_horizon,
                                        max_horizon=block.max_horizon, progress=progress)
        steady[side] = vector
    small, large = steady[block.torus_side], steady[2 * block.torus_side]
    finite = [CumulantVector(values=tuple(float(c[-1]) for c in curves.values()), time_label=table.horizon)]
    manifest.add(write_json(out / 'cumulants.json', {
        'finite_time': [cumulant_record(v) for v in finite],
        'steady_state': {str(side): cumulant_record(v) for side, v in steady.items()},
        'finite_volume_delta': [b - a for a, b in zip(small.values, large.values)],
        'carleman_constant': carleman_constant(large),
        'first_cumulant_limit': model.gamma / model.delta,
    }))
    print(status('summary', f"Steady-state cumulants on L={2 * block.torus_side}: "
                            + ", ".join(f"{v:.6g}" for v in large.values)))
    return 0


def _run_bounds(cfg: ExperimentConfig, out: Path, manifest: Manifest, progress: bool) -> int:
    model = cfg.validated
    block = cfg.hierarchy
    table = solve_hierarchy(model, block.torus_side, block.k_max, block.grid, progress=progress)
    certificate = build_certificate(model, block.k_max, torus_side=block.torus_side)
    report = verify_factorial_bound(table, certificate, model, strict=False)
    manifest.add(write_json(out / 'certificate.json', certificate.as_record()))
    manifest.add(write_json(out / 'margins.json', report.as_record()))
    if not report.passed:
        print(status('error', f"{len(report.violations)} bound violation(s)"))
        return 5
    print(status('ok', f"Bound holds on {report.checked} values; B={certificate.B:.6g}, "
                       f"c={report.corollary_constant:.6g}"))
    return 0


def _oracle_fit(params: ModelParams, block: OracleBlock, replicates: int, seed: int, workers: int,
                progress: bool):
    generator, laws = choose_cap(params, block.torus_side, block.times, start=block.cap)
    sim = SimConfig(torus_side=block.torus_side, t_max=max(block.times), record_times=tuple(sorted(block.times)),
                    seed=seed)
    stats = run_ensemble(params, sim, replicates, workers=workers, allow_small_torus=True, progress=progress)
    fits = {}
    for index, t in enumerate(stats.record_times):
        law = laws[float(t)]
        fits[t] = compare_to_simulation(marginal(generator.space, law), stats.counts_histogram(index),
                                        boundary=boundary_mass(generator.space, law))
    return generator, laws, fits


def _run_oracle(cfg: ExperimentConfig, out: Path, manifest: Manifest, progress: bool) -> int:
    block = cfg.oracle
    generator, laws, fits = _oracle_fit(block.model, block, block.replicates, cfg.seed, cfg.workers, progress)
    for t, law in laws.items():
        manifest.add(export_oracle_marginal(out / f'oracle_marginal_t{t:g}.csv', marginal(generator.space, law)))
    manifest.add(write_json(out / 'fit.json', {
        'cap': generator.space.cap, 'states': generator.space.size,
        'fits': {f'{t:g}': fit.as_record() for t, fit in fits.items()},
    }))
    worst = min(fit.p_value for fit in fits.values())
    print(status('summary', f"Oracle cap C={generator.space.cap}; smallest p-value {worst:.3g}"))
    return 0


# Acceptance pipeline

@dataclass
class AcceptanceContext:
    cfg: ExperimentConfig
    models: List[ValidatedModel]
    workers: int
    progress: bool

    @property
    def main(self) -> ValidatedModel:
        return self.models[0]

    def table(self, model: ValidatedModel, k_max: int):
        grid = uniform_grid(config.ACCEPTANCE_HORIZON, self.cfg.hierarchy.dt)
        return solve_hierarchy(model, config.ACCEPTANCE_TORUS_SIDE, k_max, grid)


def _first_moment_exactness(ctx: AcceptanceContext) -> Tuple[bool, str]:
    radius = config.ACCEPTANCE_TORUS_SIDE // 2 - 1
    worst = 0.0
    for model in ctx.models:
        table = ctx.table(model, 1)
        for index, t in enumerate(table.time_grid):
            exact = math.exp(-model.delta * t) * transition_window(model.walk, t, radius)
            stored = centered_window(table.values[0, index], radius)
            worst = max(worst, float(np.max(np.abs(exact - stored))))
    return worst < 1e-6, f"sup |m_1 - e^(-Delta t) p| = {worst:.2e} over {len(ctx.models)} models"


def _kernel_normalization(ctx: AcceptanceContext) -> Tuple[bool, str]:
    model = ctx.main
    radius = 2 ** (default_level(model.d) - 2) - 1
    worst_mass = worst_peak = 0.0
    for t in (0.5, 1.0, 2.0, config.ACCEPTANCE_HORIZON):
        window = transition_window(model.walk, t, radius)
        worst_mass = max(worst_mass, abs(float(window.sum()) - 1.0))
        worst_peak = max(worst_peak, float(window.max() - window[(radius,) * model.d]))
        field = torus_transition_field(model.walk, t, config.ACCEPTANCE_TORUS_SIDE)
        worst_mass = max(worst_mass, abs(float(field.sum()) - 1.0))
        worst_peak = max(worst_peak, float(field.max() - field.flat[0]))
    return worst_mass < 1e-8 and worst_peak <= 1e-15, \
        f"|sum p - 1| <= {worst_mass:.1e}, p(t,x,0) - p(t,0,0) <= {worst_peak:.1e}"


def _factorial_bound(ctx: AcceptanceContext) -> Tuple[bool, str]:
    passed, details = True, []
    for model in ctx.models:
        table = ctx.table(model, 4)
        certificate = build_certificate(model, 4, torus_side=config.ACCEPTANCE_TORUS_SIDE)
        report = verify_factorial_bound(table, certificate, model, strict=False)
        k1 = report.min_margin[1]
        passed &= report.passed and abs(k1) < 1e-8
        details.append(f"{len(report.violations)} violations, k=1 margin {k1:.1e}, c={report.corollary_constant:.4g}")
    return passed, "; ".join(details)


def _d_machinery(ctx: AcceptanceContext) -> Tuple[bool, str]:
    D = D_sequence(0.5, 12)
    enumerated = D_sequence_enumerated(0.5, 5)
    agree = max(abs(a - b) / b for a, b in zip(D[:5], enumerated))
    growth = {delta: D_growth_rate(D_sequence(delta, 12)) for delta in (0.3, 0.5, 0.7)}
    passed = D[0] == 1.0 and abs(D[1] - 2.0) < 1e-12 and agree < 1e-10 and all(g.converging for g in growth.values())
    rates = ", ".join(f"delta={d}: {g.rate:.4g}" for d, g in growth.items())
    return passed, f"D_2(1/2) = {D[1]:.12g}, enumeration gap {agree:.1e}; growth {rates}"


def _cumulant_transforms(ctx: AcceptanceContext) -> Tuple[bool, str]:
    rng = np.random.default_rng(ctx.cfg.seed)
    worst = 0.0
    for _ in range(100):
        order = int(rng.integers(1, 9))
        scale = np.array([math.factorial(k) for k in range(1, order + 1)], dtype=float)
        m = rng.uniform(0.05, 1.0, size=order) * scale
        back = np.array(cumulants_to_moments(moments_to_cumulants(m)).values)
        worst = max(worst, float(np.max(np.abs(back - m) / scale)))
    m = (0.7, 1.3)
    second = moments_to_cumulants(m).values[1] - (m[1] - m[0] ** 2)
    lam = 0.8
    poisson_chi = moments_to_cumulants([lam ** k for k in range(1, 9)]).values
    passed = worst < 1e-12 and abs(second) < 1e-14 and abs(poisson_chi[0] - lam) < 1e-12 \
        and max(abs(c) for c in poisson_chi[1:]) < 1e-10
    return passed, f"round trip {worst:.1e}, Poisson residual {max(abs(c) for c in poisson_chi[1:]):.1e}"


def _first_cumulant(ctx: AcceptanceContext) -> Tuple[bool, str]:
    worst = 0.0
    for model in ctx.models:
        table = ctx.table(model, 1)
        for t in table.time_grid:
            exact = model.gamma * -math.expm1(-model.delta * t) / model.delta
            worst = max(worst, abs(chi_total(model, 1, t, table) - exact))
    block = ctx.cfg.cumulants
    steady = steady_state_cumulants(ctx.main, block.l_max, block.tol, torus_side=block.torus_side, dt=block.dt,
                                    initial_horizon=block.initial_horizon, max_horizon=block.max_horizon)
    limit = ctx.main.gamma / ctx.main.delta
    gap = abs(steady.values[0] - limit) / limit
    return worst < 1e-6 and gap < block.tol, \
        f"chi_1 gap {worst:.1e}; steady chi_1 relative gap {gap:.1e} (c={steady.bound_constant:.4g})"


def _monte_carlo_mean(ctx: AcceptanceContext) -> Tuple[bool, str]:
    model = ctx.main
    times = (1.0, 3.0, 10.0 / model.delta)
    sim = replace(ctx.cfg.sim.sim, t_max=max(times), record_times=times, observe_sites=(), initial_sites=())
    stats = run_ensemble(model, validate_sim_config(sim, model.d), ctx.cfg.acceptance.mc_replicates,
                         workers=ctx.workers, progress=ctx.progress)
    scores = []
    for index, t in enumerate(times):
        exact = model.gamma * -math.expm1(-model.delta * t) / model.delta
        se = math.sqrt(stats.variance[index, 0] / stats.replicates)
        scores.append(abs(stats.mean[index, 0] - exact) / se if se > 0 else math.inf)
    return max(scores) < config.STANDARD_ERROR_MARGIN, \
        "mean deviations in standard errors: " + ", ".join(f"{s:.2f}" for s in scores)


def _oracle_agreement(ctx: AcceptanceContext) -> Tuple[bool, str]:
    block = ctx.cfg.oracle
    replicates = ctx.cfg.acceptance.oracle_replicates
    generator, laws, fits = _oracle_fit(block.model, block, replicates, ctx.cfg.seed, ctx.workers, ctx.progress)
    worst = min(f.p_value for f in fits.values())
    perturbed = replace(block.model, mu=block.model.mu * config.NEGATIVE_CONTROL_FACTOR)
    sim = SimConfig(torus_side=block.torus_side, t_max=max(block.times), record_times=tuple(sorted(block.times)),
                    seed=ctx.cfg.seed + 1)
    stats = run_ensemble(perturbed, sim, replicates, workers=ctx.workers, allow_small_torus=True,
                         progress=ctx.progress)
    control = min(
        compare_to_simulation(marginal(generator.space, laws[float(t)]), stats.counts_histogram(i)).p_value
        for i, t in enumerate(stats.record_times)
    )
    passed = worst > config.ACCEPTANCE_P_VALUE and control < config.NEGATIVE_CONTROL_P_VALUE
    return passed, f"C={generator.space.cap}, smallest p-value {worst:.3g}, negative control {control:.1e}"


def _sampling_noise(histogram: np.ndarray, replicates: int) -> float:
    """Typical total-variation distance between two independent empirical laws of this size"""
    p = np.asarray(histogram, dtype=float)
    return float(np.sum(np.sqrt(p * (1 - p) / (math.pi * replicates))))


def _steady_state_convergence(ctx: AcceptanceContext) -> Tuple[bool, str]:
    model = ctx.main
    times = tuple(f / model.delta for f in (2.0, 4.0, 8.0, 16.0))
    sim = replace(ctx.cfg.sim.sim, t_max=times[-1], record_times=times, observe_sites=(), initial_sites=())
    stats = run_ensemble(model, validate_sim_config(sim, model.d), ctx.cfg.acceptance.steady_replicates,
                         workers=ctx.workers, progress=ctx.progress)
    tv = [empirical_distribution_distance(stats, stats, time_a=i, time_b=i + 1) for i in range(3)]
    noise = _sampling_noise(stats.histogram(-1), stats.replicates)
    decreasing = tv[1] <= tv[0] + 2 * noise
    estimates = [empirical_factorial_cumulants(stats.samples[:, i, 0], order=2) for i in range(len(times))]
    monotone = True
    for (before, se_before), (after, se_after) in zip(estimates, estimates[1:]):
        for l in range(2):
            allowance = 2 * math.hypot(se_before[l], se_after[l])
            monotone &= after.values[l] >= before.values[l] - allowance
    passed = decreasing and tv[2] < config.STEADY_TV_CEILING and monotone
    return passed, f"TV(T,2T) at T=2,4,8/Delta: " + ", ".join(f"{v:.4f}" for v in tv) \
        + f"; cumulants monotone: {monotone}"


def _poisson_special_case(ctx: AcceptanceContext) -> Tuple[bool, str]:
    params = replace(ctx.main.params, beta=())
    model = validate(params)
    t = 10.0 / model.mu
    sim = replace(ctx.cfg.sim.sim, t_max=t, record_times=(t,), observe_sites=(), initial_sites=())
    stats = run_ensemble(model, validate_sim_config(sim, model.d), ctx.cfg.acceptance.poisson_replicates,
                         workers=ctx.workers, progress=ctx.progress)
    lam = model.gamma * -math.expm1(-model.mu * t) / model.mu
    histogram = stats.counts_histogram(0)
    top = max(len(histogram) - 1, int(poisson.ppf(1 - 1e-12, lam)))
    law = poisson.pmf(np.arange(top + 1), lam)
    law[-1] += poisson.sf(top, lam)
    fit = compare_to_simulation(law, histogram)
    chi, se = empirical_factorial_cumulants(stats.samples[:, 0, 0], order=2)
    second_ok = abs(chi.values[1]) <= config.STANDARD_ERROR_MARGIN * se[1]
    return fit.p_value > config.ACCEPTANCE_P_VALUE and second_ok, \
        f"Poisson fit p={fit.p_value:.3g}, chi_2 = {chi.values[1]:.2e} +- {se[1]:.1e}"


def _duhamel_agreement(ctx: AcceptanceContext) -> Tuple[bool, str]:
    residuals = [duhamel_residual(2, ctx.table(model, 2), model) for model in ctx.models]
    return max(residuals) < 1e-4, "residuals " + ", ".join(f"{r:.1e}" for r in residuals)


def _galton_watson(ctx: AcceptanceContext) -> Tuple[bool, str]:
    worst = 0.0
    for model in ctx.models:
        for t in (0.5, 1.0, 2.0, config.ACCEPTANCE_HORIZON):
            mean, = gw_factorial_moments(model, t, order=1)
            worst = max(worst, abs(mean - math.exp(-model.delta * t)))
    model = ctx.main
    # on the collapsed torus every offspring stays put, so the hierarchy gives the progeny moments
    collapsed = solve_hierarchy(model, 1, 2, uniform_grid(2.0, ctx.cfg.hierarchy.dt))
    _, second = gw_factorial_moments(model, 2.0, order=2)
    exact = float(collapsed.order(2)[-1, 0])
    second_gap = abs(second - exact) / max(exact, 1e-4)
    grid = np.linspace(0.0, 60.0 / model.delta, 241)
    psi = gw_generating_function(model, 0.0, grid)
    monotone = bool(np.all(np.diff(psi) >= -1e-14))
    limit_gap = 1.0 - float(psi[-1])
    passed = worst < 1e-6 and second_gap < 1e-4 and monotone and limit_gap < 1e-6
    return passed, (f"mean gap {worst:.1e}; L=1 second moment gap {second_gap:.1e}; "
                    f"psi_0 nondecreasing: {monotone}, 1 - psi_0(end) = {limit_gap:.1e}")


ACCEPTANCE_CRITERIA: List[Tuple[str, Callable[[AcceptanceContext], Tuple[bool, str]]]] = [
    ("First-moment exactness", _first_moment_exactness),
    ("Kernel normalization and bounds", _kernel_normalization),
    ("Factorial-moment bound on computed data", _factorial_bound),
    ("D_k recursion and growth", _d_machinery),
    ("Cumulant transforms", _cumulant_transforms),
    ("Total-population first cumulant", _first_cumulant),
    ("Monte Carlo vs analytic mean", _monte_carlo_mean),
    ("Monte Carlo vs master equation", _oracle_agreement),
    ("Steady-state convergence", _steady_state_convergence),
    ("Poisson special case", _poisson_special_case),
    ("Duhamel residual", _duhamel_agreement),
    ("Galton-Watson consistency", _galton_watson),
]


def run_acceptance(cfg: ExperimentConfig, progress: bool = True,
                   only: Optional[Sequence[int]] = None) -> List[CheckResult]:
    """Run every acceptance criterion (or the numbered subset `only`); failures never stop the pipeline"""
    models = [cfg.validated] + [validate(m) for m in cfg.acceptance.extra_models]
    ctx = AcceptanceContext(cfg=cfg, models=models, workers=cfg.workers, progress=False)
    results = []
    selected = [(n, name, check) for n, (name, check) in enumerate(ACCEPTANCE_CRITERIA, start=1)
                if only is None or n in only]
    for number, name, check in tqdm(selected, desc="Acceptance checks", disable=not progress):
        started = time.time()
        try:
            passed, detail = check(ctx)
        except BifieldError as exc:
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(number=number, name=name, passed=bool(passed), detail=detail,
                                   seconds=time.time() - started))
    return results


def _run_verify_all(cfg: ExperimentConfig, out: Path, manifest: Manifest, progress: bool) -> int:
    results = run_acceptance(cfg, progress=progress)
    manifest.add(write_json(out / 'acceptance.json', [r.as_record() for r in results]))
    print(format_acceptance_report(results))
    if all(r.passed for r in results):
        print(status('ok', "All acceptance criteria passed"))
        return 0
    print(status('error', f"{sum(not r.passed for r in results)} acceptance criteria failed"))
    return 5


VERB_HANDLERS = {
    'validate': _run_validate,
    'kernel': _run_kernel,
    'simulate': _run_simulate,
    'moments': _run_moments,
    'cumulants': _run_cumulants,
    'bounds': _run_bounds,
    'oracle': _run_oracle,
    'verify-all': _run_verify_all,
}


def run_command(verb: str, cfg: ExperimentConfig, progress: bool = True) -> int:
    """
    Run one verb, writing its artifacts and a manifest under output_dir/verb.

    Returns:
        process exit status (0 on success, 5 when a verified property fails)
    """
    if verb not in VERB_HANDLERS:
        raise ParseError(f"unknown verb '{verb}'; choose from {', '.join(config.VERBS)}")
    out = cfg.output_dir / verb
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(verb=verb, output_dir=out, config_echo=cfg.resolved, seed=cfg.seed)
    try:
        code = VERB_HANDLERS[verb](cfg, out, manifest, progress)
    except BifieldError as exc:
        manifest.write(exc.exit_code)
        raise
    manifest.write(code)
    return code
