"""Artifact writers, run manifests and console report formatting"""

import csv
import hashlib
import json
import platform
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

import config

PACKAGE_VERSION = '1.0.0'


def status(kind: str, message: str) -> str:
    """Console line with the emoji prefix for its kind"""
    return f"{config.EMOJI_MAP[kind]} {message}"


def _plain(obj: Any) -> Any:
    """numpy scalars and arrays to JSON-native values"""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def json_bytes(obj: Any) -> bytes:
    return (json.dumps(obj, default=_plain, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode('utf-8')


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(json_bytes(obj))
    return path


def write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k, '')) for k in fieldnames})
    return path


def _cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def library_versions() -> Dict[str, str]:
    import scipy
    import tqdm

    try:
        dotenv_version = metadata.version('python-dotenv')
    except metadata.PackageNotFoundError:
        dotenv_version = 'unknown'
    return {
        'bifield': PACKAGE_VERSION,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'tqdm': tqdm.__version__,
        'python-dotenv': dotenv_version,
    }


@dataclass
class Manifest:
    """Record of one command run: config echo, seed, versions, wall time and a hash per artifact"""
    verb: str
    output_dir: Path
    config_echo: Dict[str, Any]
    seed: int
    files: List[Dict[str, str]] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    exit_code: Optional[int] = None

    def add(self, path: Path) -> Path:
        path = Path(path)
        self.files.append({'path': path.relative_to(self.output_dir).as_posix(), 'sha256': sha256_file(path)})
        return path

    def write(self, exit_code: int) -> Path:
        self.exit_code = exit_code
        record = {
            'verb': self.verb,
            'seed': self.seed,
            'config': self.config_echo,
            'versions': library_versions(),
            'started_utc': datetime.fromtimestamp(self.started, tz=timezone.utc).isoformat(),
            'wall_time_seconds': round(time.time() - self.started, 3),
            'exit_code': exit_code,
            'files': sorted(self.files, key=lambda f: f['path']),
        }
        return write_json(self.output_dir / config.MANIFEST_NAME, record)


# Artifact exporters

def export_kernel_window(path: Path, times: Sequence[float], windows: Sequence[np.ndarray], radius: int) -> Path:
    """CSV (t, x_1..x_d, p) for p(t, x, 0) on the window [-radius, radius]^d"""
    dimension = windows[0].ndim if windows else 1
    axes = [f'x{i + 1}' for i in range(dimension)]
    rows = []
    for t, window in zip(times, windows):
        for index in np.ndindex(window.shape):
            row = {'t': float(t), 'p': float(window[index])}
            row.update({name: int(i - radius) for name, i in zip(axes, index)})
            rows.append(row)
    return write_csv(path, ['t'] + axes + ['p'], rows)


def export_moment_table(path: Path, table) -> Path:
    """CSV (k, t, x_1..x_d, m) with centred site coordinates"""
    axes = [f'x{i + 1}' for i in range(table.dimension)]
    coords = table.centered_coordinates()
    rows = []
    for k in range(1, table.k_max + 1):
        values = table.order(k).reshape(len(table.time_grid), -1)
        for ti, t in enumerate(table.time_grid):
            for flat, site in enumerate(coords):
                row = {'k': k, 't': float(t), 'm': float(values[ti, flat])}
                row.update({name: int(c) for name, c in zip(axes, site)})
                rows.append(row)
    return write_csv(path, ['k', 't'] + axes + ['m'], rows)


def export_ensemble(path: Path, stats) -> Path:
    """CSV of per (time, site) mean, variance and factorial moments with standard errors"""
    order = stats.factorial_moments.shape[-1]
    names = ['t', 'site', 'mean', 'variance']
    names += [f'm{k}' for k in range(1, order + 1)] + [f'm{k}_se' for k in range(1, order + 1)]
    rows = []
    for ti, t in enumerate(stats.record_times):
        for si, site in enumerate(stats.observe_sites):
            row = {'t': float(t), 'site': ' '.join(str(c) for c in site),
                   'mean': float(stats.mean[ti, si]), 'variance': float(stats.variance[ti, si])}
            for k in range(order):
                row[f'm{k + 1}'] = float(stats.factorial_moments[ti, si, k])
                row[f'm{k + 1}_se'] = float(stats.factorial_moment_se[ti, si, k])
            rows.append(row)
    return write_csv(path, names, rows)


def export_histograms(path: Path, stats) -> Path:
    rows = []
    for ti, t in enumerate(stats.record_times):
        for si, site in enumerate(stats.observe_sites):
            counts = stats.counts_histogram(ti, si)
            for n, c in enumerate(counts):
                rows.append({'t': float(t), 'site': ' '.join(str(x) for x in site), 'count': n,
                             'replicates': int(c), 'probability': float(c) / stats.replicates})
    return write_csv(path, ['t', 'site', 'count', 'replicates', 'probability'], rows)


def cumulant_record(vector) -> Dict[str, Any]:
    record = {'order': vector.order, 'time': vector.time_label, 'values': list(vector.values)}
    if vector.horizon is not None:
        record['horizon'] = vector.horizon
    if vector.bound_constant is not None:
        record['bound_constant'] = vector.bound_constant
    return record


def export_cumulant_curve(path: Path, times: Sequence[float], curves: Dict[int, np.ndarray]) -> Path:
    """CSV (t, chi_1, ..., chi_l) for the total-population cumulants on the table grid"""
    orders = sorted(curves)
    rows = []
    for ti, t in enumerate(times):
        row = {'t': float(t)}
        row.update({f'chi{l}': float(curves[l][ti]) for l in orders})
        rows.append(row)
    return write_csv(path, ['t'] + [f'chi{l}' for l in orders], rows)


def export_oracle_marginal(path: Path, law: Sequence[float]) -> Path:
    return write_csv(path, ['count', 'probability'],
                     [{'count': n, 'probability': float(p)} for n, p in enumerate(law)])


# Console reports

@dataclass
class CheckResult:
    """Outcome of one acceptance criterion"""
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def as_record(self) -> Dict[str, Any]:
        return {'number': self.number, 'name': self.name, 'passed': self.passed,
                'detail': self.detail, 'seconds': round(self.seconds, 3)}


def _format_check(result: CheckResult) -> str:
    """Helper to format a single acceptance criterion"""
    mark = config.EMOJI_MAP['ok'] if result.passed else config.EMOJI_MAP['error']
    formatted = f"{mark} [{result.number:2d}] {result.name}"
    formatted += f" ({result.seconds:.1f}s)\n"
    if result.detail:
        formatted += f"     {result.detail}\n"
    return formatted


def format_acceptance_report(results: Sequence[CheckResult]) -> str:
    passed = sum(r.passed for r in results)
    text = f"\n{config.EMOJI_MAP['summary']} Acceptance report: {passed}/{len(results)} criteria passed\n"
    text += "=" * 80 + "\n"
    for result in results:
        text += _format_check(result)
    text += "=" * 80 + "\n"
    return text


def format_model_summary(model) -> str:
    from model import neglected_tail_mass, offspring_mean

    lines = [
        status('summary', "Model summary:"),
        f"- dimension d = {model.d}",
        f"- Delta = mu - sum((l-1) beta_l) = {model.delta:.6g}",
        f"- total splitting rate = {model.branch_total:.6g}",
    ]
    if model.branch_total > 0:
        lines.append(f"- mean extra offspring per split = {offspring_mean(model):.6g}")
    lines.append(f"- certified tail beyond L_max = {neglected_tail_mass(model):.3e}")
    lines.append(f"- steady-state mean density gamma/Delta = {model.gamma / model.delta:.6g}")
    return "\n".join(lines)
