"""Configuration settings for the branching-field laboratory"""

import os

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

# Kernel quadrature settings
QUADRATURE_LEVEL_LOW_DIM = 9   # 2**9 midpoint nodes per axis for d <= 2
QUADRATURE_LEVEL_3D = 6        # 2**6 nodes per axis for d = 3
QUADRATURE_TOLERANCE = 1e-9
NORMALIZATION_TOLERANCE = 1e-12

# Model settings
TAIL_NEGLIGIBLE_FRACTION = 1e-12  # neglected beta tail relative to mu

# Simulator settings
SIM_EVENT_BUDGET = 50_000_000
SIM_MIN_TORUS_SIDE = 4
FACTORIAL_MOMENT_ORDER = 4
SEED_MIX_CONSTANT = 0x9E3779B97F4A7C15

# Moment hierarchy settings
HIERARCHY_STEP_FACTOR = 0.1   # h <= factor / (kappa + mu + sum(beta) * L_max)
HIERARCHY_DEFAULT_DT = 0.05
NONNEGATIVITY_TOLERANCE = 1e-10

# Cumulant settings
STEADY_STATE_TOL = 1e-8
STEADY_STATE_INITIAL_HORIZON = 4.0  # in units of 1/Delta
STEADY_STATE_MAX_HORIZON = 256.0    # in units of 1/Delta
GW_FINITE_DIFFERENCE_STEP = 1e-3
GW_HIGH_ORDER_STEP = 1e-2         # orders 3 and 4 divide by step**order

# Bound settings
D_GROWTH_VARIATION = 0.05         # last-third ratio spread that counts as converged
B_QUADRATURE_HORIZON = 40.0       # in units of 1/Delta; the rest is covered by the tail bound
BOUND_RELATIVE_SLACK = 1e-8
BOUND_ABSOLUTE_FLOOR = 1e-13
# relative margins are reported where the bound exceeds this share of its peak at that time
MARGIN_RESOLUTION = 1e-6
CONSTANT_ENLARGE_FACTOR = 1.05

# Oracle settings
ORACLE_STATE_BUDGET = 2_000_000
ORACLE_OVERFLOW_TOL = 1e-6
ORACLE_MIN_EXPECTED = 5.0
UNIFORMIZATION_MAX_JUMPS = 20_000

# Acceptance settings
ACCEPTANCE_TORUS_SIDE = 32
ACCEPTANCE_HORIZON = 5.0
ACCEPTANCE_P_VALUE = 1e-3
NEGATIVE_CONTROL_P_VALUE = 1e-6
NEGATIVE_CONTROL_FACTOR = 1.2     # death rate perturbation
STANDARD_ERROR_MARGIN = 3.0
STEADY_TV_CEILING = 0.02
DEFAULT_TAIL_DELTA = 0.5

# Output settings
DEFAULT_OUTPUT_DIR = 'runs'
MANIFEST_NAME = 'manifest.json'
RESOLVED_CONFIG_NAME = 'resolved_config.json'

# Command verbs
VERBS = ['validate', 'kernel', 'simulate', 'moments', 'cumulants', 'bounds', 'oracle', 'verify-all']

# Status prefixes for console output
EMOJI_MAP = {
    'start': '🚀',
    'summary': '📊',
    'ok': '✅',
    'warning': '⚠️',
    'error': '❌',
    'file': '💾',
}


def get_thread_cap() -> int:
    """Worker cap for ensembles, from BIFIELD_THREADS or the CPU count"""
    raw = os.getenv('BIFIELD_THREADS')
    if raw is None or raw.strip() == '':
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"BIFIELD_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"BIFIELD_THREADS must be a positive integer, got {raw!r}")
    return value
