"""
core/config.py
──────────────
Central configuration: numeric constants (overridable from the
environment / .env) and the two run-time config dataclasses.

Every tolerance, iteration cap and decode scale used by the package is
read from class C, never hard-coded at the call site.
"""

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

from dotenv import load_dotenv

from core.errors import ValidationError

load_dotenv()

logger = logging.getLogger(__name__)


def _env_float(name: str, default: float) -> float:
    raw = os.environ.get(f'ACDC_{name}')
    if raw is None or raw.strip() == '':
        return default
    try:
        return float(raw)
    except ValueError:
        logger.warning(f"[config] ignoring ACDC_{name}={raw!r}: not a number")
        return default


def _env_int(name: str, default: int) -> int:
    return int(_env_float(name, default))


class C:
    """Central constants: single place for all solver and model parameters."""

    # Oracle tolerances (p.u.)
    TOL_AC            = _env_float('TOL_AC', 1e-10)
    TOL_COUPLE        = _env_float('TOL_COUPLE', 1e-8)
    TOL_TOTAL         = _env_float('TOL_TOTAL', 1e-6)
    MAX_NEWTON        = _env_int('MAX_NEWTON', 50)
    MAX_COUPLING      = _env_int('MAX_COUPLING', 30)
    PIVOT_FLOOR       = 1e-13          # relative to largest |U_ii|

    # Converter regulation: taps aim at min angle + this offset
    ANGLE_BAND_OFFSET = math.radians(_env_float('ANGLE_BAND_OFFSET_DEG', 10.0))
    RATIO_SLACK       = 1e-12          # cos φ ratio allowed above 1 by rounding

    # Graph spectrum
    POWER_ITER_TOL    = _env_float('POWER_ITER_TOL', 1e-10)
    POWER_ITER_MAX    = _env_int('POWER_ITER_MAX', 10_000)
    ZETA_FLOOR        = 1e-12

    # Decoding / residual guards
    VOLTAGE_BAND      = 0.25           # V = 1 ± band·tanh(raw)
    ANGLE_SCALE       = 0.5            # rad per unit of raw angle output
    SQRT_GUARD        = 1e-12
    COS_PHI_FLOOR     = 0.05
    FEATURE_STD_FLOOR = 1e-8           # below this a feature channel is treated as constant

    # Evaluation
    FEASIBLE_TOL      = 1e-9           # angle+tap violation treated as zero
    VIOLATION_UNIT    = 1e-5           # reported norms are in this many p.u.
    MRE_ANGLE_FLOOR   = 0.01           # rad

    # Logging
    LOG_LEVEL         = os.environ.get('ACDC_LOG_LEVEL', 'INFO').upper()
    LOG_FORMAT        = '%(asctime)s %(levelname)s %(message)s'

    # Paths
    CASE_DIR          = os.environ.get(
        'ACDC_CASE_DIR',
        os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'data', 'cases'),
    )
    BANK_PATH         = os.environ.get('ACDC_BANK_PATH', 'bank.json')


def configure_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else getattr(logging, C.LOG_LEVEL, logging.INFO)
    logging.basicConfig(level=level, format=C.LOG_FORMAT)


# ═══════════════════════════════════════════════════════════
#  RUN-TIME CONFIG
# ═══════════════════════════════════════════════════════════

@dataclass(frozen=True)
class TrainConfig:
    inner_steps:       int   = 200
    outer_steps:       int   = 20
    step_size:         float = 1e-3
    rho0:              float = 1.0
    rho_growth:        float = 1.5
    rho_cap:           float = 100.0
    batch_size:        int   = 128
    seed:              int   = 0
    width:             int   = 64
    layers:            int   = 3
    order:             int   = 3
    momentum:          float = 0.0
    grad_clip:         float = 5.0
    lambda_cap:        float = 1e4
    raw_angles:        bool  = False
    use_edge_features: bool  = True
    regulation_weight: float = 1e-2
    val_fraction:      float = 0.1
    stall_tol:         float = 1e-6
    voltage_band:      float = C.VOLTAGE_BAND
    angle_scale:       float = C.ANGLE_SCALE

    def __post_init__(self):
        errs = []
        if self.inner_steps < 0:                    errs.append('inner_steps must be >= 0')
        for name in ('outer_steps', 'batch_size', 'width', 'layers'):
            if getattr(self, name) <= 0:            errs.append(f'{name} must be > 0')
        if self.order < 0:                          errs.append('order must be >= 0')
        for name in ('step_size', 'rho0', 'rho_cap', 'voltage_band', 'angle_scale'):
            if not getattr(self, name) > 0:         errs.append(f'{name} must be > 0')
        if self.rho_growth < 1.0:                   errs.append('rho_growth must be >= 1')
        if self.rho_cap < self.rho0:                errs.append('rho_cap must be >= rho0')
        if not 0.0 <= self.momentum < 1.0:          errs.append('momentum must be in [0, 1)')
        if self.grad_clip < 0:                      errs.append('grad_clip must be >= 0')
        if self.lambda_cap <= 0:                    errs.append('lambda_cap must be > 0')
        if not 0.0 <= self.val_fraction < 1.0:      errs.append('val_fraction must be in [0, 1)')
        if self.regulation_weight < 0:              errs.append('regulation_weight must be >= 0')
        if self.stall_tol < 0:                      errs.append('stall_tol must be >= 0')
        if errs:
            raise ValidationError('TrainConfig: ' + '; '.join(errs))

    def fingerprint_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunConfig:
    count:           int   = 2000
    split:           float = 0.75
    seed:            int   = 42
    case_path:       str   = 'ieee30_mod'
    out_dir:         str   = 'out'
    bank_path:       str   = C.BANK_PATH
    select_policy:   str   = 'residual'
    rect_stress_prob: float = 0.25
    rect_stress_q:   float = 2.5
    tap_priority:    str   = 'rectifier'
    max_attempts:    int   = 0        # 0 → 20 × count
    train:           TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        errs = []
        if self.count <= 0:                               errs.append('count must be > 0')
        if not 0.0 < self.split < 1.0:                    errs.append('split must be in (0, 1)')
        if self.select_policy not in ('priority', 'residual'):
            errs.append("select_policy must be 'priority' or 'residual'")
        if self.tap_priority not in ('rectifier', 'inverter'):
            errs.append("tap_priority must be 'rectifier' or 'inverter'")
        if not 0.0 <= self.rect_stress_prob <= 1.0:       errs.append('rect_stress_prob must be in [0, 1]')
        if self.rect_stress_q < 0:                        errs.append('rect_stress_q must be >= 0')
        if errs:
            raise ValidationError('RunConfig: ' + '; '.join(errs))


def _build(cls, data: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"{cls.__name__}: unknown keys {unknown}")
    kwargs = dict(data)
    if cls is RunConfig and isinstance(kwargs.get('train'), dict):
        kwargs['train'] = _build(TrainConfig, kwargs['train'])
    return cls(**kwargs)


def load_train_config(path: str = None, **overrides) -> TrainConfig:
    """TrainConfig from an optional JSON file, then keyword overrides."""
    data = _read_json(path) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return _build(TrainConfig, data)


def load_run_config(path: str = None, **overrides) -> RunConfig:
    data = _read_json(path) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return _build(RunConfig, data)


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding='utf-8') as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ValidationError(f"config {path}: top level must be an object")
    return data
