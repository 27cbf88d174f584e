"""
core/scenarios.py
─────────────────
Synthetic operating scenarios for training and evaluation.

  renewables : Beta(2, 2) × rated capacity
  loads      : global U(0.8, 1.2) × per-bus U(0.95, 1.05), P and Q alike
  hydro      : re-dispatched to absorb the load / renewable swing, clipped to [0, rated]
  stress     : with some probability, extra reactive load at every rectifier PCC

Each candidate is checked against the sequential oracle; failures are
dropped and redrawn. The stream is a pure function of (case, count, seed).
"""

import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from core.acdc_solver import solve_acdc_sequential
from core.errors import SOLVE_ERRORS, DomainError, ParseError, ValidationError
from core.models import ControlMode, NetworkCase, case_index, with_injections

logger = logging.getLogger(__name__)

_STRESS_STEPS = (1.0, 1.5, 2.0, 3.0)


@dataclass
class Scenario:
    p_gen:      np.ndarray        # per bus, p.u., aligned with case.buses
    q_gen:      np.ndarray
    p_load:     np.ndarray
    q_load:     np.ndarray
    seed:       int = 0
    draw:       int = 0
    label_mode: ControlMode = None

    def injections(self) -> tuple:
        return self.p_gen - self.p_load, self.q_gen - self.q_load


def apply_scenario(case: NetworkCase, scenario: Scenario) -> NetworkCase:
    n = case_index(case).n_bus
    if len(scenario.p_gen) != n:
        raise ValidationError(f"scenario has {len(scenario.p_gen)} buses, case has {n}")
    return with_injections(case, scenario.p_gen, scenario.q_gen, scenario.p_load, scenario.q_load)


# ═══════════════════════════════════════════════════════════
#  SAMPLING
# ═══════════════════════════════════════════════════════════

class _Sampler:

    def __init__(self, case: NetworkCase, seed: int):
        self.case = case
        self.seed = seed
        self.rng  = np.random.default_rng(seed)
        self.draw = 0
        ix = case_index(case)
        self.pos      = ix.pos
        self.base_pg  = np.array([b.p_gen for b in case.buses])
        self.base_qg  = np.array([b.q_gen for b in case.buses])
        self.base_pl  = np.array([b.p_load for b in case.buses])
        self.base_ql  = np.array([b.q_load for b in case.buses])
        self.renew    = [u for u in case.units if u.kind == 'renewable']
        self.hydro    = [u for u in case.units if u.kind == 'hydro']
        self.rect_pos = np.unique(ix.rect)

    def sample(self, stress_q: float = 0.0) -> Scenario:
        rng = self.rng
        p_gen, q_gen = self.base_pg.copy(), self.base_qg.copy()

        scale = rng.uniform(0.8, 1.2) * rng.uniform(0.95, 1.05, size=len(self.base_pl))
        p_load, q_load = self.base_pl * scale, self.base_ql * scale

        swing = p_load.sum() - self.base_pl.sum()
        for u in self.renew:
            k = self.pos[u.bus]
            out = rng.beta(2.0, 2.0) * u.rated
            swing -= out - p_gen[k]
            p_gen[k] = out
        if self.hydro:
            share = swing / len(self.hydro)
            for u in self.hydro:
                k = self.pos[u.bus]
                p_gen[k] = min(max(p_gen[k] + share, 0.0), u.rated)

        if stress_q:
            q_load[self.rect_pos] += stress_q

        sc = Scenario(p_gen, q_gen, p_load, q_load, seed=self.seed, draw=self.draw)
        self.draw += 1
        return sc

    def label(self, scenario: Scenario, tap_priority: str = 'rectifier'):
        """Oracle control mode, or None when the oracle cannot solve it."""
        try:
            sol = solve_acdc_sequential(apply_scenario(self.case, scenario), tap_priority=tap_priority)
        except (*SOLVE_ERRORS, DomainError) as e:
            logger.debug(f"[scenarios] draw {scenario.draw} rejected: {e}")
            return None
        if not sol.converged:
            logger.debug(f"[scenarios] draw {scenario.draw} rejected: residual {sol.max_residual:.3e}")
            return None
        return sol.mode


def generate_scenarios(case: NetworkCase, count: int, seed: int = 0, rect_stress_prob: float = 0.0,
                       rect_stress_q: float = 2.5, validate: bool = True, max_attempts: int = 0,
                       tap_priority: str = 'rectifier') -> list:
    if count <= 0:
        raise ValidationError(f"count must be > 0, got {count}")
    sampler = _Sampler(case, seed)
    limit = max_attempts or 20 * count
    out, rejected = [], 0
    while len(out) < count:
        if sampler.draw >= limit:
            raise ValidationError(f"only {len(out)} of {count} scenarios solvable after {limit} draws")
        stressed = rect_stress_prob > 0 and sampler.rng.uniform() < rect_stress_prob
        sc = sampler.sample(rect_stress_q if stressed else 0.0)
        if validate:
            sc.label_mode = sampler.label(sc, tap_priority)
            if sc.label_mode is None:
                rejected += 1
                continue
        out.append(sc)
    logger.info(f"[scenarios] {count} scenarios from seed {seed}: {rejected} rejected and redrawn")
    return out


def generate_mode_scenarios(case: NetworkCase, count_per_mode: int, seed: int = 0,
                            stress_q: float = 2.5, max_attempts: int = 0) -> list:
    """
    Oracle-labelled set with `count_per_mode` Mode1 and Mode2 scenarios,
    interleaved. Mode2 draws raise the rectifier-side reactive stress
    step by step until the oracle switches.
    """
    if count_per_mode <= 0:
        raise ValidationError(f"count_per_mode must be > 0, got {count_per_mode}")
    sampler = _Sampler(case, seed)
    limit = max_attempts or 50 * count_per_mode
    found = {ControlMode.MODE1: [], ControlMode.MODE2: []}
    attempts = 0
    while min(len(v) for v in found.values()) < count_per_mode:
        if attempts >= limit:
            raise ValidationError(
                f"mode set incomplete after {limit} attempts: "
                f"{len(found[ControlMode.MODE1])} Mode1 / {len(found[ControlMode.MODE2])} Mode2"
            )
        attempts += 1
        want = ControlMode.MODE1 if len(found[ControlMode.MODE1]) <= len(found[ControlMode.MODE2]) \
            else ControlMode.MODE2
        if len(found[want]) >= count_per_mode:
            want = ControlMode.MODE2 if want == ControlMode.MODE1 else ControlMode.MODE1

        if want == ControlMode.MODE1:
            sc = sampler.sample()
            sc.label_mode = sampler.label(sc)
        else:
            base = sampler.sample()
            for step in _STRESS_STEPS:
                sc = Scenario(base.p_gen, base.q_gen, base.p_load, base.q_load.copy(),
                              seed=base.seed, draw=base.draw)
                sc.q_load[sampler.rect_pos] += stress_q * step
                sc.label_mode = sampler.label(sc)
                if sc.label_mode is not None and sc.label_mode != ControlMode.MODE1:
                    break
        if sc.label_mode == want:
            found[want].append(sc)

    out = []
    for a, b in zip(found[ControlMode.MODE1], found[ControlMode.MODE2]):
        out += [a, b]
    logger.info(f"[scenarios] mode set: {count_per_mode} per mode in {attempts} attempts")
    return out


def split_dataset(scenarios: list, fraction: float = 0.75, seed: int = 0) -> tuple:
    """Seeded shuffle, then floor(fraction·n) to train."""
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"split fraction must be in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(scenarios))
    n_train = int(math.floor(fraction * len(scenarios)))
    return [scenarios[i] for i in perm[:n_train]], [scenarios[i] for i in perm[n_train:]]


# ═══════════════════════════════════════════════════════════
#  CSV
# ═══════════════════════════════════════════════════════════

_VECTORS = ('p_gen', 'q_gen', 'p_load', 'q_load')


def save_scenarios(scenarios: list, case: NetworkCase, path: str):
    """One row per scenario; per-bus columns `<field>_<bus id>` in p.u."""
    ids = [b.id for b in case.buses]
    rows = []
    for sc in scenarios:
        row = {}
        for name in _VECTORS:
            row.update({f"{name}_{bus}": float(x) for bus, x in zip(ids, getattr(sc, name))})
        row['seed'] = sc.seed
        row['draw'] = sc.draw
        row['label_mode'] = sc.label_mode.value if sc.label_mode is not None else ''
        rows.append(row)
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)
    logger.info(f"[scenarios] wrote {len(rows)} scenarios to {path}")


def load_scenarios(path: str, case: NetworkCase) -> list:
    try:
        df = pd.read_csv(path, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"scenario file {path}: {e}") from e
    ids = [b.id for b in case.buses]
    missing = [f"{n}_{i}" for n in _VECTORS for i in ids if f"{n}_{i}" not in df.columns]
    if missing:
        raise ParseError(f"scenario file {path}: missing columns {missing[:5]}")

    out = []
    for _, row in df.iterrows():
        vecs = {n: np.array([float(row[f"{n}_{i}"]) for i in ids]) for n in _VECTORS}
        label = str(row.get('label_mode', '') or '')
        if label and label not in {m.value for m in ControlMode}:
            raise ParseError(f"scenario file {path}: unknown control mode {label!r}")
        out.append(Scenario(
            **vecs,
            seed       = int(row.get('seed', 0)),
            draw       = int(row.get('draw', 0)),
            label_mode = ControlMode(label) if label else None,
        ))
    return out
