"""
core/evaluator.py
─────────────────
Comparison harness: multi-model mode-selecting inference, violation and
accuracy metrics against the sequential oracle, timing, and the branch
trip study.

Usage:
    from core.evaluator import evaluate, infer_multi
    result = infer_multi(bank, case)
    report = evaluate(bank, case, test_set, out_dir='out')
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from core.acdc_solver import solve_acdc_sequential
from core.config import C
from core.errors import SOLVE_ERRORS, DomainError, ValidationError
from core.graph_builder import build_feature_batch
from core.models import MODE_ORDER, ControlMode, NetworkCase, apply_topology_change, case_index
from core.pg_gnn import CandidateSolution
from core.residuals import residual_bundle, residual_l1, violation
from core.scenarios import Scenario, apply_scenario
from core.trainer import ModelBank

logger = logging.getLogger(__name__)


# ═══════════════════════════════════════════════════════════
#  MULTI-MODEL INFERENCE
# ═══════════════════════════════════════════════════════════

@dataclass
class InferenceResult:
    solution:       CandidateSolution
    mode:           ControlMode
    infeasible_all: bool = False
    violations:     dict = field(default_factory=dict)     # mode → angle + tap violation
    residual_l1:    dict = field(default_factory=dict)     # mode → Σ |f|, empty when not needed

    def __iter__(self):
        yield self.solution
        yield self.mode


def select_mode(violations: dict, residuals: dict, policy: str = 'residual') -> tuple:
    """
    (chosen mode, infeasible_all) from per-mode violation and residual totals.

    residual : among feasible modes, the smallest residual wins
    priority : the first feasible mode in MODE_ORDER wins
    Residual totals are only read when more than one mode is feasible, or
    when none is.
    """
    if policy not in ('priority', 'residual'):
        raise ValidationError(f"unknown select policy {policy!r}")
    modes = [m for m in MODE_ORDER if m in violations]
    feasible = [m for m in modes if violations[m] <= C.FEASIBLE_TOL]
    if feasible:
        if policy == 'priority' or len(feasible) == 1:
            return feasible[0], False
        return min(feasible, key=lambda m: residuals[m]), False
    return min(modes, key=lambda m: (violations[m], residuals[m])), True


def _injection_matrix(case: NetworkCase, scenarios: list) -> tuple:
    if not scenarios:
        ix = case_index(case)
        return ix.p_inj[None], ix.q_inj[None]
    inj = [s.injections() for s in scenarios]
    return np.array([p for p, _ in inj]), np.array([q for _, q in inj])


def infer_multi_batch(bank: ModelBank, case: NetworkCase, scenarios: list = None,
                      policy: str = 'residual') -> list:
    """One feedforward per mode over the whole batch, then per-scenario selection."""
    if not len(bank):
        raise ValidationError("model bank is empty")
    p_inj, q_inj = _injection_matrix(case, scenarios or [])
    cands, viol = {}, {}
    for mode in bank.modes():
        feats = build_feature_batch(case, mode, p_inj, q_inj)
        cands[mode] = bank[mode].predict(case, feats).numpy()
        viol[mode] = violation(case, cands[mode])

    # residuals only when a violation tie-break or a residual comparison needs them
    n_feasible = sum((v <= C.FEASIBLE_TOL).astype(int) for v in viol.values())
    need = np.any(n_feasible == 0) or (policy == 'residual' and np.any(n_feasible > 1))
    resid = {m: residual_l1(case, cands[m], m, (p_inj, q_inj)) for m in cands} if need else {}

    out = []
    for i in range(p_inj.shape[0]):
        v_i = {m: float(viol[m][i]) for m in cands}
        r_i = {m: float(resid[m][i]) for m in resid}
        mode, flagged = select_mode(v_i, r_i, policy)
        if flagged:
            logger.debug(f"[eval] sample {i}: no feasible model, falling back to {mode.value}")
        out.append(InferenceResult(cands[mode].sample(i), mode, flagged, v_i, r_i))
    return out


def infer_multi(bank: ModelBank, case: NetworkCase, scenario: Scenario = None,
                policy: str = 'residual') -> InferenceResult:
    target = apply_scenario(case, scenario) if scenario is not None else case
    return infer_multi_batch(bank, target, None, policy)[0]


# ═══════════════════════════════════════════════════════════
#  METHODS
# ═══════════════════════════════════════════════════════════

@dataclass
class MethodRun:
    solutions:  list            # CandidateSolution per solved scenario
    modes:      list
    elapsed_ms: list
    flagged:    list = field(default_factory=list)


class BaseMethod:
    """Produces one solution per scenario; None marks a failure."""

    name = 'base'

    def run(self, case: NetworkCase, scenarios: list) -> MethodRun:
        raise NotImplementedError


class OracleMethod(BaseMethod):

    name = 'oracle'

    def __init__(self, tap_priority: str = 'rectifier'):
        self.tap_priority = tap_priority

    def run(self, case, scenarios):
        run = MethodRun([], [], [])
        for sc in scenarios:
            t0 = time.perf_counter()
            try:
                sol = solve_acdc_sequential(apply_scenario(case, sc), tap_priority=self.tap_priority)
            except (*SOLVE_ERRORS, DomainError) as e:
                logger.warning(f"[eval] oracle failed on draw {sc.draw}: {e}")
                sol = None
            run.elapsed_ms.append((time.perf_counter() - t0) * 1000.0)
            run.solutions.append(CandidateSolution.from_solution(sol) if sol is not None else None)
            run.modes.append(sol.mode if sol is not None else None)
            run.flagged.append(sol is None)
        return run


class MultiGnnMethod(BaseMethod):

    name = 'multi_pg_gnn'

    def __init__(self, bank: ModelBank, policy: str = 'residual'):
        self.bank   = bank
        self.policy = policy

    def run(self, case, scenarios):
        t0 = time.perf_counter()
        results = infer_multi_batch(self.bank, case, scenarios, self.policy)
        per = (time.perf_counter() - t0) * 1000.0 / max(len(results), 1)
        return MethodRun(
            solutions  = [r.solution for r in results],
            modes      = [r.mode for r in results],
            elapsed_ms = [per] * len(results),
            flagged    = [r.infeasible_all for r in results],
        )


# ═══════════════════════════════════════════════════════════
#  METRICS
# ═══════════════════════════════════════════════════════════

def _stats(values, unit: float = 1.0) -> dict:
    arr = np.asarray(values, dtype=float) / unit
    if arr.size == 0:
        return {'mean': float('nan'), 'var': float('nan'), 'std': float('nan')}
    return {'mean': float(arr.mean()), 'var': float(arr.var()), 'std': float(arr.std())}


@dataclass
class MetricsReport:
    case_name:   str
    n_scenarios: int
    skipped:     int
    methods:     dict                # name → summary dict
    per_scenario: pd.DataFrame
    per_bus:      pd.DataFrame

    def summary(self, name: str = MultiGnnMethod.name) -> dict:
        return self.methods[name]

    def to_dict(self) -> dict:
        return {
            'case':            self.case_name,
            'n_scenarios':     self.n_scenarios,
            'skipped':         self.skipped,
            'violation_unit':  C.VIOLATION_UNIT,
            'methods':         self.methods,
        }


def _compare(case: NetworkCase, cand: CandidateSolution, ref: CandidateSolution) -> tuple:
    ix = case_index(case)
    err_v = np.abs(cand.v - ref.v) / ref.v
    err_d = np.abs(cand.delta - ref.delta) / np.maximum(np.abs(ref.delta), C.MRE_ANGLE_FLOOR)
    err_d[ix.slack] = 0.0
    return err_v, err_d


def evaluate(bank: ModelBank, case: NetworkCase, test_set: list, out_dir: str = None,
             policy: str = 'residual', methods: list = None) -> MetricsReport:
    """
    Oracle plus every method in `methods` (default: the bank's multi-model
    selector) over the test scenarios. Scenarios the oracle cannot solve
    are skipped and counted.
    """
    if not test_set:
        raise ValidationError("test set is empty")
    oracle = OracleMethod().run(case, test_set)
    keep = [i for i, s in enumerate(oracle.solutions) if s is not None]
    skipped = len(test_set) - len(keep)
    if not keep:
        raise ValidationError("oracle failed on every test scenario")
    scenarios = [test_set[i] for i in keep]
    refs = [oracle.solutions[i] for i in keep]
    ref_modes = [oracle.modes[i] for i in keep]

    if methods is None:
        methods = [MultiGnnMethod(bank, policy)] if bank is not None else []
    runs = {OracleMethod.name: MethodRun(refs, ref_modes, [oracle.elapsed_ms[i] for i in keep],
                                         [False] * len(keep))}
    for method in methods:
        runs[method.name] = method.run(case, scenarios)

    ix = case_index(case)
    rows, bus_rows, summary = [], [], {}
    for name, run in runs.items():
        l1 = {'f_pqv': [], 'f_dc_eq': [], 'f_dc_con': []}
        mre_v, mre_d, hits = [], [], 0
        bus_v, bus_d = np.zeros(ix.n_bus), np.zeros(ix.n_bus)
        for i, (sc, cand, mode) in enumerate(zip(scenarios, run.solutions, run.modes)):
            bundle = residual_bundle(case, cand, None, sc.injections())
            norms = bundle.l1()
            for k in l1:
                l1[k].append(float(norms[k]))
            err_v, err_d = _compare(case, cand, refs[i])
            bus_v += err_v
            bus_d += err_d
            mre_v.append(float(err_v.mean()))
            mre_d.append(float(err_d[ix.nonslack].mean()) if ix.nonslack.size else 0.0)
            hits += int(mode == ref_modes[i])
            rows.append({
                'method':      name,
                'draw':        sc.draw,
                'mode':        mode.value if mode is not None else '',
                'oracle_mode': ref_modes[i].value,
                'f_pqv_l1':    l1['f_pqv'][-1],
                'f_dc_eq_l1':  l1['f_dc_eq'][-1],
                'f_dc_con_l1': l1['f_dc_con'][-1],
                'mre_v':       mre_v[-1],
                'mre_delta':   mre_d[-1],
                'elapsed_ms':  run.elapsed_ms[i],
                'flagged':     bool(run.flagged[i]) if run.flagged else False,
            })
        n = len(scenarios)
        for b, bus in enumerate(case.buses):
            bus_rows.append({'method': name, 'bus': bus.id, 'mre_v': bus_v[b] / n, 'mre_delta': bus_d[b] / n})
        summary[name] = {
            'f_pqv':         _stats(l1['f_pqv'], C.VIOLATION_UNIT),
            'f_dc_eq':       _stats(l1['f_dc_eq'], C.VIOLATION_UNIT),
            'f_dc_con':      _stats(l1['f_dc_con'], C.VIOLATION_UNIT),
            'elapsed_ms':    _stats(run.elapsed_ms),
            'mre_v':         _stats(mre_v),
            'mre_delta':     _stats(mre_d),
            'mode_accuracy': hits / n,
            'flagged':       int(sum(bool(f) for f in run.flagged)),
        }
        logger.info(f"[eval] {name}: |f_pqv| {summary[name]['f_pqv']['mean']:.3g}e-5 p.u., "
                    f"MRE_V {summary[name]['mre_v']['mean']:.4%}, mode accuracy {hits}/{n}")

    report = MetricsReport(case.name, len(scenarios), skipped, summary,
                           pd.DataFrame(rows), pd.DataFrame(bus_rows))
    if out_dir:
        write_report(report, out_dir)
    return report


def write_report(report: MetricsReport, out_dir: str) -> list:
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, f) for f in ('metrics.csv', 'mre_per_bus.csv', 'summary.json')]
    report.per_scenario.to_csv(paths[0], index=False)
    report.per_bus.to_csv(paths[1], index=False)
    with open(paths[2], 'w', encoding='utf-8') as fh:
        json.dump(report.to_dict(), fh, indent=2)
    logger.info(f"[eval] report written to {out_dir}")
    return paths


# ═══════════════════════════════════════════════════════════
#  TIMING
# ═══════════════════════════════════════════════════════════

def bench_time(bank: ModelBank, case: NetworkCase, test_set: list, repeats: int = 3,
               policy: str = 'residual') -> dict:
    """
    Per-scenario wall clock of one oracle solve vs one multi-model
    inference. Also reports the batched path (one feedforward per mode over
    every scenario) amortized per scenario.
    """
    if repeats < 3:
        raise ValidationError(f"repeats must be ≥ 3, got {repeats}")
    if not test_set:
        raise ValidationError("test set is empty")
    cases = [apply_scenario(case, sc) for sc in test_set]

    # warmup: caches (case index, spectral basis) and first-call overheads
    solve_acdc_sequential(cases[0])
    infer_multi(bank, cases[0], policy=policy)

    oracle_ms, gnn_ms = [], []
    for _ in range(repeats):
        for c in cases:
            t0 = time.perf_counter()
            try:
                solve_acdc_sequential(c)
            except SOLVE_ERRORS:
                continue
            oracle_ms.append((time.perf_counter() - t0) * 1000.0)
            t0 = time.perf_counter()
            infer_multi(bank, c, policy=policy)
            gnn_ms.append((time.perf_counter() - t0) * 1000.0)

    batch_ms = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        infer_multi_batch(bank, case, test_set, policy)
        batch_ms.append((time.perf_counter() - t0) * 1000.0 / len(test_set))

    oracle, gnn, batch = _stats(oracle_ms), _stats(gnn_ms), _stats(batch_ms)
    speedup = oracle['mean'] / gnn['mean'] if gnn['mean'] > 0 else float('inf')
    speedup_batch = oracle['mean'] / batch['mean'] if batch['mean'] > 0 else float('inf')
    logger.info(f"[bench] oracle {oracle['mean']:.2f} ms, multi-model {gnn['mean']:.2f} ms, "
                f"speedup {speedup:.1f}x over {len(gnn_ms)} timed runs, batched {speedup_batch:.1f}x")
    return {'oracle_ms': oracle, 'gnn_ms': gnn, 'speedup': speedup,
            'gnn_batch_ms': batch, 'speedup_batch': speedup_batch,
            'repeats': repeats, 'samples': len(gnn_ms)}


# ═══════════════════════════════════════════════════════════
#  TOPOLOGY STUDY
# ═══════════════════════════════════════════════════════════

@dataclass
class TopologyStudy:
    branch:      tuple
    intact:      MetricsReport
    tripped:     MetricsReport
    degradation: float                # tripped / intact mean MRE_V


def topology_study(bank: ModelBank, case: NetworkCase, branch: tuple, test_set: list,
                   out_dir: str = None, policy: str = 'residual') -> TopologyStudy:
    """Same parameters, tripped graph: Z follows the surviving edges."""
    tripped_case = apply_topology_change(case, branch)
    intact = evaluate(bank, case, test_set, policy=policy)
    tripped = evaluate(bank, tripped_case, test_set, policy=policy)

    base = intact.summary()['mre_v']['mean']
    after = tripped.summary()['mre_v']['mean']
    degradation = after / base if base > 0 else float('inf') if after > 0 else 1.0
    logger.info(f"[trip] branch {tuple(branch)}: MRE_V {base:.4%} → {after:.4%} ({degradation:.2f}x)")

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        name = MultiGnnMethod.name
        a = intact.per_bus[intact.per_bus['method'] == name].set_index('bus')
        b = tripped.per_bus[tripped.per_bus['method'] == name].set_index('bus')
        df = pd.DataFrame({
            'bus':               a.index,
            'mre_v_intact':      a['mre_v'].values,
            'mre_delta_intact':  a['mre_delta'].values,
            'mre_v_tripped':     b['mre_v'].reindex(a.index).values,
            'mre_delta_tripped': b['mre_delta'].reindex(a.index).values,
        })
        df.to_csv(os.path.join(out_dir, 'trip_mre.csv'), index=False)
    return TopologyStudy(tuple(branch), intact, tripped, degradation)
