"""
core/acdc_solver.py
───────────────────
Model-based sequential AC/DC power flow (the reference oracle).

  AC side  : polar Newton-Raphson with an analytic Jacobian, dense LU
  DC side  : closed-form quasi-steady-state converter solve per link
  Coupling : PCC injections exchanged until they stop moving

The physics primitives at the top (branch_flow, converter_voltage) are
written against core.autodiff's functional API so the residual module
reuses them verbatim on the tape.
"""

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from core import autodiff as ad
from core.config import C
from core.errors import DomainError, InfeasibleDc, NoConvergence, SingularJacobian
from core.models import ControlMode, DcLink, NetworkCase, case_index

logger = logging.getLogger(__name__)

K_V = 3.0 * math.sqrt(2.0) / math.pi      # ideal no-load DC voltage per unit tap·V_c
K_X = 3.0 / math.pi                        # commutation drop per unit X_c·I_d


# ═══════════════════════════════════════════════════════════
#  PHYSICS PRIMITIVES
# ═══════════════════════════════════════════════════════════

def branch_flow(v_i, v_j, delta_ij, g, b):
    """Active / reactive flow leaving bus i on the series branch i→j."""
    c = ad.cos(delta_ij)
    s = ad.sin(delta_ij)
    vv = v_i * v_j
    p = v_i * v_i * g - vv * (g * c + b * s)
    q = -(v_i * v_i * b) - vv * (g * s - b * c)
    return p, q


def converter_voltage(k, v_c, angle, x_c, i_d):
    """DC terminal voltage; α for the rectifier, γ for the inverter."""
    return K_V * k * v_c * ad.cos(angle) - K_X * x_c * i_d


def dc_line_current(v_re: float, v_iv: float, r_dc: float) -> float:
    i_d = (v_re - v_iv) / r_dc
    if i_d < 0:
        logger.warning(f"[acdc] reverse DC flow: i_d={i_d:.6g} (v_re={v_re:.6g}, v_iv={v_iv:.6g})")
    return i_d


def power_factor_angle(v_d: float, k: float, v_c: float) -> float:
    ratio = v_d / (K_V * k * v_c)
    if not 0.0 < ratio <= 1.0 + C.RATIO_SLACK:
        raise DomainError(f"power factor ratio {ratio:.6g} outside (0, 1]")
    return math.acos(min(ratio, 1.0))


# ═══════════════════════════════════════════════════════════
#  STATE TYPES
# ═══════════════════════════════════════════════════════════

@dataclass
class AcState:
    v:          np.ndarray
    delta:      np.ndarray
    iterations: int = 0
    mismatch:   float = 0.0


@dataclass
class DcState:
    mode:   ControlMode
    i_d:    float
    v_d_re: float
    v_d_iv: float
    alpha:  float
    gamma:  float
    k_re:   float
    k_iv:   float
    phi_re: float
    phi_iv: float

    @property
    def p_re(self) -> float:
        return self.v_d_re * self.i_d

    @property
    def p_iv(self) -> float:
        return self.v_d_iv * self.i_d

    @property
    def q_re(self) -> float:
        return self.p_re * math.tan(self.phi_re)

    @property
    def q_iv(self) -> float:
        return self.p_iv * math.tan(self.phi_iv)


@dataclass
class PowerFlowSolution:
    ac:         AcState
    dc:         list
    mode_used:  tuple
    iterations: int
    converged:  bool
    newton_iterations: int = 0
    max_residual:      float = 0.0
    elapsed_ms:        float = 0.0
    history:           list = field(default_factory=list)

    @property
    def mode(self) -> ControlMode:
        """Network-level label: Mode2 if any link had to switch."""
        return ControlMode.MODE2 if ControlMode.MODE2 in self.mode_used else ControlMode.MODE1


# ═══════════════════════════════════════════════════════════
#  DC SUBSYSTEM
# ═══════════════════════════════════════════════════════════

def _regulate(v_d, v_c, x_c, i_d, angle_min, link: DcLink, side: str, index: int):
    """Tap toward the middle of the preferred band, clamp, re-solve the angle."""
    need = v_d + K_X * x_c * i_d
    target = angle_min + C.ANGLE_BAND_OFFSET
    k_free = need / (K_V * v_c * math.cos(target))
    k = min(max(k_free, link.k_min), link.k_max)
    if k != k_free:
        logger.debug(f"[acdc] link {index} {side}: tap {k_free:.4f} clamped to {k:.4f}")
    cos_a = need / (K_V * k * v_c)
    if cos_a > 1.0:
        raise InfeasibleDc(index, side, 0.0, angle_min)
    angle = math.acos(max(cos_a, -1.0))
    if angle < angle_min - 1e-12:
        raise InfeasibleDc(index, side, angle, angle_min)
    return k, angle


def solve_dc_subsystem(link: DcLink, v_pcc_re: float, v_pcc_iv: float, mode: ControlMode = None,
                       tap_priority: str = 'rectifier', index: int = 0) -> DcState:
    if not (v_pcc_re > 0 and v_pcc_iv > 0):
        raise DomainError(f"dc_links[{index}]: PCC voltages must be positive")
    mode = mode or link.mode
    link.check_mode_data(mode, index)

    if mode == ControlMode.MODE1:
        i_d = link.i_ref_re
        v_d_iv = link.v_ref_iv
        v_d_re = v_d_iv + link.r_dc * i_d
        sides = {
            'rectifier': lambda: _regulate(v_d_re, v_pcc_re, link.x_c_re, i_d, link.alpha_min,
                                           link, 'rectifier', index),
            'inverter':  lambda: _regulate(v_d_iv, v_pcc_iv, link.x_c_iv, i_d, link.gamma_min,
                                           link, 'inverter', index),
        }
        order = ('rectifier', 'inverter') if tap_priority == 'rectifier' else ('inverter', 'rectifier')
        solved = {side: sides[side]() for side in order}
        k_re, alpha = solved['rectifier']
        k_iv, gamma = solved['inverter']
    else:
        i_d = link.i_ref_iv
        alpha = link.alpha_min
        k_re = link.k_max
        v_d_re = converter_voltage(k_re, v_pcc_re, alpha, link.x_c_re, i_d)
        v_d_iv = v_d_re - link.r_dc * i_d
        if v_d_iv <= 0:
            raise InfeasibleDc(index, 'inverter', 0.0, link.gamma_min)
        k_iv, gamma = _regulate(v_d_iv, v_pcc_iv, link.x_c_iv, i_d, link.gamma_min,
                                link, 'inverter', index)

    dc_line_current(v_d_re, v_d_iv, link.r_dc)
    return DcState(
        mode   = mode,
        i_d    = float(i_d),
        v_d_re = float(v_d_re),
        v_d_iv = float(v_d_iv),
        alpha  = float(alpha),
        gamma  = float(gamma),
        k_re   = float(k_re),
        k_iv   = float(k_iv),
        phi_re = power_factor_angle(v_d_re, k_re, v_pcc_re),
        phi_iv = power_factor_angle(v_d_iv, k_iv, v_pcc_iv),
    )


def dc_injections(case: NetworkCase, states: list) -> dict:
    """
    PCC injections seen by the AC side: the rectifier draws V_d·I_d,
    the inverter delivers it; both sides consume V_d·I_d·tan φ.
    """
    inj = {}
    for link, st in zip(case.dc_links, states):
        p, q = inj.get(link.rect_pcc, (0.0, 0.0))
        inj[link.rect_pcc] = (p - st.p_re, q - st.q_re)
        p, q = inj.get(link.inv_pcc, (0.0, 0.0))
        inj[link.inv_pcc] = (p + st.p_iv, q - st.q_iv)
    return inj


# ═══════════════════════════════════════════════════════════
#  AC NEWTON
# ═══════════════════════════════════════════════════════════

def build_ybus(case: NetworkCase) -> np.ndarray:
    ix = case_index(case)
    inc = ix.sf - ix.st
    y = ix.g + 1j * ix.b
    return inc.T @ (y[:, None] * inc)


def _dsbus_dv(ybus, v, ibus):
    diag_v = np.diag(v)
    diag_i = np.diag(ibus)
    diag_vnorm = np.diag(v / np.abs(v))
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    return ds_dvm, ds_dva


def _lu_step(jac: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', LinAlgWarning)
        lu, piv = lu_factor(jac)
    pivots = np.abs(np.diag(lu))
    if not np.all(np.isfinite(pivots)) or pivots.min() <= C.PIVOT_FLOOR * max(pivots.max(), 1.0):
        raise SingularJacobian(f"Jacobian pivot {pivots.min():.3e} (size {jac.shape[0]})")
    return lu_solve((lu, piv), rhs)


def _spec_power(case: NetworkCase, dc_inj: dict) -> np.ndarray:
    ix = case_index(case)
    p = ix.p_inj.copy()
    q = ix.q_inj.copy()
    for bus_id, (dp, dq) in (dc_inj or {}).items():
        k = ix.pos[bus_id]
        p[k] += dp
        q[k] += dq
    return p + 1j * q


def solve_ac_newton(case: NetworkCase, dc_injections: dict = None, start: AcState = None,
                    tol: float = None, max_iter: int = None) -> AcState:
    """
    Newton-Raphson on the AC network with DC injections frozen.
    Iterations count mismatch evaluations (an already-solved start reports 1).
    """
    tol = C.TOL_AC if tol is None else tol
    max_iter = C.MAX_NEWTON if max_iter is None else max_iter
    ix = case_index(case)
    ybus = build_ybus(case)
    s_spec = _spec_power(case, dc_injections)

    if start is None:
        vm, va = np.ones(ix.n_bus), np.zeros(ix.n_bus)
    else:
        if np.any(np.asarray(start.v) <= 0):
            raise DomainError("start voltages must be positive")
        vm, va = np.array(start.v, dtype=float), np.array(start.delta, dtype=float)
    pinned = ix.pinned > 0
    vm[pinned] = ix.v_ref[pinned]
    va[ix.slack] = 0.0

    pvpq, pq = ix.nonslack, ix.pq
    n_ang = len(pvpq)
    norm = float('inf')
    for it in range(1, max_iter + 1):
        v = vm * np.exp(1j * va)
        ibus = ybus @ v
        mis = v * np.conj(ibus) - s_spec
        f = np.r_[mis.real[pvpq], mis.imag[pq]]
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        logger.debug(f"[newton] iter {it}: max mismatch {norm:.3e}")
        if not math.isfinite(norm):
            raise NoConvergence(it, norm)
        if norm < tol:
            return AcState(v=vm, delta=va, iterations=it, mismatch=norm)
        if it == max_iter:
            break

        ds_dvm, ds_dva = _dsbus_dv(ybus, v, ibus)
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dva.imag[np.ix_(pq, pvpq)],   ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        dx = _lu_step(jac, -f)
        va[pvpq] += dx[:n_ang]
        vm[pq] += dx[n_ang:]
        if not np.all(np.isfinite(vm)) or np.any(vm <= 0):
            raise NoConvergence(it, norm, 'newton (voltage collapse)')

    raise NoConvergence(max_iter, norm)


# ═══════════════════════════════════════════════════════════
#  SEQUENTIAL COUPLING
# ═══════════════════════════════════════════════════════════

def _injection_vector(states: list) -> np.ndarray:
    return np.array([x for st in states for x in (st.p_re, st.q_re, st.p_iv, st.q_iv)])


def _final_mismatch(case: NetworkCase, ac: AcState, states: list) -> float:
    ix = case_index(case)
    v = ac.v * np.exp(1j * ac.delta)
    mis = v * np.conj(build_ybus(case) @ v) - _spec_power(case, dc_injections(case, states))
    worst = [np.abs(mis.real[ix.nonslack]), np.abs(mis.imag[ix.pq])]
    for link, st, r, i in zip(case.dc_links, states, ix.rect, ix.inv):
        worst.append(np.abs([
            st.v_d_re - converter_voltage(st.k_re, ac.v[r], st.alpha, link.x_c_re, st.i_d),
            st.v_d_iv - converter_voltage(st.k_iv, ac.v[i], st.gamma, link.x_c_iv, st.i_d),
            link.r_dc * st.i_d - (st.v_d_re - st.v_d_iv),
        ]))
    flat = np.concatenate([np.ravel(w) for w in worst]) if worst else np.zeros(0)
    return float(flat.max()) if flat.size else 0.0


def solve_acdc_sequential(case: NetworkCase, mode: ControlMode = None, tap_priority: str = 'rectifier',
                          tol_couple: float = None, tol_total: float = None,
                          max_rounds: int = None) -> PowerFlowSolution:
    """
    Alternate AC Newton and DC closed-form solves until PCC injections
    settle. With mode=None every link starts in Mode1 and moves to Mode2
    (for good) once its rectifier cannot hold α ≥ α_min; an explicit
    mode is forced on every link.
    """
    tol_couple = C.TOL_COUPLE if tol_couple is None else tol_couple
    tol_total = C.TOL_TOTAL if tol_total is None else tol_total
    max_rounds = C.MAX_COUPLING if max_rounds is None else max_rounds
    t0 = time.perf_counter()

    ix = case_index(case)
    modes = [mode or ControlMode.MODE1] * len(case.dc_links)
    inj, prev = {}, None
    newton_total, history = 0, []
    delta = float('inf')

    for rnd in range(1, max_rounds + 1):
        ac = solve_ac_newton(case, inj)
        newton_total += ac.iterations
        states = []
        for k, link in enumerate(case.dc_links):
            v_re, v_iv = float(ac.v[ix.rect[k]]), float(ac.v[ix.inv[k]])
            try:
                st = solve_dc_subsystem(link, v_re, v_iv, modes[k], tap_priority, k)
            except InfeasibleDc as e:
                if mode is not None or modes[k] == ControlMode.MODE2 or e.side != 'rectifier':
                    raise
                logger.info(f"[acdc] link {k}: alpha {math.degrees(e.angle):.2f} deg below "
                            f"minimum at round {rnd}, switching Mode1 -> Mode2")
                modes[k] = ControlMode.MODE2
                st = solve_dc_subsystem(link, v_re, v_iv, modes[k], tap_priority, k)
            states.append(st)

        vec = _injection_vector(states)
        if prev is not None:
            delta = float(np.max(np.abs(vec - prev))) if vec.size else 0.0
        elif not vec.size:
            delta = 0.0
        history.append({'round': rnd, 'newton_iterations': ac.iterations, 'coupling_delta': delta})
        logger.debug(f"[acdc] round {rnd}: coupling change {delta:.3e}")

        if delta < tol_couple:
            worst = _final_mismatch(case, ac, states)
            converged = worst < tol_total
            elapsed = (time.perf_counter() - t0) * 1000.0
            if converged:
                logger.info(f"[acdc] {case.name!r} converged in {rnd} rounds "
                            f"({newton_total} Newton iterations), modes "
                            f"{[m.value for m in modes]}, {elapsed:.1f} ms")
            else:
                logger.warning(f"[acdc] {case.name!r}: coupling settled but residual {worst:.3e} "
                               f">= {tol_total:.1e}")
            return PowerFlowSolution(
                ac                = ac,
                dc                = states,
                mode_used         = tuple(modes),
                iterations        = rnd,
                converged         = converged,
                newton_iterations = newton_total,
                max_residual      = worst,
                elapsed_ms        = elapsed,
                history           = history,
            )
        inj, prev = dc_injections(case, states), vec

    raise NoConvergence(max_rounds, delta, 'ac/dc coupling')


# ═══════════════════════════════════════════════════════════
#  REPORTS
# ═══════════════════════════════════════════════════════════

def power_balance(case: NetworkCase, sol: PowerFlowSolution) -> dict:
    """Generation, load and losses in p.u.; imbalance should be ~0."""
    ix = case_index(case)
    v = sol.ac.v * np.exp(1j * sol.ac.delta)
    s_bus = v * np.conj(build_ybus(case) @ v)
    dc = _spec_power(case, dc_injections(case, sol.dc)) - (ix.p_inj + 1j * ix.q_inj)

    p_load = np.array([b.p_load for b in case.buses])
    p_gen = np.array([b.p_gen for b in case.buses])
    slack_gen = s_bus.real[ix.slack] - dc.real[ix.slack] + p_load[ix.slack]
    generation = float(p_gen.sum() - p_gen[ix.slack] + slack_gen)

    d = sol.ac.delta[ix.f] - sol.ac.delta[ix.t]
    p_ft, _ = branch_flow(sol.ac.v[ix.f], sol.ac.v[ix.t], d, ix.g, ix.b)
    p_tf, _ = branch_flow(sol.ac.v[ix.t], sol.ac.v[ix.f], -d, ix.g, ix.b)
    ac_losses = float(np.sum(p_ft + p_tf))
    dc_losses = float(sum(link.r_dc * st.i_d ** 2 for link, st in zip(case.dc_links, sol.dc)))
    load = float(p_load.sum())
    return {
        'generation': generation,
        'slack_p':    float(slack_gen),
        'load':       load,
        'ac_losses':  ac_losses,
        'dc_losses':  dc_losses,
        'imbalance':  generation - load - ac_losses - dc_losses,
    }


def solution_to_dict(sol: PowerFlowSolution, case: NetworkCase) -> dict:
    return {
        'case':       case.name,
        'converged':  bool(sol.converged),
        'iterations': int(sol.iterations),
        'mode_used':  [m.value for m in sol.mode_used],
        'buses': [
            {'id': b.id, 'v': float(sol.ac.v[i]), 'delta_deg': math.degrees(sol.ac.delta[i])}
            for i, b in enumerate(case.buses)
        ],
        'dc_links': [
            {
                'link': k,
                'mode': st.mode.value,
                'i_d':  st.i_d,
                'rectifier': {
                    'v_d': st.v_d_re, 'alpha_deg': math.degrees(st.alpha),
                    'k': st.k_re, 'phi_deg': math.degrees(st.phi_re),
                },
                'inverter': {
                    'v_d': st.v_d_iv, 'gamma_deg': math.degrees(st.gamma),
                    'k': st.k_iv, 'phi_deg': math.degrees(st.phi_iv),
                },
            }
            for k, st in enumerate(sol.dc)
        ],
    }
