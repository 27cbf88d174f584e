"""
core/residuals.py
─────────────────
Power-flow physics written as residual vectors. Each function works on
a CandidateSolution whose arrays are either plain ndarrays or autodiff
Vars, with an optional leading batch axis, so the same definitions
serve as training losses and as evaluation metrics.

  f_pqv    : ΔP (non-slack) | ΔQ (PQ + PCC) | V − v_ref (PV)
  f_dc_eq  : converter voltage re | iv | line current | power factor re | iv
  f_dc_con : the control mode's two fixed references per link
  penalties: angle floor, tap range, tap regulation
"""

import logging
from dataclasses import dataclass

import numpy as np

from core import autodiff as ad
from core.acdc_solver import K_V, PowerFlowSolution, branch_flow, converter_voltage
from core.config import C
from core.errors import ShapeMismatch
from core.models import ControlMode, NetworkCase, case_index
from core.pg_gnn import CandidateSolution

logger = logging.getLogger(__name__)


def as_candidate(sol) -> CandidateSolution:
    if isinstance(sol, PowerFlowSolution):
        return CandidateSolution.from_solution(sol)
    return sol


def _tan_phi(cos_phi):
    sin_phi = ad.sqrt(ad.clamp_min(1.0 - ad.square(cos_phi), C.SQRT_GUARD))
    return sin_phi / ad.clamp_min(cos_phi, C.COS_PHI_FLOOR)


def _link_modes(sol: CandidateSolution, mode: ControlMode, n_link: int) -> tuple:
    modes = (mode,) * n_link if mode is not None else tuple(sol.modes)
    if len(modes) != n_link:
        raise ShapeMismatch(f"{len(modes)} link modes for {n_link} dc links")
    return modes


# ═══════════════════════════════════════════════════════════
#  AC BALANCE
# ═══════════════════════════════════════════════════════════

def dc_bus_power(case: NetworkCase, sol) -> tuple:
    """(P, Q) the DC links inject at each bus; the rectifier draws, the inverter feeds."""
    ix = case_index(case)
    sol = as_candidate(sol)
    p_re = sol.v_dre * sol.i_d
    p_iv = sol.v_div * sol.i_d
    q_re = p_re * _tan_phi(sol.cos_phi_re)
    q_iv = p_iv * _tan_phi(sol.cos_phi_iv)
    p = ad.matmul(p_iv, ix.inv_sel) - ad.matmul(p_re, ix.rect_sel)
    q = -(ad.matmul(q_re, ix.rect_sel) + ad.matmul(q_iv, ix.inv_sel))
    return p, q


def bus_flows(case: NetworkCase, v, delta) -> tuple:
    """Net (P, Q) leaving each bus over the closed AC branches."""
    ix = case_index(case)
    v_f, v_t = ad.take(v, ix.f, axis=-1), ad.take(v, ix.t, axis=-1)
    d_ft = ad.take(delta, ix.f, axis=-1) - ad.take(delta, ix.t, axis=-1)
    p_ft, q_ft = branch_flow(v_f, v_t, d_ft, ix.g, ix.b)
    p_tf, q_tf = branch_flow(v_t, v_f, -d_ft, ix.g, ix.b)
    p = ad.matmul(p_ft, ix.sf) + ad.matmul(p_tf, ix.st)
    q = ad.matmul(q_ft, ix.sf) + ad.matmul(q_tf, ix.st)
    return p, q


def residual_pqv(case: NetworkCase, sol, inj: tuple = None):
    """
    Layout along the last axis, width n_nonslack + n_pq + n_pv:
      ΔP at every non-slack bus (PV buses included) | ΔQ at PQ and PCC buses
      | V − V_ref at PV buses.
    PV buses therefore contribute two rows. The V − V_ref block is
    identically zero for decoded candidates, whose PV voltages are pinned,
    and only bites for oracle or hand-built solutions.

    inj : optional (p_inj, q_inj) per-bus net injections overriding the
          case's own, shape (N,) or (S, N) to match a batched candidate.
    """
    ix = case_index(case)
    sol = as_candidate(sol)
    p_inj, q_inj = inj if inj is not None else (ix.p_inj, ix.q_inj)
    p_dc, q_dc = dc_bus_power(case, sol)
    p_flow, q_flow = bus_flows(case, sol.v, sol.delta)
    dp = (p_inj + p_dc) - p_flow
    dq = (q_inj + q_dc) - q_flow
    return ad.concat([
        ad.take(dp, ix.nonslack, axis=-1),
        ad.take(dq, ix.pq, axis=-1),
        ad.take(sol.v, ix.pv, axis=-1) - ix.v_ref[ix.pv],
    ], axis=-1)


# ═══════════════════════════════════════════════════════════
#  DC EQUATIONS AND CONTROL
# ═══════════════════════════════════════════════════════════

def residual_dc_eq(case: NetworkCase, sol):
    ix = case_index(case)
    sol = as_candidate(sol)
    links = ix.links
    v_re = ad.take(sol.v, ix.rect, axis=-1)
    v_iv = ad.take(sol.v, ix.inv, axis=-1)
    return ad.concat([
        sol.v_dre - converter_voltage(sol.k_re, v_re, sol.alpha, links['x_c_re'], sol.i_d),
        sol.v_div - converter_voltage(sol.k_iv, v_iv, sol.gamma, links['x_c_iv'], sol.i_d),
        sol.i_d - (sol.v_dre - sol.v_div) / links['r_dc'],
        sol.cos_phi_re - sol.v_dre / (K_V * sol.k_re * v_re),
        sol.cos_phi_iv - sol.v_div / (K_V * sol.k_iv * v_iv),
    ], axis=-1)


def residual_dc_con(case: NetworkCase, sol, mode: ControlMode = None):
    """
    Mode1 link → [I_d − I_ref_re,  V_d_iv − V_ref_iv]
    Mode2 link → [α − α_min,       I_d − I_ref_iv]
    `mode` forces every link; otherwise each link uses its own label.
    """
    ix = case_index(case)
    sol = as_candidate(sol)
    modes = _link_modes(sol, mode, ix.n_link)
    for k, (link, m) in enumerate(zip(case.dc_links, modes)):
        link.check_mode_data(m, k)

    links = {name: np.nan_to_num(arr) for name, arr in ix.links.items()}
    m1 = np.array([1.0 if m == ControlMode.MODE1 else 0.0 for m in modes])
    m2 = 1.0 - m1
    first = m1 * (sol.i_d - links['i_ref_re']) + m2 * (sol.alpha - links['alpha_min'])
    second = m1 * (sol.v_div - links['v_ref_iv']) + m2 * (sol.i_d - links['i_ref_iv'])
    return ad.concat([first, second], axis=-1)


# ═══════════════════════════════════════════════════════════
#  PENALTIES
# ═══════════════════════════════════════════════════════════

def penalty_angle(case: NetworkCase, sol):
    """Σ ReLU(α_min − α) + ReLU(γ_min − γ) per sample."""
    links = case_index(case).links
    sol = as_candidate(sol)
    return (ad.reduce_sum(ad.relu(links['alpha_min'] - sol.alpha), axis=-1)
            + ad.reduce_sum(ad.relu(links['gamma_min'] - sol.gamma), axis=-1))


def penalty_tap(case: NetworkCase, sol):
    """Σ over both converters of ReLU(K − K_max) + ReLU(K_min − K)."""
    links = case_index(case).links
    sol = as_candidate(sol)
    total = None
    for k in (sol.k_re, sol.k_iv):
        term = (ad.reduce_sum(ad.relu(k - links['k_max']), axis=-1)
                + ad.reduce_sum(ad.relu(links['k_min'] - k), axis=-1))
        total = term if total is None else total + term
    return total


def regulation(case: NetworkCase, sol, mode: ControlMode = None):
    """
    Squared distance to the oracle's preferred operating point:
    Mode1 angles at min + band offset; Mode2 γ there and K_re at K_max.
    """
    ix = case_index(case)
    sol = as_candidate(sol)
    links = ix.links
    modes = _link_modes(sol, mode, ix.n_link)
    m1 = np.array([1.0 if m == ControlMode.MODE1 else 0.0 for m in modes])
    m2 = 1.0 - m1
    off = C.ANGLE_BAND_OFFSET
    d_alpha = sol.alpha - (links['alpha_min'] + off)
    d_gamma = sol.gamma - (links['gamma_min'] + off)
    d_tap = sol.k_re - links['k_max']
    per_link = m1 * ad.square(d_alpha) + ad.square(d_gamma) + m2 * ad.square(d_tap)
    return ad.reduce_sum(per_link, axis=-1)


# ═══════════════════════════════════════════════════════════
#  BUNDLE
# ═══════════════════════════════════════════════════════════

@dataclass
class ResidualBundle:
    f_pqv:    object
    f_dc_eq:  object
    f_dc_con: object
    f_dc_k:   object
    f_dc_ang: object
    f_dc_reg: object

    def constraints(self):
        """Equality residuals in multiplier order: pqv | dc_eq | dc_con."""
        return ad.concat([self.f_pqv, self.f_dc_eq, self.f_dc_con], axis=-1)

    @property
    def group_sizes(self) -> dict:
        """Width of each equality group, in multiplier order."""
        return {name: int(np.shape(ad.value_of(getattr(self, f'f_{name}')))[-1])
                for name in ('pqv', 'dc_eq', 'dc_con')}

    @property
    def n_constraints(self) -> int:
        return sum(self.group_sizes.values())

    def l1(self) -> dict:
        """Per-sample L1 norm of each equality group (ndarrays)."""
        return {name: np.sum(np.abs(ad.value_of(getattr(self, name))), axis=-1)
                for name in ('f_pqv', 'f_dc_eq', 'f_dc_con')}

    def violation(self) -> np.ndarray:
        """Per-sample angle + tap violation."""
        return np.asarray(ad.value_of(self.f_dc_ang)) + np.asarray(ad.value_of(self.f_dc_k))


def residual_bundle(case: NetworkCase, sol, mode: ControlMode = None, inj: tuple = None) -> ResidualBundle:
    sol = as_candidate(sol)
    return ResidualBundle(
        f_pqv    = residual_pqv(case, sol, inj),
        f_dc_eq  = residual_dc_eq(case, sol),
        f_dc_con = residual_dc_con(case, sol, mode),
        f_dc_k   = penalty_tap(case, sol),
        f_dc_ang = penalty_angle(case, sol),
        f_dc_reg = regulation(case, sol, mode),
    )


# ═══════════════════════════════════════════════════════════
#  SELECTION SCORES
# ═══════════════════════════════════════════════════════════

def violation(case: NetworkCase, sol) -> np.ndarray:
    """Per-sample angle + tap violation, without the equality residuals."""
    sol = as_candidate(sol)
    return np.asarray(ad.value_of(penalty_angle(case, sol))) + np.asarray(ad.value_of(penalty_tap(case, sol)))


def residual_l1(case: NetworkCase, sol, mode: ControlMode = None, inj: tuple = None) -> np.ndarray:
    """Per-sample Σ|f| over the pqv, dc_eq and dc_con groups."""
    sol = as_candidate(sol)
    groups = (residual_pqv(case, sol, inj), residual_dc_eq(case, sol), residual_dc_con(case, sol, mode))
    return sum(np.sum(np.abs(ad.value_of(f)), axis=-1) for f in groups)
