from dataclasses import replace

import numpy as np
import pytest

from core.acdc_solver import solve_acdc_sequential
from core.config import C
from core.errors import ModeDataMissing
from core.models import ControlMode, case_index
from core.pg_gnn import CandidateSolution, decode_outputs
from core.residuals import (
    bus_flows, penalty_angle, penalty_tap, regulation, residual_bundle, residual_dc_con, residual_dc_eq,
    residual_l1, residual_pqv, violation,
)


@pytest.fixture(scope='module')
def oracle(fig1):
    return solve_acdc_sequential(fig1)


@pytest.fixture
def cand(oracle):
    return CandidateSolution.from_solution(oracle)


def test_oracle_solution_satisfies_every_equation(fig1, oracle):
    assert np.max(np.abs(residual_pqv(fig1, oracle))) < 1e-6
    assert np.max(np.abs(residual_dc_eq(fig1, oracle))) < 1e-9
    assert np.max(np.abs(residual_dc_con(fig1, oracle))) < 1e-9
    bundle = residual_bundle(fig1, oracle)
    assert bundle.violation() == pytest.approx(0.0)
    assert bundle.n_constraints == 4 + 3 + 1 + 5 + 2


def test_ieee30_oracle_balance(ieee30):
    sol = solve_acdc_sequential(ieee30)
    assert np.max(np.abs(residual_pqv(ieee30, sol))) < 1e-6


def test_flat_profile_carries_no_flow(fig1):
    p, q = bus_flows(fig1, np.ones(5), np.zeros(5))
    np.testing.assert_allclose(p, 0.0, atol=1e-12)
    np.testing.assert_allclose(q, 0.0, atol=1e-12)


def test_dc_line_imbalance(fig1, cand):
    shifted = replace(cand, v_dre=cand.v_dre + 0.01)
    f = residual_dc_eq(fig1, shifted)
    assert f[2] == pytest.approx(-0.1)
    assert f[0] == pytest.approx(0.01)


def test_mode2_constraint_on_current(fig1, cand):
    f = residual_dc_con(fig1, replace(cand, i_d=np.array([0.37])), ControlMode.MODE2)
    assert f[1] == pytest.approx(0.1)
    assert f[0] == pytest.approx(cand.alpha[0] - fig1.dc_links[0].alpha_min)


def test_mode1_constraint_on_inverter_voltage(fig1, cand):
    f = residual_dc_con(fig1, replace(cand, v_div=cand.v_div + 0.05), ControlMode.MODE1)
    assert f.tolist() == pytest.approx([0.0, 0.05])


def test_constraint_needs_mode_data(fig1, cand):
    case = replace(fig1, dc_links=(replace(fig1.dc_links[0], i_ref_iv=None),))
    with pytest.raises(ModeDataMissing):
        residual_dc_con(case, cand, ControlMode.MODE2)


def test_penalties(fig1, cand):
    link = fig1.dc_links[0]
    low = replace(cand, alpha=np.array([link.alpha_min - 0.02]))
    assert penalty_angle(fig1, low) == pytest.approx(0.02)
    high = replace(cand, k_re=np.array([link.k_max + 0.01]))
    assert penalty_tap(fig1, high) == pytest.approx(0.01)
    assert penalty_tap(fig1, cand) == pytest.approx(0.0)


def test_regulation_is_zero_at_preferred_point(fig1, cand):
    link = fig1.dc_links[0]
    at = replace(cand, alpha=np.array([link.alpha_min + C.ANGLE_BAND_OFFSET]),
                 gamma=np.array([link.gamma_min + C.ANGLE_BAND_OFFSET]))
    assert regulation(fig1, at, ControlMode.MODE1) == pytest.approx(0.0)
    at2 = replace(at, k_re=np.array([link.k_max - 0.1]))
    assert regulation(fig1, at2, ControlMode.MODE2) == pytest.approx(0.01)


def test_decoded_candidates_satisfy_converter_equations(fig1):
    raw = np.random.default_rng(7).standard_normal((4, 7, 2))
    cand = decode_outputs(raw, fig1, ControlMode.MODE1)
    f = residual_dc_eq(fig1, cand)
    assert f.shape == (4, 5)
    np.testing.assert_allclose(f[:, [0, 1, 3, 4]], 0.0, atol=1e-12)
    np.testing.assert_allclose(residual_dc_con(fig1, cand)[:, 0], 0.0, atol=1e-12)


def test_batched_bundle_shapes(fig1):
    ix = case_index(fig1)
    raw = np.zeros((3, 7, 2))
    cand = decode_outputs(raw, fig1, ControlMode.MODE1)
    inj = (np.repeat(ix.p_inj[None], 3, axis=0), np.repeat(ix.q_inj[None], 3, axis=0))
    bundle = residual_bundle(fig1, cand, ControlMode.MODE1, inj)
    assert bundle.constraints().shape == (3, bundle.n_constraints)
    assert set(bundle.l1()) == {'f_pqv', 'f_dc_eq', 'f_dc_con'}
    assert bundle.violation().shape == (3,)


@pytest.mark.parametrize('name', ['fig1', 'ieee30'])
def test_total_violation_at_oracle_solution(request, name):
    case = request.getfixturevalue(name)
    bundle = residual_bundle(case, solve_acdc_sequential(case))
    total = sum(float(v) for v in bundle.l1().values()) + float(bundle.violation())
    assert total < 1e-5


@pytest.mark.parametrize('name', ['fig1', 'ieee30'])
def test_power_residual_layout(request, name):
    case = request.getfixturevalue(name)
    ix = case_index(case)
    raw = np.random.default_rng(3).standard_normal((2, ix.n_bus + 2 * ix.n_link, 2))
    cand = decode_outputs(raw, case, ControlMode.MODE1)
    f = residual_pqv(case, cand)
    n_dp, n_dq = ix.nonslack.size, ix.pq.size
    assert f.shape == (2, n_dp + n_dq + ix.pv.size)
    assert residual_bundle(case, cand, ControlMode.MODE1).group_sizes['pqv'] == f.shape[-1]
    # pinned PV voltages leave the last block at zero
    np.testing.assert_array_equal(f[:, n_dp + n_dq:], 0.0)
    assert np.all(np.abs(f[:, :n_dp]).sum(axis=-1) > 0.0)


def test_selection_scores_match_bundle(fig1):
    ix = case_index(fig1)
    raw = np.random.default_rng(9).standard_normal((3, 7, 2))
    cand = decode_outputs(raw, fig1, ControlMode.MODE2, raw_angles=True)
    inj = (np.repeat(ix.p_inj[None], 3, axis=0), np.repeat(ix.q_inj[None], 3, axis=0))
    bundle = residual_bundle(fig1, cand, ControlMode.MODE2, inj)
    np.testing.assert_allclose(residual_l1(fig1, cand, ControlMode.MODE2, inj), sum(bundle.l1().values()))
    np.testing.assert_allclose(violation(fig1, cand), bundle.violation())
    assert bundle.group_sizes == {'pqv': 4 + 3 + 1, 'dc_eq': 5, 'dc_con': 2}
