from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from core.errors import DisconnectionError, DomainError, ModeDataMissing, NotFound, ValidationError
from core.models import (
    BusKind, ControlMode, apply_topology_change, case_index, is_connected, restore_branch,
    to_per_unit, validate_case, with_injections,
)


# ── Per-unit ──────────────────────────────────────────────

def test_to_per_unit_basic():
    assert to_per_unit(50.0, 100.0) == 0.5


@pytest.mark.parametrize('base', [0.0, -100.0])
def test_to_per_unit_rejects_bad_base(base):
    with pytest.raises(DomainError):
        to_per_unit(10.0, base)


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(1.0, 1e4))
def test_to_per_unit_is_linear(a, b, base):
    assert to_per_unit(a + b, base) == pytest.approx(to_per_unit(a, base) + to_per_unit(b, base), abs=1e-9)


# ── Validation ────────────────────────────────────────────

def test_bundled_cases_validate(fig1, ieee30):
    assert validate_case(fig1) is fig1
    assert validate_case(ieee30) is ieee30


def test_two_slack_buses_rejected(fig1):
    buses = list(fig1.buses)
    buses[1] = replace(buses[1], kind=BusKind.SLACK)
    with pytest.raises(ValidationError, match='Slack'):
        validate_case(replace(fig1, buses=tuple(buses)))


def test_pv_bus_needs_v_ref(fig1):
    buses = list(fig1.buses)
    buses[1] = replace(buses[1], v_ref=None)
    with pytest.raises(ValidationError, match='bus 2'):
        validate_case(replace(fig1, buses=tuple(buses)))


def test_link_on_non_pcc_bus_rejected(fig1):
    link = replace(fig1.dc_links[0], rect_pcc=5)
    with pytest.raises(ValidationError, match='dc_links'):
        validate_case(replace(fig1, dc_links=(link,)))


def test_mode_data_missing_names_field(fig1):
    link = replace(fig1.dc_links[0], i_ref_iv=None)
    with pytest.raises(ModeDataMissing) as info:
        link.check_mode_data(ControlMode.MODE2, 0)
    assert info.value.field == 'i_ref_iv'
    link.check_mode_data(ControlMode.MODE1, 0)


# ── Topology edits ────────────────────────────────────────

def test_trip_returns_new_case(ieee30):
    tripped = apply_topology_change(ieee30, (1, 3))
    assert len(tripped.closed_branches) == len(ieee30.closed_branches) - 1
    assert len(ieee30.closed_branches) == 41
    assert is_connected(tripped)


def test_trip_accepts_reversed_pair(ieee30):
    assert apply_topology_change(ieee30, (3, 1)) == apply_topology_change(ieee30, (1, 3))


@pytest.mark.parametrize('branch', [(25, 26), (9, 11), (12, 13)])
def test_trip_pendant_branch_disconnects(ieee30, branch):
    with pytest.raises(DisconnectionError):
        apply_topology_change(ieee30, branch)


def test_trip_unknown_or_tripped_branch(ieee30):
    with pytest.raises(NotFound):
        apply_topology_change(ieee30, (1, 30))
    tripped = apply_topology_change(ieee30, (1, 3))
    with pytest.raises(NotFound):
        apply_topology_change(tripped, (1, 3))


def test_trip_then_restore_is_identity(ieee30):
    assert restore_branch(apply_topology_change(ieee30, (1, 3)), (1, 3)) == ieee30


# ── Index / injections ────────────────────────────────────

def test_case_index_fig1(fig1):
    ix = case_index(fig1)
    assert ix.n_bus == 5
    assert ix.slack == 0
    assert ix.pv.tolist() == [1]
    assert ix.pq.tolist() == [2, 3, 4]
    assert ix.rect.tolist() == [2] and ix.inv.tolist() == [3]
    assert ix.p_inj[1] == pytest.approx(0.5)
    assert ix.sf.shape == (5, 5)


def test_with_injections_replaces_every_bus(fig1):
    n = len(fig1.buses)
    out = with_injections(fig1, np.ones(n), np.zeros(n), np.full(n, 0.5), np.zeros(n))
    assert [b.p_inj for b in out.buses] == [0.5] * n
    assert fig1.buses[1].p_gen == pytest.approx(0.6)


def test_case_index_is_built_once_per_case(fig1):
    assert case_index(fig1) is case_index(fig1)
    n = len(fig1.buses)
    out = with_injections(fig1, np.ones(n), np.zeros(n), np.full(n, 0.5), np.zeros(n))
    ix, base = case_index(out), case_index(fig1)
    assert ix is not base
    assert ix.sf is base.sf and ix.links is base.links
    np.testing.assert_allclose(ix.p_inj, 0.5)
    assert base.p_inj[1] == pytest.approx(0.5)


def test_structural_edits_rebuild_the_index(fig1):
    tripped = apply_topology_change(fig1, (1, 2))
    assert case_index(tripped).sf.shape[0] == case_index(fig1).sf.shape[0] - 1
    retyped = replace(fig1, dc_links=(replace(fig1.dc_links[0], r_dc=0.2),))
    assert case_index(retyped).links['r_dc'][0] == pytest.approx(0.2)
    assert case_index(fig1).links['r_dc'][0] == pytest.approx(0.1)
    assert retyped == replace(fig1, dc_links=(replace(fig1.dc_links[0], r_dc=0.2),))
