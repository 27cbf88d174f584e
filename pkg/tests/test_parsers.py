import json
import math

import pytest

from core.errors import NotFound, ParseError, ValidationError
from core.models import BusKind, ControlMode
from parsers.bundled import BundledCaseParser
from parsers.case_json import JsonCaseParser, serialize_case
from parsers.detector import detect, load_case, save_case


def _minimal(**overrides):
    data = {
        'name': 'two_bus',
        'base_mva': 100.0,
        'buses': [
            {'id': 1, 'kind': 'Slack', 'v_ref': 1.0},
            {'id': 2, 'kind': 'PQ', 'p_load': 20.0, 'q_load': 5.0},
        ],
        'branches': [{'from': 1, 'to': 2, 'r': 0.01, 'x': 0.1}],
    }
    data.update(overrides)
    return data


def test_bundled_names_resolve():
    names = BundledCaseParser().available()
    assert 'fig1_5bus' in names and 'ieee30_mod' in names
    assert isinstance(detect('fig1_5bus'), BundledCaseParser)


def test_fig1_loads_in_per_unit(fig1):
    assert fig1.name == 'fig1_5bus'
    assert [b.id for b in fig1.buses] == [1, 2, 3, 4, 5]
    assert fig1.bus(2).kind == BusKind.PV
    assert fig1.bus(2).p_gen == pytest.approx(0.6)
    link = fig1.dc_links[0]
    assert link.alpha_min == pytest.approx(math.radians(5.0))
    assert link.mode == ControlMode.MODE1


def test_r_x_converted_to_g_b(fig1):
    br = fig1.branches[0]
    assert (br.from_bus, br.to_bus) == (1, 2)
    assert br.g == pytest.approx(5.0)
    assert br.b == pytest.approx(-15.0)


def test_dict_source_is_parsed_and_validated():
    case = load_case(_minimal())
    assert case.name == 'two_bus'
    assert case.bus(2).p_load == pytest.approx(0.2)
    assert case.dc_links == ()


def test_buses_sorted_by_id():
    data = _minimal()
    data['buses'] = list(reversed(data['buses']))
    assert [b.id for b in load_case(data).buses] == [1, 2]


@pytest.mark.parametrize('patch, message', [
    ({'buses': [{'id': 1, 'kind': 'Swing', 'v_ref': 1.0}]}, 'Swing'),
    ({'buses': [{'id': '1', 'kind': 'Slack', 'v_ref': 1.0}]}, "'id'"),
    ({'branches': [{'from': 1, 'to': 2, 'r': 0.0, 'x': 0.0}]}, 'zero impedance'),
    ({'branches': [{'from': 1, 'to': 2, 'g': 'x', 'b': 1.0}]}, "'g'"),
    ({'base_mva': -1.0}, 'base_mva'),
])
def test_schema_errors_raise_parse_error(patch, message):
    with pytest.raises(ParseError, match=message):
        load_case(_minimal(**patch))


def test_semantic_errors_raise_validation_error():
    data = _minimal(branches=[])
    with pytest.raises(ValidationError):
        load_case(data)


def test_unknown_source_not_found(tmp_path):
    with pytest.raises(NotFound):
        detect('no_such_case')
    with pytest.raises(NotFound):
        detect({'nodes': []})
    with pytest.raises(NotFound):
        detect(str(tmp_path / 'missing.json'))


def test_invalid_json_file(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"buses": [', encoding='utf-8')
    with pytest.raises(ParseError, match='invalid JSON'):
        JsonCaseParser().parse(str(path))


def test_save_and_reload_preserves_case(fig1, tmp_path):
    path = tmp_path / 'copy.json'
    save_case(fig1, str(path))
    back = load_case(str(path))
    assert back.name == fig1.name
    assert [b.kind for b in back.buses] == [b.kind for b in fig1.buses]
    for a, b in zip(back.buses, fig1.buses):
        assert a.p_gen == pytest.approx(b.p_gen) and a.q_load == pytest.approx(b.q_load)
    for a, b in zip(back.branches, fig1.branches):
        assert (a.g, a.b) == pytest.approx((b.g, b.b))
    assert back.dc_links[0].gamma_min == pytest.approx(fig1.dc_links[0].gamma_min)
    assert len(back.units) == len(fig1.units)
    assert json.loads(path.read_text(encoding='utf-8'))['buses'][0]['kind'] == 'Slack'


def test_serialize_uses_physical_units(fig1):
    data = serialize_case(fig1)
    assert data['buses'][1]['p_gen'] == pytest.approx(60.0)
    assert data['dc_links'][0]['alpha_min_deg'] == pytest.approx(5.0)
