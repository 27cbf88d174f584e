import pytest

from app import app
from core.trainer import save_bank


@pytest.fixture
def client():
    app.config['TESTING'] = True
    with app.test_client() as c:
        yield c


def test_healthz(client):
    res = client.get('/healthz')
    assert res.status_code == 200
    assert res.get_json()['status'] == 'ok'


def test_solve_bundled_case(client):
    res = client.post('/api/solve', json={'case': 'fig1_5bus'})
    assert res.status_code == 200
    body = res.get_json()
    assert body['converged'] is True
    assert len(body['buses']) == 5
    assert 'power_balance' in body


def test_solve_forced_mode_argument(client):
    res = client.post('/api/solve?mode=Mode7', json={'case': 'fig1_5bus'})
    assert res.status_code == 400
    assert res.get_json()['kind'] == 'ValidationError'


@pytest.mark.parametrize('kwargs, kind', [
    ({'data': 'not json', 'content_type': 'text/plain'}, 'ParseError'),
    ({'json': [1, 2]}, 'ParseError'),
    ({'json': {'case': 'data/cases/fig1_5bus.json'}}, 'NotFound'),
    ({'json': {'case': {'buses': [{'id': 1, 'kind': 'Swing'}], 'branches': []}}}, 'ParseError'),
])
def test_bad_requests(client, kwargs, kind):
    res = client.post('/api/solve', **kwargs)
    assert res.status_code == 400
    assert res.get_json()['kind'] == kind


def test_infer_with_bank(client, fig1_bank, tmp_path, monkeypatch):
    path = str(tmp_path / 'bank.json')
    save_bank(fig1_bank, path)
    monkeypatch.setenv('ACDC_BANK_PATH', path)
    res = client.post('/api/infer', json={'case': 'fig1_5bus'})
    assert res.status_code == 200
    body = res.get_json()
    assert body['chosen_mode'] in ('Mode1', 'Mode2')
    assert set(body['violations']) == {'Mode1', 'Mode2'}
    assert isinstance(body['infeasible_all'], bool)


def test_infer_without_bank(client, tmp_path, monkeypatch):
    monkeypatch.setenv('ACDC_BANK_PATH', str(tmp_path / 'none.json'))
    res = client.post('/api/infer', json={'case': 'fig1_5bus'})
    assert res.status_code == 400
    assert res.get_json()['kind'] == 'NotFound'
