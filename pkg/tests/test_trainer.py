import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from core import autodiff as ad
from core.config import TrainConfig
from core.errors import DivergenceError, ModeDataMissing, NonFiniteError, NotFound, ShapeMismatch, ValidationError
from core.graph_builder import build_topology
from core.models import ControlMode
from core.pg_gnn import ChebNetParams, init_params
from core.residuals import ResidualBundle
from core.trainer import (
    LOG_COLUMNS, AlmState, ModelBank, _Trainer, alm_train, augmented_lagrangian, config_fingerprint,
    clip_grad_norm, dual_update, load_bank, prepare_dataset, save_bank, train_all_modes,
)


def _bundle(f, ang=0.0, tap=0.0, reg=0.0):
    f = np.atleast_2d(np.asarray(f, dtype=float))
    return ResidualBundle(
        f_pqv    = f[:, :1],
        f_dc_eq  = f[:, 1:2],
        f_dc_con = f[:, 2:],
        f_dc_k   = np.array([tap]),
        f_dc_ang = np.array([ang]),
        f_dc_reg = np.array([reg]),
    )


@pytest.fixture
def dataset(fig1, fig1_scenarios):
    return prepare_dataset(fig1, fig1_scenarios)


# ── Objective and multipliers ─────────────────────────────

@pytest.mark.parametrize('f, lambdas, rho, ang, tap, expected', [
    ([0.1, -0.1, 0.0], [0.0, 0.0, 0.0], 1.0, 0.0, 0.0, 0.01),
    ([0.1, -0.1, 0.0], [0.1, 0.1, 0.1], 0.0, 0.0, 0.0, 0.02),
    ([0.0, 0.0, 0.0],  [1.0, 1.0, 1.0], 5.0, 0.005, 0.02, 0.025),
])
def test_augmented_lagrangian_values(f, lambdas, rho, ang, tap, expected):
    alm = AlmState(np.array(lambdas), rho)
    assert float(augmented_lagrangian(_bundle(f, ang, tap), alm)) == pytest.approx(expected)


def test_regulation_weight_adds_term():
    alm = AlmState(np.zeros(3), 1.0)
    assert float(augmented_lagrangian(_bundle([0, 0, 0], reg=0.1), alm, 0.5)) == pytest.approx(0.05)


def test_objective_checks_multiplier_count():
    with pytest.raises(ShapeMismatch):
        augmented_lagrangian(_bundle([0, 0, 0]), AlmState(np.zeros(2), 1.0))


def test_dual_update():
    alm = dual_update(AlmState(np.zeros(2), 2.0, groups={'pqv': 1, 'dc_eq': 1}), [0.1, -0.2])
    np.testing.assert_allclose(alm.lambdas, [0.2, 0.4])
    assert alm.rho == pytest.approx(3.0)
    assert alm.outer_iter == 1
    assert alm.history == [pytest.approx({'pqv': 0.1, 'dc_eq': 0.2})]
    assert dual_update(AlmState(np.zeros(2), 1.0), [0.1, 0.3]).history == [pytest.approx({'all': 0.2})]
    capped = dual_update(AlmState(np.zeros(1), 80.0), [0.0])
    assert capped.rho == pytest.approx(100.0)
    with pytest.raises(ShapeMismatch):
        dual_update(AlmState(np.zeros(2), 1.0), [0.1])


def test_dual_update_history_per_group():
    alm = AlmState(np.zeros(5), 1.0, groups={'pqv': 3, 'dc_eq': 1, 'dc_con': 1})
    alm = dual_update(alm, [0.1, 0.2, 0.3, 0.5, 0.0])
    alm = dual_update(alm, [0.0, 0.0, 0.0, 0.0, 1.0])
    assert len(alm.history) == 2
    assert alm.history[0] == pytest.approx({'pqv': 0.2, 'dc_eq': 0.5, 'dc_con': 0.0})
    assert alm.history[1]['dc_con'] == pytest.approx(1.0)


def test_multipliers_saturate_at_cap():
    alm = AlmState(np.zeros(2), 50.0, lambda_cap=100.0)
    seen = [alm.lambdas]
    for _ in range(5):
        alm = dual_update(alm, [1.0, 0.01])
        seen.append(alm.lambdas)
    seen = np.array(seen)
    assert np.all(np.diff(seen, axis=0) >= 0.0)
    assert seen[:, 0].max() == pytest.approx(100.0)
    assert seen[-1, 1] < 100.0


@pytest.mark.parametrize('grads, max_norm, norm_after', [
    ([np.array([3.0, 4.0])], 1.0, 1.0),
    ([np.array([3.0]), np.array([[4.0]])], 10.0, 5.0),
    ([np.array([30.0, 40.0])], 0.0, 50.0),
])
def test_clip_grad_norm(grads, max_norm, norm_after):
    clipped, norm = clip_grad_norm(grads, max_norm)
    assert norm == pytest.approx(float(np.sqrt(sum(np.sum(g ** 2) for g in grads))))
    assert np.sqrt(sum(np.sum(g ** 2) for g in clipped)) == pytest.approx(norm_after)
    for g, c in zip(grads, clipped):
        assert c.shape == g.shape
        np.testing.assert_allclose(c * np.sum(g ** 2) ** 0.5, g * np.sum(c ** 2) ** 0.5)


@pytest.mark.parametrize('field, value', [('grad_clip', -1.0), ('lambda_cap', 0.0)])
def test_train_config_rejects_bad_safeguards(field, value):
    with pytest.raises(ValidationError, match=field):
        TrainConfig(**{field: value})


# ── Dataset ───────────────────────────────────────────────

def test_prepare_dataset(fig1, fig1_scenarios, dataset):
    assert len(dataset) == 8
    assert dataset.p_inj.shape == (8, 5)
    np.testing.assert_allclose(dataset.p_inj[0], fig1_scenarios[0].p_gen - fig1_scenarios[0].p_load)
    assert len(dataset.labels) == 8
    assert len(dataset.subset([0, 2])) == 2
    with pytest.raises(ValidationError):
        prepare_dataset(fig1, [])


# ── Training loop ─────────────────────────────────────────

def test_no_inner_steps_keeps_initial_params(fig1, dataset, tiny_config):
    cfg = replace(tiny_config, inner_steps=0, outer_steps=1)
    result = alm_train(dataset, fig1, ControlMode.MODE1, cfg)
    start = init_params(build_topology(fig1), cfg.width, cfg.layers, cfg.order, cfg.seed)
    for a, b in zip(result.params.leaves(), start.leaves()):
        np.testing.assert_allclose(a, b)
    assert result.alm.outer_iter == 1


def test_clipping_bounds_each_step(fig1, dataset, tiny_config):
    cfg = replace(tiny_config, inner_steps=1, outer_steps=1, step_size=10.0, grad_clip=0.5,
                  val_fraction=0.0, stall_tol=0.0)
    result = alm_train(dataset, fig1, ControlMode.MODE1, cfg)
    start = init_params(build_topology(fig1), cfg.width, cfg.layers, cfg.order, cfg.seed)
    moved = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(result.params.leaves(), start.leaves())))
    assert moved <= cfg.step_size * cfg.grad_clip * (1 + 1e-9)
    assert set(result.alm.groups) == {'pqv', 'dc_eq', 'dc_con'}
    assert sum(result.alm.groups.values()) == result.alm.lambdas.size


def test_training_is_deterministic(fig1, dataset, tiny_config):
    a = alm_train(dataset, fig1, ControlMode.MODE1, tiny_config)
    b = alm_train(dataset, fig1, ControlMode.MODE1, tiny_config)
    pd.testing.assert_frame_equal(a.log, b.log)
    np.testing.assert_array_equal(a.params.theta[0][0], b.params.theta[0][0])


def test_log_layout_and_multipliers(fig1, dataset, tiny_config):
    result = alm_train(dataset, fig1, ControlMode.MODE1, replace(tiny_config, stall_tol=0.0))
    log = result.log
    assert list(log.columns) == LOG_COLUMNS
    assert log['outer_iter'].tolist() == [0, 1, 2]
    assert log['mean_lambda'].is_monotonic_increasing
    assert log['rho'].iloc[-1] == pytest.approx(tiny_config.rho0 * tiny_config.rho_growth ** 2)
    assert np.isfinite(log['loss']).all()


def test_end_to_end_gradient(fig1, dataset, tiny_config):
    tr = _Trainer(dataset, fig1, ControlMode.MODE1, tiny_config)
    params = init_params(tr.topology, tiny_config.width, tiny_config.layers, tiny_config.order, 0)
    alm = AlmState(np.zeros(15), 1.0)
    idx = np.arange(4)

    def loss(w):
        theta = [[w] + params.theta[0][1:]] + params.theta[1:]
        p = ChebNetParams(theta, params.z_embed, params.mask, params.dims, params.order,
                          params.node_keys, params.edge_keys)
        return augmented_lagrangian(tr.bundle(p, idx), alm, tiny_config.regulation_weight)

    report = ad.grad_check(loss, params.theta[0][0], n_coords=12, seed=1)
    assert report.checked
    assert report.max_rel_error < 1e-5


def test_numerical_failure_becomes_divergence(fig1, dataset, tiny_config, monkeypatch):
    def boom(self, params, idx, alm):
        raise NonFiniteError('mul', 3)
    monkeypatch.setattr(_Trainer, 'gradient_step', boom)
    with pytest.raises(DivergenceError) as exc:
        alm_train(dataset, fig1, ControlMode.MODE1, tiny_config)
    assert (exc.value.outer, exc.value.inner) == (1, 1)


def test_train_all_modes_checks_references(fig1, dataset, tiny_config):
    case = replace(fig1, dc_links=(replace(fig1.dc_links[0], i_ref_iv=None),))
    with pytest.raises(ModeDataMissing):
        train_all_modes(dataset, case, tiny_config)


def test_train_all_modes(fig1, dataset, tiny_config):
    bank = train_all_modes(dataset, fig1, replace(tiny_config, outer_steps=1))
    assert bank.modes() == [ControlMode.MODE1, ControlMode.MODE2]
    assert all(bank[m].raw_angles for m in bank.modes())
    assert set(bank.logs) == set(bank.modes())
    assert bank[ControlMode.MODE1].fingerprint == config_fingerprint(replace(tiny_config, outer_steps=1,
                                                                              raw_angles=True))


@pytest.mark.slow
def test_training_reduces_power_mismatch(fig1, dataset):
    cfg = TrainConfig(inner_steps=50, outer_steps=5, step_size=1e-3, batch_size=8, width=16,
                      layers=2, order=2, seed=0, val_fraction=0.0, stall_tol=0.0)
    log = alm_train(dataset, fig1, ControlMode.MODE1, cfg).log
    assert log['mean|f_pqv|'].iloc[1:].min() < log['mean|f_pqv|'].iloc[0]


# ── Bank persistence ──────────────────────────────────────

def test_bank_round_trip_predicts_identically(fig1, fig1_bank, tmp_path):
    path = str(tmp_path / 'bank' / 'bank.json')
    save_bank(fig1_bank, path)
    back = load_bank(path)
    assert back.modes() == fig1_bank.modes()
    for mode in back.modes():
        a = fig1_bank[mode].predict(fig1).numpy()
        b = back[mode].predict(fig1).numpy()
        np.testing.assert_array_equal(a.v, b.v)
        np.testing.assert_array_equal(a.alpha, b.alpha)


def test_load_bank_errors(tmp_path):
    with pytest.raises(NotFound):
        load_bank(str(tmp_path / 'missing.json'))
    broken = tmp_path / 'broken.json'
    broken.write_text('{', encoding='utf-8')
    with pytest.raises(ValidationError):
        load_bank(str(broken))
    other = tmp_path / 'other.json'
    other.write_text(json.dumps({'format': 'something-else', 'version': 1}), encoding='utf-8')
    with pytest.raises(ValidationError):
        load_bank(str(other))
    future = tmp_path / 'future.json'
    future.write_text(json.dumps({'format': 'acdcflow-bank', 'version': 99}), encoding='utf-8')
    with pytest.raises(ValidationError, match='version'):
        load_bank(str(future))


def test_empty_bank():
    bank = ModelBank()
    assert len(bank) == 0 and bank.modes() == []
    assert ControlMode.MODE1 not in bank
