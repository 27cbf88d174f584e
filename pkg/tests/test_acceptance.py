"""Desk-scale end-to-end gates on ieee30_mod. Run with --runslow."""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from core.config import RunConfig, TrainConfig
from core.evaluator import bench_time, evaluate, infer_multi, topology_study
from core.models import ControlMode
from core.scenarios import generate_mode_scenarios, generate_scenarios, split_dataset
from core.trainer import alm_train, prepare_dataset, train_all_modes

pytestmark = pytest.mark.slow

RUN = RunConfig()


@pytest.fixture(scope='session')
def ieee30_split(ieee30):
    scenarios = generate_scenarios(ieee30, RUN.count, seed=RUN.seed, rect_stress_prob=RUN.rect_stress_prob,
                                   rect_stress_q=RUN.rect_stress_q)
    return split_dataset(scenarios, RUN.split, seed=RUN.seed)


@pytest.fixture(scope='session')
def ieee30_dataset(ieee30, ieee30_split):
    return prepare_dataset(ieee30, ieee30_split[0])


@pytest.fixture(scope='session')
def ieee30_bank(ieee30, ieee30_dataset):
    return train_all_modes(ieee30_dataset, ieee30, TrainConfig())


# ── Training ──────────────────────────────────────────────

@pytest.mark.parametrize('seed', [0, 1, 2])
def test_training_cuts_power_mismatch_tenfold(ieee30, ieee30_dataset, seed):
    result = alm_train(ieee30_dataset, ieee30, ControlMode.MODE1, replace(TrainConfig(), seed=seed))
    log = result.log
    assert log['mean|f_pqv|'].iloc[-1] <= 0.1 * log['mean|f_pqv|'].iloc[0]
    assert log['mean_lambda'].is_monotonic_increasing
    assert np.all(result.alm.lambdas >= 0.0)
    assert np.isfinite(log['loss']).all()


def test_training_log_is_reproducible(ieee30, ieee30_dataset):
    cfg = replace(TrainConfig(), inner_steps=5, outer_steps=2)
    a = alm_train(ieee30_dataset, ieee30, ControlMode.MODE2, cfg).log
    b = alm_train(ieee30_dataset, ieee30, ControlMode.MODE2, cfg).log
    pd.testing.assert_frame_equal(a, b, check_exact=True)


# ── Accuracy, speed, mode choice, topology ────────────────

def test_accuracy_against_oracle(ieee30, ieee30_bank, ieee30_split):
    s = evaluate(ieee30_bank, ieee30, ieee30_split[1]).summary()
    assert s['mre_v']['mean'] < 0.02
    assert s['mre_delta']['mean'] < 0.02


def test_inference_beats_oracle_fivefold(ieee30, ieee30_bank, ieee30_split):
    stats = bench_time(ieee30_bank, ieee30, ieee30_split[1][:50], repeats=3)
    assert stats['samples'] > 0
    assert stats['speedup'] >= 5.0


def test_selects_oracle_mode(ieee30, ieee30_bank):
    labelled = generate_mode_scenarios(ieee30, 50, seed=7)
    assert sum(sc.label_mode == ControlMode.MODE2 for sc in labelled) >= 50
    hits = sum(infer_multi(ieee30_bank, ieee30, sc).mode == sc.label_mode for sc in labelled)
    assert hits / len(labelled) >= 0.95


def test_trip_keeps_accuracy(ieee30, ieee30_bank, ieee30_split):
    study = topology_study(ieee30_bank, ieee30, (1, 3), ieee30_split[1][:100])
    assert study.tripped.n_scenarios > 0
    assert study.degradation < 5.0
