"""Shared fixtures: bundled cases, tiny configs, small scenario sets."""

from dataclasses import replace

import pytest

from core.config import TrainConfig
from core.graph_builder import build_topology
from core.models import ControlMode
from core.pg_gnn import FeatureNorm, init_params
from core.scenarios import generate_scenarios
from core.trainer import BankEntry, ModelBank
from parsers.detector import load_case


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help="run desk-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope='session')
def fig1():
    return load_case('fig1_5bus')


@pytest.fixture(scope='session')
def ieee30():
    return load_case('ieee30_mod')


@pytest.fixture(scope='session')
def fig1_mode2(fig1):
    """Inverter voltage reference high enough that Mode1 cannot hold."""
    link = replace(fig1.dc_links[0], v_ref_iv=1.45)
    return replace(fig1, dc_links=(link,), name='fig1_mode2')


@pytest.fixture
def tiny_config():
    return TrainConfig(inner_steps=2, outer_steps=2, step_size=1e-3, batch_size=4,
                       width=8, layers=2, order=2, seed=3, val_fraction=0.25)


@pytest.fixture(scope='session')
def fig1_scenarios(fig1):
    return generate_scenarios(fig1, 8, seed=11)


def untrained_bank(case, width=8, layers=2, order=2, seed=0) -> ModelBank:
    topology = build_topology(case)
    bank = ModelBank()
    for k, mode in enumerate((ControlMode.MODE1, ControlMode.MODE2)):
        params = init_params(topology, width, layers, order, seed + k)
        bank.entries[mode] = BankEntry(mode, params, FeatureNorm(), raw_angles=True)
    return bank


@pytest.fixture
def fig1_bank(fig1):
    return untrained_bank(fig1)


@pytest.fixture
def bank_factory():
    return untrained_bank
