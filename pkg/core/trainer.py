"""
core/trainer.py
───────────────
Unsupervised training of the physics-guided network with an augmented
Lagrangian: per-component multipliers λ on the equality residuals, a
quadratic penalty ρ/2·‖f‖², and the angle / tap penalties (plus the
optional tap regulation term) as the objective.

  outer loop : fixed number of plain gradient steps (global norm clipped),
               then λ ← min(λ + ρ·mean|f|, λ_cap), ρ ← min(ρ·growth, cap)
  bank       : one trained network per control mode, JSON on disk
"""

import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from core import autodiff as ad
from core.config import TrainConfig
from core.errors import (
    DivergenceError, DomainError, NonFiniteError, NotFound, ShapeMismatch, ValidationError,
)
from core.graph_builder import GraphFeatures, build_feature_batch, build_topology, spectral_basis
from core.models import MODE_ORDER, ControlMode, NetworkCase, case_index
from core.pg_gnn import (
    ChebNetParams, FeatureNorm, decode_outputs, init_params, mode_current, run_network,
)
from core.residuals import ResidualBundle, residual_bundle

logger = logging.getLogger(__name__)

LOG_COLUMNS = ['outer_iter', 'inner_step', 'loss', 'mean|f_pqv|', 'mean|f_dc_eq|',
               'mean|f_dc_con|', 'penalty_ang', 'penalty_tap', 'rho', 'mean_lambda']

BANK_FORMAT  = 'acdcflow-bank'
BANK_VERSION = 1


# ═══════════════════════════════════════════════════════════
#  AUGMENTED LAGRANGIAN
# ═══════════════════════════════════════════════════════════

@dataclass
class AlmState:
    lambdas:    np.ndarray
    rho:        float
    outer_iter: int = 0
    history:    list = field(default_factory=list)
    rho_growth: float = 1.5
    rho_cap:    float = 100.0
    lambda_cap: float = 1e4
    groups:     dict = field(default_factory=dict)     # name -> width, multiplier order

    @property
    def mean_lambda(self) -> float:
        return float(np.mean(self.lambdas)) if self.lambdas.size else 0.0


def augmented_lagrangian(bundle: ResidualBundle, alm: AlmState, regulation_weight: float = 0.0):
    """
    Batch mean of  ang + tap + w·reg + Σ λ·|f| + ρ/2·Σ f².
    Returns a Var when the bundle was recorded on a tape, a float otherwise.
    """
    f = bundle.constraints()
    k = np.shape(ad.value_of(f))[-1]
    if k != alm.lambdas.size:
        raise ShapeMismatch(f"{alm.lambdas.size} multipliers for {k} residual components")

    per_sample = (bundle.f_dc_ang + bundle.f_dc_k
                  + ad.reduce_sum(alm.lambdas * ad.absolute(f), axis=-1)
                  + (0.5 * alm.rho) * ad.l2_norm_sq(f, axis=-1))
    if regulation_weight:
        per_sample = per_sample + regulation_weight * bundle.f_dc_reg
    return ad.reduce_mean(per_sample)


def dual_update(alm: AlmState, mean_abs_residuals) -> AlmState:
    """
    One multiplier step. λ never decreases and saturates at lambda_cap;
    history gains one entry per call: mean |f| per residual group.
    """
    mean_abs = np.abs(np.asarray(mean_abs_residuals, dtype=float))
    if mean_abs.shape != alm.lambdas.shape:
        raise ShapeMismatch(f"residual vector {mean_abs.shape} vs multipliers {alm.lambdas.shape}")
    return dataclasses.replace(
        alm,
        lambdas    = np.minimum(alm.lambdas + alm.rho * mean_abs, alm.lambda_cap),
        rho        = min(alm.rho * alm.rho_growth, alm.rho_cap),
        outer_iter = alm.outer_iter + 1,
        history    = alm.history + [_group_means(alm.groups, mean_abs)],
    )


def _group_means(groups: dict, mean_abs: np.ndarray) -> dict:
    if sum(groups.values()) != mean_abs.size:
        return {'all': float(mean_abs.mean()) if mean_abs.size else 0.0}
    out, at = {}, 0
    for name, width in groups.items():
        part = mean_abs[at:at + width]
        out[name] = float(part.mean()) if width else 0.0
        at += width
    return out


def clip_grad_norm(grads: list, max_norm: float) -> tuple:
    """Rescale grads so their joint L2 norm is at most max_norm (0 disables). Returns (grads, norm)."""
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads))
    if not max_norm or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


# ═══════════════════════════════════════════════════════════
#  DATASET
# ═══════════════════════════════════════════════════════════

@dataclass
class TrainingSet:
    p_inj:  np.ndarray                  # (S, N) net injections, p.u.
    q_inj:  np.ndarray
    labels: tuple = ()                  # oracle mode per scenario, when known

    def __len__(self):
        return self.p_inj.shape[0]

    def subset(self, idx) -> 'TrainingSet':
        idx = np.asarray(idx, dtype=int)
        labels = tuple(self.labels[i] for i in idx) if self.labels else ()
        return TrainingSet(self.p_inj[idx], self.q_inj[idx], labels)

    def features(self, case: NetworkCase, mode: ControlMode) -> GraphFeatures:
        return build_feature_batch(case, mode, self.p_inj, self.q_inj)


def prepare_dataset(case: NetworkCase, scenarios: list) -> TrainingSet:
    """Stack scenario injections (any objects with p_gen/q_gen/p_load/q_load arrays)."""
    if not scenarios:
        raise ValidationError("dataset is empty")
    n = case_index(case).n_bus
    p = np.array([np.asarray(s.p_gen) - np.asarray(s.p_load) for s in scenarios], dtype=float)
    q = np.array([np.asarray(s.q_gen) - np.asarray(s.q_load) for s in scenarios], dtype=float)
    if p.shape[1:] != (n,) or q.shape[1:] != (n,):
        raise ShapeMismatch(f"scenario vectors {p.shape[1:]} do not match {n} buses")
    labels = tuple(getattr(s, 'label_mode', None) for s in scenarios)
    return TrainingSet(p, q, labels if any(m is not None for m in labels) else ())


# ═══════════════════════════════════════════════════════════
#  TRAINING
# ═══════════════════════════════════════════════════════════

@dataclass
class TrainResult:
    params: ChebNetParams
    alm:    AlmState
    log:    pd.DataFrame
    norm:   FeatureNorm
    mode:   ControlMode
    config: TrainConfig


class _Batches:
    """Endless seeded minibatches, reshuffled every epoch."""

    def __init__(self, idx: np.ndarray, size: int, rng: np.random.Generator):
        self.idx   = idx
        self.size  = min(size, len(idx))
        self.rng   = rng
        self.order = rng.permutation(idx)
        self.at    = 0

    def next(self) -> np.ndarray:
        if self.at + self.size > len(self.order):
            self.order = self.rng.permutation(self.idx)
            self.at = 0
        out = self.order[self.at:self.at + self.size]
        self.at += self.size
        return out


class _Trainer:

    def __init__(self, dataset: TrainingSet, case: NetworkCase, mode: ControlMode, config: TrainConfig):
        self.case     = case
        self.mode     = mode
        self.config   = config
        self.topology = build_topology(case)
        self.basis    = spectral_basis(self.topology, config.order)
        raw_feats     = dataset.features(case, mode)
        self.norm     = FeatureNorm.fit(raw_feats)
        self.feats    = self.norm.apply(raw_feats)
        self.p_inj    = dataset.p_inj
        self.q_inj    = dataset.q_inj

    def _rows(self, idx) -> tuple:
        return GraphFeatures(self.feats.x_nodes[idx], self.feats.x_edges[idx]), (self.p_inj[idx], self.q_inj[idx])

    def bundle(self, params: ChebNetParams, idx) -> ResidualBundle:
        feats, inj = self._rows(idx)
        raw = run_network(params, self.basis, feats, use_edge_features=self.config.use_edge_features)
        cand = decode_outputs(raw, self.case, self.mode, self.config.raw_angles,
                              self.config.voltage_band, self.config.angle_scale)
        return residual_bundle(self.case, cand, self.mode, inj)

    def stats(self, params: ChebNetParams, idx, alm: AlmState) -> dict:
        b = self.bundle(params, idx)
        l1 = b.l1()
        return {
            'loss':           float(augmented_lagrangian(b, alm, self.config.regulation_weight)),
            'mean|f_pqv|':    float(np.mean(l1['f_pqv'])),
            'mean|f_dc_eq|':  float(np.mean(l1['f_dc_eq'])),
            'mean|f_dc_con|': float(np.mean(l1['f_dc_con'])),
            'penalty_ang':    float(np.mean(b.f_dc_ang)),
            'penalty_tap':    float(np.mean(b.f_dc_k)),
            'mean_abs':       np.mean(np.abs(b.constraints()), axis=0),
            'violation':      float(np.mean(sum(l1.values()) + b.violation())),
        }

    def gradient_step(self, params: ChebNetParams, idx, alm: AlmState) -> tuple:
        tape = ad.Tape()
        bound = params.bind(tape)
        loss = augmented_lagrangian(self.bundle(bound, idx), alm, self.config.regulation_weight)
        tape.backward(loss)
        return float(loss.value), [leaf.grad for leaf in bound.leaves()]


def alm_train(dataset: TrainingSet, case: NetworkCase, mode: ControlMode, config: TrainConfig = None) -> TrainResult:
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    mode_current(case, mode)

    tr = _Trainer(dataset, case, mode, config)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(dataset))
    n_val = int(math.floor(config.val_fraction * len(dataset))) if len(dataset) > 1 else 0
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    if n_val == 0:
        val_idx = train_idx
    batches = _Batches(train_idx, config.batch_size, rng)

    params = init_params(tr.topology, config.width, config.layers, config.order, config.seed)
    groups = tr.bundle(params, train_idx[:1]).group_sizes
    n_con = sum(groups.values())
    alm = AlmState(np.zeros(n_con), config.rho0, rho_growth=config.rho_growth, rho_cap=config.rho_cap,
                   lambda_cap=config.lambda_cap, groups=groups)

    def row(outer, inner, st):
        return [outer, inner, st['loss'], st['mean|f_pqv|'], st['mean|f_dc_eq|'], st['mean|f_dc_con|'],
                st['penalty_ang'], st['penalty_tap'], alm.rho, alm.mean_lambda]

    try:
        st = tr.stats(params, train_idx, alm)
    except (NonFiniteError, DomainError) as e:
        raise DivergenceError(0, 0, alm.rho, alm.mean_lambda, str(e)) from e
    rows = [row(0, 0, st)]
    best, best_val = params.copy(), tr.stats(params, val_idx, alm)['violation']
    velocity = [np.zeros_like(ad.value_of(t)) for t in params.leaves()]
    prev_loss = st['loss']
    logger.info(f"[train] {mode.value}: {len(train_idx)} train / {n_val} val samples, "
                f"{params.n_params} parameters, {n_con} residual components")

    for outer in range(1, config.outer_steps + 1):
        for inner in range(1, config.inner_steps + 1):
            try:
                loss, grads = tr.gradient_step(params, batches.next(), alm)
            except (NonFiniteError, DomainError) as e:
                raise DivergenceError(outer, inner, alm.rho, alm.mean_lambda, str(e)) from e
            if not math.isfinite(loss):
                raise DivergenceError(outer, inner, alm.rho, alm.mean_lambda, 'loss is not finite')
            grads, _ = clip_grad_norm(grads, config.grad_clip)
            leaves = params.leaves()
            for i, g in enumerate(grads):
                velocity[i] = config.momentum * velocity[i] - config.step_size * g
            params = params.with_leaves([ad.value_of(t) + v for t, v in zip(leaves, velocity)])

        try:
            st = tr.stats(params, train_idx, alm)
            alm = dual_update(alm, st['mean_abs'])
            val = tr.stats(params, val_idx, alm)['violation']
        except (NonFiniteError, DomainError) as e:
            raise DivergenceError(outer, config.inner_steps, alm.rho, alm.mean_lambda, str(e)) from e
        if not math.isfinite(st['loss']):
            raise DivergenceError(outer, config.inner_steps, alm.rho, alm.mean_lambda, 'loss is not finite')
        rows.append(row(outer, config.inner_steps, st))
        if val < best_val:
            best, best_val = params.copy(), val
        logger.info(f"[train] {mode.value} outer {outer}/{config.outer_steps}: loss={st['loss']:.4e} "
                    f"|f_pqv|={st['mean|f_pqv|']:.3e} val={val:.3e} rho={alm.rho:.3g}")

        if config.stall_tol and abs(st['loss'] - prev_loss) <= config.stall_tol * max(abs(prev_loss), 1e-12):
            logger.info(f"[train] {mode.value}: objective stable after outer {outer}, stopping")
            break
        prev_loss = st['loss']

    return TrainResult(best, alm, pd.DataFrame(rows, columns=LOG_COLUMNS), tr.norm, mode, config)


# ═══════════════════════════════════════════════════════════
#  MODEL BANK
# ═══════════════════════════════════════════════════════════

def config_fingerprint(config: TrainConfig) -> str:
    canon = json.dumps(config.fingerprint_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class BankEntry:
    mode:              ControlMode
    params:            ChebNetParams
    norm:              FeatureNorm
    raw_angles:        bool = False
    use_edge_features: bool = True
    voltage_band:      float = 0.25
    angle_scale:       float = 0.5
    fingerprint:       str = ''

    @classmethod
    def from_result(cls, result: TrainResult) -> 'BankEntry':
        cfg = result.config
        return cls(result.mode, result.params, result.norm, cfg.raw_angles, cfg.use_edge_features,
                   cfg.voltage_band, cfg.angle_scale, config_fingerprint(cfg))

    def predict(self, case: NetworkCase, features: GraphFeatures = None):
        """Decoded candidate for `case` (features default to the case's own injections)."""
        topology = build_topology(case)
        if features is None:
            ix = case_index(case)
            features = build_feature_batch(case, self.mode, ix.p_inj[None], ix.q_inj[None])
        basis = spectral_basis(topology, self.params.order)
        raw = run_network(self.params, basis, features, self.norm,
                          z_embed=self.params.z_for(topology), use_edge_features=self.use_edge_features)
        return decode_outputs(raw, case, self.mode, self.raw_angles, self.voltage_band, self.angle_scale)

    def to_dict(self) -> dict:
        return {
            'mode':              self.mode.value,
            'raw_angles':        self.raw_angles,
            'use_edge_features': self.use_edge_features,
            'voltage_band':      self.voltage_band,
            'angle_scale':       self.angle_scale,
            'fingerprint':       self.fingerprint,
            'norm':              self.norm.to_dict(),
            **self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'BankEntry':
        try:
            return cls(
                mode              = ControlMode(data['mode']),
                params            = ChebNetParams.from_dict(data),
                norm              = FeatureNorm.from_dict(data['norm']),
                raw_angles        = bool(data.get('raw_angles', False)),
                use_edge_features = bool(data.get('use_edge_features', True)),
                voltage_band      = float(data.get('voltage_band', 0.25)),
                angle_scale       = float(data.get('angle_scale', 0.5)),
                fingerprint       = str(data.get('fingerprint', '')),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed bank entry: {e}") from e


@dataclass
class ModelBank:
    entries: dict = field(default_factory=dict)      # ControlMode → BankEntry
    logs:    dict = field(default_factory=dict)      # ControlMode → training log, not persisted

    def __len__(self):
        return len(self.entries)

    def __contains__(self, mode):
        return mode in self.entries

    def __getitem__(self, mode) -> BankEntry:
        return self.entries[mode]

    def modes(self) -> list:
        return [m for m in MODE_ORDER if m in self.entries]


def train_all_modes(dataset: TrainingSet, case: NetworkCase, config: TrainConfig = None) -> ModelBank:
    """One network per control mode, decoded with raw angles so violations stay visible."""
    config = dataclasses.replace(config or TrainConfig(), raw_angles=True)
    for mode in MODE_ORDER:
        mode_current(case, mode)
    bank = ModelBank()
    for mode in MODE_ORDER:
        result = alm_train(dataset, case, mode, config)
        bank.entries[mode] = BankEntry.from_result(result)
        bank.logs[mode] = result.log
    logger.info(f"[train] bank ready: {[m.value for m in bank.modes()]}")
    return bank


def save_bank(bank: ModelBank, path: str):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    payload = {
        'format':  BANK_FORMAT,
        'version': BANK_VERSION,
        'entries': {m.value: e.to_dict() for m, e in bank.entries.items()},
    }
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(payload, fh)
    logger.info(f"[train] bank saved to {path}")


def load_bank(path: str) -> ModelBank:
    if not os.path.isfile(path):
        raise NotFound(f"model bank {path!r} does not exist")
    try:
        with open(path, encoding='utf-8') as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValidationError(f"model bank {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get('format') != BANK_FORMAT:
        raise ValidationError(f"model bank {path}: not an {BANK_FORMAT} file")
    if payload.get('version') != BANK_VERSION:
        raise ValidationError(f"model bank {path}: unsupported version {payload.get('version')}")
    entries = {}
    for name, data in (payload.get('entries') or {}).items():
        entry = BankEntry.from_dict(data)
        entries[entry.mode] = entry
    return ModelBank(entries)
