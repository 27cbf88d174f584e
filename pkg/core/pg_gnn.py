"""
core/pg_gnn.py
──────────────
Physics-guided ChebNet surrogate.

  embed_inputs   : H0 = [x_nodes, Z·x_edges]   (edge features pulled onto nodes)
  forward        : H ← σ(Σ_j T_j(L̂)·H·θ_j) per layer, tanh hidden, linear head
  decode_outputs : raw (…, n_nodes, 2) → CandidateSolution with pinned
                   slack / PV quantities and DC terms derived from the
                   converter equations

Everything here accepts either plain ndarrays or autodiff Vars, so the
same code path serves inference and training. With nothing to record,
forward() multiplies by the stacked Chebyshev basis in one product per layer.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from core import autodiff as ad
from core.acdc_solver import K_V, AcState, DcState, PowerFlowSolution, converter_voltage
from core.config import C
from core.errors import ShapeMismatch, ValidationError
from core.graph_builder import GraphFeatures, GraphTopology
from core.models import ControlMode, NetworkCase, case_index

logger = logging.getLogger(__name__)

IN_DIM  = 4      # 2 node channels + 2 embedded edge channels
OUT_DIM = 2


# ═══════════════════════════════════════════════════════════
#  PARAMETERS
# ═══════════════════════════════════════════════════════════

@dataclass
class ChebNetParams:
    theta:     list                 # theta[l][j] : (dims[l], dims[l+1])
    z_embed:   object               # (n_nodes, n_edges)
    mask:      np.ndarray           # incidence sparsity of z_embed
    dims:      tuple
    order:     int
    node_keys: tuple = ()
    edge_keys: tuple = ()

    @property
    def layers(self) -> int:
        return len(self.dims) - 1

    @property
    def n_params(self) -> int:
        dense = sum((self.order + 1) * a * b for a, b in zip(self.dims[:-1], self.dims[1:]))
        return int(dense + np.count_nonzero(self.mask))

    def bind(self, tape: ad.Tape) -> 'ChebNetParams':
        """Copy whose θ and Z are leaves on `tape`."""
        return ChebNetParams(
            theta     = [[tape.var(t) for t in layer] for layer in self.theta],
            z_embed   = tape.var(self.z_embed),
            mask      = self.mask,
            dims      = self.dims,
            order     = self.order,
            node_keys = self.node_keys,
            edge_keys = self.edge_keys,
        )

    def leaves(self) -> list:
        """Flat list of parameter tensors (θ in layer/order order, then Z)."""
        return [t for layer in self.theta for t in layer] + [self.z_embed]

    def with_leaves(self, values: list) -> 'ChebNetParams':
        it = iter(values)
        theta = [[np.array(next(it), dtype=float) for _ in layer] for layer in self.theta]
        z = np.array(next(it), dtype=float) * self.mask
        return ChebNetParams(theta, z, self.mask, self.dims, self.order, self.node_keys, self.edge_keys)

    def copy(self) -> 'ChebNetParams':
        return self.with_leaves([ad.value_of(t) for t in self.leaves()])

    def masked_z(self):
        return self.z_embed * self.mask

    def z_for(self, topology: GraphTopology):
        """
        Z restricted to another topology by (node, edge) identity.
        Nodes / edges the parameters never saw get zero rows / columns.
        """
        if topology.node_keys == self.node_keys and topology.edge_keys == self.edge_keys:
            return self.masked_z()
        z = ad.value_of(self.z_embed) * self.mask
        node_pos = {k: i for i, k in enumerate(self.node_keys)}
        edge_pos = {k: i for i, k in enumerate(self.edge_keys)}
        rows = [(i, node_pos[k]) for i, k in enumerate(topology.node_keys) if k in node_pos]
        cols = [(j, edge_pos[k]) for j, k in enumerate(topology.edge_keys) if k in edge_pos]
        out = np.zeros((topology.n_nodes, topology.n_edges))
        if rows and cols:
            dst_r, src_r = zip(*rows)
            dst_c, src_c = zip(*cols)
            out[np.ix_(dst_r, dst_c)] = z[np.ix_(src_r, src_c)]
        return out * topology.incidence

    def to_dict(self) -> dict:
        return {
            'dims':      list(self.dims),
            'order':     self.order,
            'theta':     [[np.asarray(ad.value_of(t)).tolist() for t in layer] for layer in self.theta],
            'z_embed':   np.asarray(ad.value_of(self.z_embed)).tolist(),
            'mask':      self.mask.tolist(),
            'node_keys': [list(k) for k in self.node_keys],
            'edge_keys': [list(k) for k in self.edge_keys],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ChebNetParams':
        try:
            dims = tuple(int(d) for d in data['dims'])
            order = int(data['order'])
            theta = [[np.array(t, dtype=float) for t in layer] for layer in data['theta']]
            mask = np.array(data['mask'], dtype=float)
            z = np.array(data['z_embed'], dtype=float).reshape(mask.shape)
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed network parameters: {e}") from e
        if len(theta) != len(dims) - 1 or any(len(layer) != order + 1 for layer in theta):
            raise ShapeMismatch(f"theta layout does not match dims {dims} / order {order}")
        for l, layer in enumerate(theta):
            for t in layer:
                if t.shape != (dims[l], dims[l + 1]):
                    raise ShapeMismatch(f"layer {l}: weight {t.shape}, expected {(dims[l], dims[l + 1])}")
        return cls(
            theta     = theta,
            z_embed   = z,
            mask      = mask,
            dims      = dims,
            order     = order,
            node_keys = tuple(tuple(k) for k in data.get('node_keys', [])),
            edge_keys = tuple(tuple(k) for k in data.get('edge_keys', [])),
        )


def init_params(topology: GraphTopology, width: int = 64, layers: int = 3, order: int = 3,
                seed: int = 0) -> ChebNetParams:
    """Xavier-uniform θ; Z = 1/degree + N(0, 0.01²) on the incidence pattern."""
    if width < 2:
        raise ValidationError(f"width must be ≥ 2, got {width}")
    if layers < 2:
        raise ValidationError(f"layers must be ≥ 2, got {layers}")
    if order < 0:
        raise ValidationError(f"order must be ≥ 0, got {order}")

    rng = np.random.default_rng(seed)
    dims = (IN_DIM,) + (width,) * (layers - 1) + (OUT_DIM,)
    theta = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        theta.append([rng.uniform(-limit, limit, size=(fan_in, fan_out)) for _ in range(order + 1)])

    mask = topology.incidence.copy()
    degree = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    z = mask * (1.0 / degree + 0.01 * rng.standard_normal(mask.shape))

    params = ChebNetParams(theta, z, mask, dims, order, topology.node_keys, topology.edge_keys)
    logger.debug(f"[gnn] init dims={dims} order={order} seed={seed}: {params.n_params} parameters")
    return params


# ═══════════════════════════════════════════════════════════
#  FEATURE NORMALIZATION
# ═══════════════════════════════════════════════════════════

def _spread(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=0)
    return np.where(std > C.FEATURE_STD_FLOOR, std, 1.0)


@dataclass
class FeatureNorm:
    node_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    node_std:  np.ndarray = field(default_factory=lambda: np.ones(2))
    edge_mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    edge_std:  np.ndarray = field(default_factory=lambda: np.ones(2))

    @classmethod
    def fit(cls, features: GraphFeatures) -> 'FeatureNorm':
        """Per-channel z-score statistics; a constant channel is only centred."""
        xn = features.x_nodes.reshape(-1, features.x_nodes.shape[-1])
        xe = features.x_edges.reshape(-1, features.x_edges.shape[-1])
        return cls(
            node_mean = xn.mean(axis=0),
            node_std  = _spread(xn),
            edge_mean = xe.mean(axis=0),
            edge_std  = _spread(xe),
        )

    def apply(self, features: GraphFeatures) -> GraphFeatures:
        return GraphFeatures(
            (features.x_nodes - self.node_mean) / self.node_std,
            (features.x_edges - self.edge_mean) / self.edge_std,
        )

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ('node_mean', 'node_std', 'edge_mean', 'edge_std')}

    @classmethod
    def from_dict(cls, data: dict) -> 'FeatureNorm':
        return cls(**{k: np.array(v, dtype=float) for k, v in data.items()})


# ═══════════════════════════════════════════════════════════
#  NETWORK
# ═══════════════════════════════════════════════════════════

def embed_inputs(features: GraphFeatures, z_embed, use_edge_features: bool = True):
    """H0 = concat(x_nodes, Z·x_edges) along the channel axis."""
    x_nodes, x_edges = features.x_nodes, features.x_edges
    z_shape = np.shape(ad.value_of(z_embed))
    if z_shape != (x_nodes.shape[-2], x_edges.shape[-2]):
        raise ShapeMismatch(f"z_embed {z_shape} vs {x_nodes.shape[-2]} nodes / {x_edges.shape[-2]} edges")
    if not use_edge_features:
        return np.concatenate([x_nodes, np.zeros(x_nodes.shape[:-1] + (x_edges.shape[-1],))], axis=-1)
    return ad.concat([x_nodes, ad.matmul(z_embed, x_edges)], axis=-1)


def forward(params: ChebNetParams, basis, h0):
    """Chebyshev layers over basis.cheb; tanh on hidden layers, linear head."""
    cheb = basis.cheb
    if len(cheb) < params.order + 1:
        raise ShapeMismatch(f"basis has order {len(cheb) - 1}, parameters need {params.order}")
    n = cheb[0].shape[0]
    shape = np.shape(ad.value_of(h0))
    if shape[-2] != n or shape[-1] != params.dims[0]:
        raise ShapeMismatch(f"H0 {shape} vs basis on {n} nodes with {params.dims[0]} input channels")
    if not isinstance(h0, ad.Var) and not any(isinstance(t, ad.Var) for layer in params.theta for t in layer):
        return _forward_stacked(params, basis, np.asarray(h0, dtype=float))

    h = h0
    for l, layer in enumerate(params.theta):
        acc = None
        for j, weight in enumerate(layer):
            th = h if j == 0 else ad.matmul(cheb[j], h)
            term = ad.matmul(th, weight)
            acc = term if acc is None else acc + term
        h = acc if l == params.layers - 1 else ad.tanh(acc)
    return h


def _forward_stacked(params: ChebNetParams, basis, h: np.ndarray) -> np.ndarray:
    # inference only: one (K+1)n×n product and one weight product per layer
    k = params.order + 1
    n = basis.cheb[0].shape[0]
    stacked = basis.stacked[:k * n]
    for l, layer in enumerate(params.theta):
        th = np.matmul(stacked, h).reshape(h.shape[:-2] + (k, n, h.shape[-1]))
        th = np.moveaxis(th, -3, -2).reshape(h.shape[:-1] + (k * h.shape[-1],))
        h = th @ np.concatenate(layer, axis=0)
        if l < params.layers - 1:
            h = np.tanh(h)
    return h


# ═══════════════════════════════════════════════════════════
#  DECODING
# ═══════════════════════════════════════════════════════════

@dataclass
class CandidateSolution:
    """
    Primaries (v, δ, α, γ, taps) plus the DC quantities derived from
    them. Arrays carry an optional leading batch axis; entries may be
    autodiff Vars during training.
    """
    modes:      tuple
    v:          object
    delta:      object
    alpha:      object
    gamma:      object
    k_re:       object
    k_iv:       object
    i_d:        object
    v_dre:      object
    v_div:      object
    cos_phi_re: object
    cos_phi_iv: object

    _FIELDS = ('v', 'delta', 'alpha', 'gamma', 'k_re', 'k_iv', 'i_d',
               'v_dre', 'v_div', 'cos_phi_re', 'cos_phi_iv')

    @property
    def mode(self) -> ControlMode:
        return ControlMode.MODE2 if ControlMode.MODE2 in self.modes else ControlMode.MODE1

    @property
    def batched(self) -> bool:
        return np.ndim(ad.value_of(self.v)) == 2

    def numpy(self) -> 'CandidateSolution':
        return CandidateSolution(self.modes, **{f: np.asarray(ad.value_of(getattr(self, f)), dtype=float)
                                                 for f in self._FIELDS})

    def sample(self, i: int) -> 'CandidateSolution':
        flat = self.numpy()
        if not flat.batched:
            return flat
        return CandidateSolution(self.modes, **{f: getattr(flat, f)[i] for f in self._FIELDS})

    def to_solution(self) -> PowerFlowSolution:
        c = self.sample(0)
        phi_re = np.arccos(np.clip(c.cos_phi_re, -1.0, 1.0))
        phi_iv = np.arccos(np.clip(c.cos_phi_iv, -1.0, 1.0))
        dc = [
            DcState(self.modes[k], float(c.i_d[k]), float(c.v_dre[k]), float(c.v_div[k]),
                    float(c.alpha[k]), float(c.gamma[k]), float(c.k_re[k]), float(c.k_iv[k]),
                    float(phi_re[k]), float(phi_iv[k]))
            for k in range(len(self.modes))
        ]
        return PowerFlowSolution(AcState(c.v.copy(), c.delta.copy()), dc, tuple(self.modes),
                                 iterations=0, converged=True)

    @classmethod
    def from_solution(cls, sol: PowerFlowSolution) -> 'CandidateSolution':
        def col(name):
            return np.array([getattr(st, name) for st in sol.dc], dtype=float)
        return cls(
            modes      = tuple(sol.mode_used),
            v          = np.asarray(sol.ac.v, dtype=float),
            delta      = np.asarray(sol.ac.delta, dtype=float),
            alpha      = col('alpha'),
            gamma      = col('gamma'),
            k_re       = col('k_re'),
            k_iv       = col('k_iv'),
            i_d        = col('i_d'),
            v_dre      = col('v_d_re'),
            v_div      = col('v_d_iv'),
            cos_phi_re = np.cos(col('phi_re')),
            cos_phi_iv = np.cos(col('phi_iv')),
        )


def mode_current(case: NetworkCase, mode: ControlMode) -> np.ndarray:
    """Per-link I_d fixed by the mode's reference."""
    for k, link in enumerate(case.dc_links):
        link.check_mode_data(mode, k)
    ix = case_index(case)
    name = 'i_ref_re' if mode == ControlMode.MODE1 else 'i_ref_iv'
    return ix.links[name].copy()


def decode_outputs(raw, case: NetworkCase, mode: ControlMode, raw_angles: bool = False,
                   voltage_band: float = None, angle_scale: float = None) -> CandidateSolution:
    """
    Bus rows  → V = 1 + band·tanh(r₀), δ = r₁;  PV/slack V and slack δ pinned.
    Converter → angle = min + scale·softplus(r₀)  (min + scale·r₀ with raw_angles),
                K = K_min + (K_max − K_min)·sigmoid(r₁).
    """
    ix = case_index(case)
    band = C.VOLTAGE_BAND if voltage_band is None else voltage_band
    scale = C.ANGLE_SCALE if angle_scale is None else angle_scale
    n_nodes = ix.n_bus + 2 * ix.n_link
    if np.shape(ad.value_of(raw))[-2:] != (n_nodes, OUT_DIM):
        raise ShapeMismatch(f"raw output {np.shape(ad.value_of(raw))}, expected (…, {n_nodes}, {OUT_DIM})")

    ch0 = ad.take(raw, 0, axis=-1)
    ch1 = ad.take(raw, 1, axis=-1)
    bus_rows = np.arange(ix.n_bus)
    rect_rows = ix.n_bus + 2 * np.arange(ix.n_link)
    inv_rows = rect_rows + 1

    free = 1.0 - ix.pinned
    v = ix.pinned * ix.v_ref + free * (1.0 + band * ad.tanh(ad.take(ch0, bus_rows, axis=-1)))
    not_slack = np.ones(ix.n_bus); not_slack[ix.slack] = 0.0
    delta = not_slack * ad.take(ch1, bus_rows, axis=-1)

    links = ix.links
    shaping = (lambda r: scale * r) if raw_angles else (lambda r: scale * ad.softplus(r))
    alpha = links['alpha_min'] + shaping(ad.take(ch0, rect_rows, axis=-1))
    gamma = links['gamma_min'] + shaping(ad.take(ch0, inv_rows, axis=-1))
    span = links['k_max'] - links['k_min']
    k_re = links['k_min'] + span * ad.sigmoid(ad.take(ch1, rect_rows, axis=-1))
    k_iv = links['k_min'] + span * ad.sigmoid(ad.take(ch1, inv_rows, axis=-1))

    i_d = np.broadcast_to(mode_current(case, mode), np.shape(ad.value_of(alpha))).copy()
    v_re = ad.take(v, ix.rect, axis=-1)
    v_iv = ad.take(v, ix.inv, axis=-1)
    v_dre = converter_voltage(k_re, v_re, alpha, links['x_c_re'], i_d)
    v_div = converter_voltage(k_iv, v_iv, gamma, links['x_c_iv'], i_d)

    return CandidateSolution(
        modes      = (mode,) * ix.n_link,
        v          = v,
        delta      = delta,
        alpha      = alpha,
        gamma      = gamma,
        k_re       = k_re,
        k_iv       = k_iv,
        i_d        = i_d,
        v_dre      = v_dre,
        v_div      = v_div,
        cos_phi_re = v_dre / (K_V * k_re * v_re),
        cos_phi_iv = v_div / (K_V * k_iv * v_iv),
    )


def run_network(params: ChebNetParams, basis, features: GraphFeatures, norm: FeatureNorm = None,
                z_embed=None, use_edge_features: bool = True):
    """Normalize → embed → forward. Returns raw outputs."""
    feats = norm.apply(features) if norm is not None else features
    z = params.masked_z() if z_embed is None else z_embed
    return forward(params, basis, embed_inputs(feats, z, use_edge_features))
