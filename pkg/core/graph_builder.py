"""
core/graph_builder.py
─────────────────────
Unified AC/DC graph: every AC bus is a node, every converter adds a
node, and each DC link adds three edges (rectifier transformer,
inverter transformer, DC line). Also the node/edge feature matrices
and the Chebyshev spectral basis of the scaled Laplacian.

Node order : case buses (stored in id order), then per link
             (rectifier node, inverter node)
Edge order : closed AC branches in case order, then per link
             (rectifier edge, inverter edge, DC-line edge)
"""

import functools
import hashlib
import logging
import os
import threading
from dataclasses import dataclass

import numpy as np
import pandas as pd

from core.config import C
from core.errors import ConvergenceError, ShapeMismatch
from core.models import BusKind, ControlMode, NetworkCase, case_index, memoized

logger = logging.getLogger(__name__)

# ── Per-topology basis cache ──────────────────────────────
_BASIS: dict = {}
_BASIS_LOCK = threading.Lock()


@dataclass(frozen=True, eq=False)
class GraphTopology:
    n_nodes:   int
    n_edges:   int
    n_bus:     int
    n_link:    int
    adjacency: np.ndarray
    incidence: np.ndarray        # (n_nodes, n_edges) 0/1
    node_keys: tuple
    edge_keys: tuple
    key:       str

    def node_rows(self, keys) -> np.ndarray:
        pos = {k: i for i, k in enumerate(self.node_keys)}
        return np.array([pos[k] for k in keys], dtype=int)


@dataclass(frozen=True, eq=False)
class GraphFeatures:
    x_nodes: np.ndarray          # (..., n_nodes, 2)
    x_edges: np.ndarray          # (..., n_edges, 2)


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    laplacian: np.ndarray
    zeta_max:  float
    scaled:    np.ndarray
    cheb:      tuple

    @functools.cached_property
    def stacked(self) -> np.ndarray:
        """[T_0; T_1; …; T_K] as one ((K+1)·n, n) matrix."""
        return np.concatenate(self.cheb, axis=0)


# ═══════════════════════════════════════════════════════════
#  TOPOLOGY
# ═══════════════════════════════════════════════════════════

def build_topology(case: NetworkCase) -> GraphTopology:
    """Built once per case structure; injection variants share it."""
    return memoized(case, 'topology', lambda: _build_topology(case))


def _build_topology(case: NetworkCase) -> GraphTopology:
    ix = case_index(case)
    node_keys = [('bus', b.id) for b in case.buses]
    for k in range(len(case.dc_links)):
        node_keys += [('rect', k), ('inv', k)]
    pos = {key: i for i, key in enumerate(node_keys)}

    edge_keys, ends = [], []
    for br in case.closed_branches:
        edge_keys.append(('ac',) + br.pair)
        ends.append((pos[('bus', br.from_bus)], pos[('bus', br.to_bus)]))
    for k, link in enumerate(case.dc_links):
        edge_keys += [('xf_re', k), ('xf_iv', k), ('dc', k)]
        ends += [
            (pos[('bus', link.rect_pcc)], pos[('rect', k)]),
            (pos[('bus', link.inv_pcc)], pos[('inv', k)]),
            (pos[('rect', k)], pos[('inv', k)]),
        ]

    n, m = len(node_keys), len(edge_keys)
    adjacency = np.zeros((n, n))
    incidence = np.zeros((n, m))
    for e, (i, j) in enumerate(ends):
        adjacency[i, j] = adjacency[j, i] = 1.0
        incidence[i, e] = incidence[j, e] = 1.0

    key = hashlib.sha1(repr((node_keys, edge_keys)).encode()).hexdigest()[:16]
    return GraphTopology(
        n_nodes   = n,
        n_edges   = m,
        n_bus     = ix.n_bus,
        n_link    = ix.n_link,
        adjacency = adjacency,
        incidence = incidence,
        node_keys = tuple(node_keys),
        edge_keys = tuple(edge_keys),
        key       = key,
    )


# ═══════════════════════════════════════════════════════════
#  FEATURES
# ═══════════════════════════════════════════════════════════

def _converter_rows(case: NetworkCase, mode: ControlMode) -> tuple:
    nodes, edges = [], []
    for k, ln in enumerate(case.dc_links):
        ln.check_mode_data(mode, k)
        if mode == ControlMode.MODE1:
            nodes += [[ln.alpha_min, ln.x_c_re * ln.i_ref_re], [ln.gamma_min, ln.v_ref_iv]]
            dc_edge = [ln.r_dc, ln.i_ref_re]
        else:
            nodes += [[ln.alpha_min, ln.x_c_re * ln.i_ref_iv], [ln.gamma_min, ln.x_c_iv * ln.i_ref_iv]]
            dc_edge = [ln.r_dc, ln.i_ref_iv]
        edges += [[ln.k_min, ln.k_max], [ln.k_min, ln.k_max], dc_edge]
    return nodes, edges


def build_features(case: NetworkCase, mode: ControlMode, topology: GraphTopology = None) -> GraphFeatures:
    """Per-kind feature recipes; rows follow the topology's node / edge order."""
    nodes = []
    for b in case.buses:
        second = b.v_ref if b.kind in (BusKind.PV, BusKind.SLACK) else b.q_inj
        nodes.append([b.p_inj, second])
    conv_nodes, conv_edges = _converter_rows(case, mode)
    edges = [[br.g, br.b] for br in case.closed_branches] + conv_edges

    x_nodes = np.array(nodes + conv_nodes, dtype=float).reshape(-1, 2)
    x_edges = np.array(edges, dtype=float).reshape(-1, 2)
    if topology is not None:
        if x_nodes.shape[0] != topology.n_nodes or x_edges.shape[0] != topology.n_edges:
            raise ShapeMismatch(f"features {x_nodes.shape}/{x_edges.shape} do not match topology "
                                f"({topology.n_nodes} nodes, {topology.n_edges} edges)")
    return GraphFeatures(x_nodes, x_edges)


def _template(case: NetworkCase, mode: ControlMode) -> GraphFeatures:
    # injection channels are overwritten per sample
    base = build_features(case, mode)
    base.x_nodes.flags.writeable = False
    base.x_edges.flags.writeable = False
    return base


def build_feature_batch(case: NetworkCase, mode: ControlMode, p_inj: np.ndarray,
                        q_inj: np.ndarray) -> GraphFeatures:
    """Features for S injection profiles at once; p_inj, q_inj are (S, N)."""
    base = memoized(case, ('features', mode), lambda: _template(case, mode))
    ix = case_index(case)
    s = p_inj.shape[0]
    x_nodes = np.repeat(base.x_nodes[None], s, axis=0)
    x_nodes[:, :ix.n_bus, 0] = p_inj
    x_nodes[:, ix.pq, 1] = q_inj[:, ix.pq]
    x_edges = np.repeat(base.x_edges[None], s, axis=0)
    return GraphFeatures(x_nodes, x_edges)


# ═══════════════════════════════════════════════════════════
#  SPECTRAL BASIS
# ═══════════════════════════════════════════════════════════

def laplacian(topology) -> np.ndarray:
    """L = D − A. Accepts a GraphTopology or a bare adjacency matrix."""
    a = topology.adjacency if isinstance(topology, GraphTopology) else np.asarray(topology, dtype=float)
    return np.diag(a.sum(axis=1)) - a


def scale_laplacian(lap: np.ndarray) -> tuple:
    """(ζ_max by power iteration, L̂ = 2L/ζ_max − I)."""
    lap = np.asarray(lap, dtype=float)
    n = lap.shape[0]
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    zeta = 0.0
    for step in range(1, C.POWER_ITER_MAX + 1):
        w = lap @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            zeta = 0.0
            break
        est = float(v @ w)
        v = w / norm
        if step > 1 and abs(est - zeta) <= C.POWER_ITER_TOL * max(abs(est), C.ZETA_FLOOR):
            zeta = est
            break
        zeta = est
    else:
        raise ConvergenceError(f"power iteration did not settle in {C.POWER_ITER_MAX} steps "
                               f"(estimate {zeta:.6g})")
    zeta = max(zeta, C.ZETA_FLOOR)
    return zeta, 2.0 * lap / zeta - np.eye(n)


def chebyshev_basis(scaled: np.ndarray, order: int) -> list:
    n = scaled.shape[0]
    basis = [np.eye(n)]
    if order >= 1:
        basis.append(np.array(scaled, dtype=float))
    for _ in range(2, order + 1):
        basis.append(2.0 * scaled @ basis[-1] - basis[-2])
    return basis


def spectral_basis(topology: GraphTopology, order: int) -> SpectralBasis:
    """Cached per (topology, order)."""
    key = (topology.key, order)
    with _BASIS_LOCK:
        hit = _BASIS.get(key)
    if hit is not None:
        return hit
    lap = laplacian(topology)
    zeta, scaled = scale_laplacian(lap)
    basis = SpectralBasis(lap, zeta, scaled, tuple(chebyshev_basis(scaled, order)))
    logger.debug(f"[graph] basis for topology {topology.key}: zeta_max={zeta:.6g}, order {order}")
    with _BASIS_LOCK:
        _BASIS.setdefault(key, basis)
    return basis


def dump_basis(basis: SpectralBasis, out_dir: str) -> list:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    mats = [('laplacian', basis.laplacian), ('scaled_laplacian', basis.scaled)]
    mats += [(f'cheb_{j}', t) for j, t in enumerate(basis.cheb)]
    for name, mat in mats:
        path = os.path.join(out_dir, f'{name}.csv')
        pd.DataFrame(mat).to_csv(path, index=False, header=False)
        written.append(path)
    return written
