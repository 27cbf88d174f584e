"""
core/models.py
──────────────
Single source of truth for the network case schema.

Every case parser MUST return a NetworkCase built from these types.
All electrical quantities are per-unit on case.base_mva; angles are
radians. Cases are immutable: topology edits return a new case.
"""

import enum
import logging
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from core.errors import DisconnectionError, DomainError, ModeDataMissing, NotFound, ValidationError

logger = logging.getLogger(__name__)

_MEMO_LOCK = threading.Lock()


class BusKind(str, enum.Enum):
    PQ    = 'PQ'
    PV    = 'PV'
    SLACK = 'Slack'
    PCC   = 'PCC'


class BranchStatus(str, enum.Enum):
    CLOSED  = 'closed'
    TRIPPED = 'tripped'


class ControlMode(str, enum.Enum):
    MODE1 = 'Mode1'     # constant rectifier current + constant inverter voltage
    MODE2 = 'Mode2'     # minimum firing angle + constant inverter current


MODE_ORDER = (ControlMode.MODE1, ControlMode.MODE2)


@dataclass(frozen=True)
class Bus:
    id:     int
    kind:   BusKind
    p_gen:  float = 0.0
    p_load: float = 0.0
    q_gen:  float = 0.0
    q_load: float = 0.0
    v_ref:  float = None      # PV / Slack only

    @property
    def p_inj(self) -> float:
        return self.p_gen - self.p_load

    @property
    def q_inj(self) -> float:
        return self.q_gen - self.q_load


@dataclass(frozen=True)
class AcBranch:
    from_bus: int
    to_bus:   int
    g:        float
    b:        float
    status:   BranchStatus = BranchStatus.CLOSED

    @property
    def pair(self) -> tuple:
        return (min(self.from_bus, self.to_bus), max(self.from_bus, self.to_bus))

    @property
    def closed(self) -> bool:
        return self.status == BranchStatus.CLOSED


@dataclass(frozen=True)
class DcLink:
    rect_pcc:  int
    inv_pcc:   int
    r_dc:      float
    x_c_re:    float
    x_c_iv:    float
    k_min:     float
    k_max:     float
    alpha_min: float
    gamma_min: float
    mode:      ControlMode = ControlMode.MODE1
    i_ref_re:  float = None   # Mode1
    v_ref_iv:  float = None   # Mode1
    i_ref_iv:  float = None   # Mode2

    def reference(self, mode: ControlMode, name: str, index: int = None) -> float:
        value = getattr(self, name)
        if value is None:
            raise ModeDataMissing(mode, name, index)
        return value

    def check_mode_data(self, mode: ControlMode, index: int = None):
        needed = ('i_ref_re', 'v_ref_iv') if mode == ControlMode.MODE1 else ('i_ref_iv',)
        for name in needed:
            self.reference(mode, name, index)


@dataclass(frozen=True)
class GenUnit:
    """Installed renewable / hydro capacity at a bus (scenario sampler input)."""
    bus:   int
    kind:  str        # 'renewable' | 'hydro'
    rated: float      # p.u.


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses:    tuple
    branches: tuple
    dc_links: tuple = ()
    units:    tuple = ()
    name:     str = ''

    @property
    def bus_ids(self) -> tuple:
        return tuple(b.id for b in self.buses)

    @property
    def closed_branches(self) -> tuple:
        return tuple(br for br in self.branches if br.closed)

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise NotFound(f"bus {bus_id} not in case {self.name!r}")


def to_per_unit(value_physical: float, base_mva: float) -> float:
    """MW / MVAr → p.u. on base_mva."""
    if not base_mva > 0:
        raise DomainError(f"base_mva must be positive, got {base_mva}")
    return value_physical / base_mva


# ═══════════════════════════════════════════════════════════
#  VALIDATION
# ═══════════════════════════════════════════════════════════

def validate_case(case: NetworkCase) -> NetworkCase:
    """
    Raise ValidationError naming the first offending element, else
    return the case unchanged.
    """
    if not case.base_mva > 0:
        raise ValidationError(f"base_mva: must be positive, got {case.base_mva}")
    if not case.buses:
        raise ValidationError("buses: case has no buses")

    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"buses: duplicate ids {dup}")
    id_set = set(ids)

    slacks = [b.id for b in case.buses if b.kind == BusKind.SLACK]
    if len(slacks) != 1:
        raise ValidationError(f"buses: exactly one Slack bus required, found {len(slacks)} {slacks}")

    for b in case.buses:
        if b.kind in (BusKind.PV, BusKind.SLACK):
            if b.v_ref is None or not b.v_ref > 0:
                raise ValidationError(f"bus {b.id}: {b.kind.value} bus needs a positive v_ref")
        elif b.v_ref is not None:
            raise ValidationError(f"bus {b.id}: v_ref only allowed on PV/Slack buses")

    seen_pairs = set()
    for n, br in enumerate(case.branches):
        tag = f"branches[{n}] ({br.from_bus},{br.to_bus})"
        if br.from_bus not in id_set or br.to_bus not in id_set:
            raise ValidationError(f"{tag}: unknown bus")
        if br.from_bus == br.to_bus:
            raise ValidationError(f"{tag}: self loop")
        if br.pair in seen_pairs:
            raise ValidationError(f"{tag}: duplicate branch between the same buses")
        seen_pairs.add(br.pair)
        if not (np.isfinite(br.g) and np.isfinite(br.b)):
            raise ValidationError(f"{tag}: non-finite admittance")

    attached = set()
    for n, ln in enumerate(case.dc_links):
        _validate_link(case, n, ln)
        attached.update((ln.rect_pcc, ln.inv_pcc))

    branch_ends = {x for br in case.closed_branches for x in (br.from_bus, br.to_bus)}
    for b in case.buses:
        if b.kind != BusKind.PCC:
            continue
        if b.id not in attached:
            raise ValidationError(f"bus {b.id}: PCC bus without a DC link")
        if b.id not in branch_ends:
            raise ValidationError(f"bus {b.id}: PCC bus without a closed AC branch")

    for n, u in enumerate(case.units):
        if u.bus not in id_set:
            raise ValidationError(f"units[{n}]: unknown bus {u.bus}")
        if u.kind not in ('renewable', 'hydro'):
            raise ValidationError(f"units[{n}]: kind must be 'renewable' or 'hydro'")
        if not u.rated >= 0:
            raise ValidationError(f"units[{n}]: rated must be >= 0")

    if not is_connected(case):
        raise DisconnectionError(f"case {case.name!r}: closed AC branches do not connect every bus")
    return case


def _validate_link(case: NetworkCase, n: int, ln: DcLink):
    tag = f"dc_links[{n}]"
    kinds = {b.id: b.kind for b in case.buses}
    for side, bus_id in (('rect_pcc', ln.rect_pcc), ('inv_pcc', ln.inv_pcc)):
        if kinds.get(bus_id) != BusKind.PCC:
            raise ValidationError(f"{tag}: {side} {bus_id} is not a PCC bus")
    if ln.rect_pcc == ln.inv_pcc:
        raise ValidationError(f"{tag}: rectifier and inverter on the same bus")
    if not ln.r_dc > 0:
        raise ValidationError(f"{tag}: r_dc must be positive")
    if ln.x_c_re < 0 or ln.x_c_iv < 0:
        raise ValidationError(f"{tag}: commutation reactance must be >= 0")
    if not 0 < ln.k_min < ln.k_max:
        raise ValidationError(f"{tag}: need 0 < k_min < k_max")
    for name in ('alpha_min', 'gamma_min'):
        if not 0 < getattr(ln, name) < np.pi / 2:
            raise ValidationError(f"{tag}: {name} must lie in (0, pi/2)")
    ln.check_mode_data(ln.mode, n)


def is_connected(case: NetworkCase) -> bool:
    ids = case.bus_ids
    if not ids:
        return False
    adj = {i: [] for i in ids}
    for br in case.closed_branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    seen, stack = {ids[0]}, [ids[0]]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == len(ids)


# ═══════════════════════════════════════════════════════════
#  TOPOLOGY / INJECTION EDITS
# ═══════════════════════════════════════════════════════════

def _find_branch(case: NetworkCase, branch: tuple) -> int:
    key = (min(branch), max(branch))
    for n, br in enumerate(case.branches):
        if br.pair == key:
            return n
    raise NotFound(f"branch {tuple(branch)} not in case {case.name!r}")


def apply_topology_change(case: NetworkCase, branch: tuple) -> NetworkCase:
    """Trip one closed branch; the input case is left untouched."""
    n = _find_branch(case, branch)
    if not case.branches[n].closed:
        raise NotFound(f"branch {tuple(branch)} is already tripped")
    branches = list(case.branches)
    branches[n] = replace(branches[n], status=BranchStatus.TRIPPED)
    out = replace(case, branches=tuple(branches))
    if not is_connected(out):
        raise DisconnectionError(f"tripping branch {tuple(branch)} disconnects the network")
    logger.info(f"[models] tripped branch {tuple(branch)} in {case.name!r}")
    return out


def restore_branch(case: NetworkCase, branch: tuple) -> NetworkCase:
    n = _find_branch(case, branch)
    branches = list(case.branches)
    branches[n] = replace(branches[n], status=BranchStatus.CLOSED)
    return replace(case, branches=tuple(branches))


def with_injections(case: NetworkCase, p_gen, q_gen, p_load, q_load) -> NetworkCase:
    """Case with per-bus injections replaced (arrays aligned with case.buses)."""
    buses = tuple(
        replace(b, p_gen=float(p_gen[i]), q_gen=float(q_gen[i]),
                p_load=float(p_load[i]), q_load=float(q_load[i]))
        for i, b in enumerate(case.buses)
    )
    out = replace(case, buses=buses)
    out.__dict__['_structure'] = _structure(case)
    return out


# ═══════════════════════════════════════════════════════════
#  ARRAY INDEX
# ═══════════════════════════════════════════════════════════

@dataclass(frozen=True, eq=False)
class CaseIndex:
    """Dense array view of a case, shared by the solver, residuals and features."""
    n_bus:     int
    pos:       dict                   # bus id → row
    slack:     int
    pv:        np.ndarray
    pq:        np.ndarray             # PQ and PCC buses
    nonslack:  np.ndarray
    v_ref:     np.ndarray             # 0 where not pinned
    pinned:    np.ndarray             # 1.0 on PV/Slack
    p_inj:     np.ndarray
    q_inj:     np.ndarray
    f:         np.ndarray             # closed-branch endpoints
    t:         np.ndarray
    g:         np.ndarray
    b:         np.ndarray
    sf:        np.ndarray             # (m, N) one-hot
    st:        np.ndarray
    rect:      np.ndarray             # per link PCC rows
    inv:       np.ndarray
    rect_sel:  np.ndarray             # (a, N) one-hot
    inv_sel:   np.ndarray
    links:     dict = field(default_factory=dict)   # per-link parameter arrays

    @property
    def n_link(self) -> int:
        return len(self.rect)


_LINK_FIELDS = ('r_dc', 'x_c_re', 'x_c_iv', 'k_min', 'k_max', 'alpha_min', 'gamma_min',
                'i_ref_re', 'i_ref_iv', 'v_ref_iv')


# ── Per-instance memo ─────────────────────────────────────
# Cases are frozen, so derived arrays live in the instance __dict__.
# '_structure' holds everything that does not depend on injections and is
# handed on by with_injections; any other edit builds a fresh case.

def _structure(case: NetworkCase) -> dict:
    memo = case.__dict__.get('_structure')
    if memo is None:
        with _MEMO_LOCK:
            memo = case.__dict__.setdefault('_structure', {})
    return memo


def memoized(case: NetworkCase, key, build):
    """Injection-independent value for case under key, built once per structure."""
    memo = _structure(case)
    hit = memo.get(key)
    if hit is None:
        hit = build()
        with _MEMO_LOCK:
            hit = memo.setdefault(key, hit)
    return hit


def case_index(case: NetworkCase) -> CaseIndex:
    hit = case.__dict__.get('_index')
    if hit is not None:
        return hit
    shared = memoized(case, 'index', lambda: _build_index(case))
    ix = replace(shared,
                 p_inj=np.array([b.p_inj for b in case.buses]),
                 q_inj=np.array([b.q_inj for b in case.buses]))
    with _MEMO_LOCK:
        return case.__dict__.setdefault('_index', ix)


def _build_index(case: NetworkCase) -> CaseIndex:
    n = len(case.buses)
    pos = {b.id: i for i, b in enumerate(case.buses)}
    kinds = [b.kind for b in case.buses]
    slack = kinds.index(BusKind.SLACK)
    pv = np.array([i for i, k in enumerate(kinds) if k == BusKind.PV], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k in (BusKind.PQ, BusKind.PCC)], dtype=int)
    nonslack = np.array([i for i in range(n) if i != slack], dtype=int)
    v_ref = np.array([b.v_ref if b.v_ref is not None else 0.0 for b in case.buses])
    pinned = np.array([1.0 if k in (BusKind.PV, BusKind.SLACK) else 0.0 for k in kinds])

    closed = case.closed_branches
    f = np.array([pos[br.from_bus] for br in closed], dtype=int)
    t = np.array([pos[br.to_bus] for br in closed], dtype=int)
    sf = np.zeros((len(closed), n)); sf[np.arange(len(closed)), f] = 1.0
    st = np.zeros((len(closed), n)); st[np.arange(len(closed)), t] = 1.0

    a = len(case.dc_links)
    rect = np.array([pos[ln.rect_pcc] for ln in case.dc_links], dtype=int)
    inv = np.array([pos[ln.inv_pcc] for ln in case.dc_links], dtype=int)
    rect_sel = np.zeros((a, n)); rect_sel[np.arange(a), rect] = 1.0
    inv_sel = np.zeros((a, n)); inv_sel[np.arange(a), inv] = 1.0
    links = {
        name: np.array([np.nan if getattr(ln, name) is None else getattr(ln, name)
                        for ln in case.dc_links], dtype=float)
        for name in _LINK_FIELDS
    }

    return CaseIndex(
        n_bus    = n,
        pos      = pos,
        slack    = slack,
        pv       = pv,
        pq       = pq,
        nonslack = nonslack,
        v_ref    = v_ref,
        pinned   = pinned,
        p_inj    = np.array([b.p_inj for b in case.buses]),
        q_inj    = np.array([b.q_inj for b in case.buses]),
        f        = f,
        t        = t,
        g        = np.array([br.g for br in closed]),
        b        = np.array([br.b for br in closed]),
        sf       = sf,
        st       = st,
        rect     = rect,
        inv      = inv,
        rect_sel = rect_sel,
        inv_sel  = inv_sel,
        links    = links,
    )
