"""
parsers/case_json.py
─────────────────────
JSON case format (MATPOWER-style fields, physical units).

  base_mva            float
  buses[]             id, kind (PQ|PV|Slack|PCC), p_gen, p_load, q_gen,
                      q_load (MW / MVAr), v_ref (p.u., PV/Slack)
  branches[]          from, to, and either (r, x) or (g, b) in p.u.,
                      status (closed|tripped, default closed)
  dc_links[]          rect_pcc, inv_pcc, r_dc, x_c_re, x_c_iv, k_min, k_max,
                      alpha_min_deg, gamma_min_deg, mode, i_ref_re,
                      v_ref_iv, i_ref_iv (p.u.)
  units[]             bus, kind (renewable|hydro), rated_mw   (optional)

Also provides serialize_case(), the inverse of parse().
"""

import json
import math
import os

from core.errors import ParseError
from core.models import (
    AcBranch, BranchStatus, Bus, BusKind, ControlMode, DcLink, GenUnit, NetworkCase, to_per_unit,
)
from parsers.base import BaseCaseParser

_BUS_KEYS  = ('id', 'kind')
_LINK_KEYS = ('rect_pcc', 'inv_pcc', 'r_dc', 'x_c_re', 'x_c_iv', 'k_min', 'k_max',
              'alpha_min_deg', 'gamma_min_deg')


class JsonCaseParser(BaseCaseParser):

    def detect(self, source) -> bool:
        if isinstance(source, dict):
            return 'buses' in source
        return isinstance(source, str) and source.lower().endswith('.json') and os.path.isfile(source)

    def parse(self, source) -> NetworkCase:
        if isinstance(source, dict):
            return build_case(source)
        try:
            with open(source, encoding='utf-8') as fh:
                data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"{source}: invalid JSON at line {e.lineno}: {e.msg}") from e
        except OSError as e:
            raise ParseError(f"{source}: {e}") from e
        name = data.get('name') if isinstance(data, dict) else None
        case = build_case(data, default_name=name or os.path.splitext(os.path.basename(source))[0])
        self._log(f"{source}: {len(case.buses)} buses, {len(case.branches)} branches, "
                  f"{len(case.dc_links)} dc links")
        return case


# ═══════════════════════════════════════════════════════════
#  INTERNAL HELPERS
# ═══════════════════════════════════════════════════════════

def _num(entry: dict, key: str, where: str, default=None, required=False) -> float:
    if key not in entry or entry[key] is None:
        if required:
            raise ParseError(f"{where}: missing '{key}'")
        return default
    value = entry[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{where}: '{key}' must be a number, got {value!r}")
    if not math.isfinite(value):
        raise ParseError(f"{where}: '{key}' must be finite")
    return float(value)


def _list(data: dict, key: str, required=True) -> list:
    value = data.get(key)
    if value is None:
        if required:
            raise ParseError(f"missing '{key}' list")
        return []
    if not isinstance(value, list) or not all(isinstance(v, dict) for v in value):
        raise ParseError(f"'{key}' must be a list of objects")
    return value


def _enum(cls, value, where: str):
    try:
        return cls(value)
    except ValueError:
        allowed = ', '.join(m.value for m in cls)
        raise ParseError(f"{where}: {value!r} is not one of {allowed}") from None


def build_case(data: dict, default_name: str = '') -> NetworkCase:
    if not isinstance(data, dict):
        raise ParseError("case must be a JSON object")
    base = _num(data, 'base_mva', 'case', default=100.0)
    if not base > 0:
        raise ParseError(f"case: base_mva must be positive, got {base}")

    buses = []
    for n, e in enumerate(_list(data, 'buses')):
        where = f"buses[{n}]"
        for key in _BUS_KEYS:
            if key not in e:
                raise ParseError(f"{where}: missing '{key}'")
        if not isinstance(e['id'], int) or isinstance(e['id'], bool):
            raise ParseError(f"{where}: 'id' must be an integer")
        buses.append(Bus(
            id     = e['id'],
            kind   = _enum(BusKind, e['kind'], where),
            p_gen  = to_per_unit(_num(e, 'p_gen', where, 0.0), base),
            p_load = to_per_unit(_num(e, 'p_load', where, 0.0), base),
            q_gen  = to_per_unit(_num(e, 'q_gen', where, 0.0), base),
            q_load = to_per_unit(_num(e, 'q_load', where, 0.0), base),
            v_ref  = _num(e, 'v_ref', where),
        ))

    branches = []
    for n, e in enumerate(_list(data, 'branches')):
        where = f"branches[{n}]"
        f = e.get('from', e.get('from_bus'))
        t = e.get('to', e.get('to_bus'))
        if not isinstance(f, int) or not isinstance(t, int):
            raise ParseError(f"{where}: 'from' and 'to' must be bus ids")
        if 'r' in e or 'x' in e:
            r = _num(e, 'r', where, required=True)
            x = _num(e, 'x', where, required=True)
            if r == 0 and x == 0:
                raise ParseError(f"{where}: zero impedance")
            y = 1.0 / complex(r, x)
            g, b = y.real, y.imag
        else:
            g = _num(e, 'g', where, required=True)
            b = _num(e, 'b', where, required=True)
        branches.append(AcBranch(
            from_bus = f,
            to_bus   = t,
            g        = g,
            b        = b,
            status   = _enum(BranchStatus, e.get('status', 'closed'), where),
        ))

    links = []
    for n, e in enumerate(_list(data, 'dc_links', required=False)):
        where = f"dc_links[{n}]"
        for key in _LINK_KEYS:
            if key not in e:
                raise ParseError(f"{where}: missing '{key}'")
        if not isinstance(e['rect_pcc'], int) or not isinstance(e['inv_pcc'], int):
            raise ParseError(f"{where}: 'rect_pcc' and 'inv_pcc' must be bus ids")
        links.append(DcLink(
            rect_pcc  = e['rect_pcc'],
            inv_pcc   = e['inv_pcc'],
            r_dc      = _num(e, 'r_dc', where, required=True),
            x_c_re    = _num(e, 'x_c_re', where, required=True),
            x_c_iv    = _num(e, 'x_c_iv', where, required=True),
            k_min     = _num(e, 'k_min', where, required=True),
            k_max     = _num(e, 'k_max', where, required=True),
            alpha_min = math.radians(_num(e, 'alpha_min_deg', where, required=True)),
            gamma_min = math.radians(_num(e, 'gamma_min_deg', where, required=True)),
            mode      = _enum(ControlMode, e.get('mode', 'Mode1'), where),
            i_ref_re  = _num(e, 'i_ref_re', where),
            v_ref_iv  = _num(e, 'v_ref_iv', where),
            i_ref_iv  = _num(e, 'i_ref_iv', where),
        ))

    units = []
    for n, e in enumerate(_list(data, 'units', required=False)):
        where = f"units[{n}]"
        if not isinstance(e.get('bus'), int):
            raise ParseError(f"{where}: 'bus' must be a bus id")
        units.append(GenUnit(
            bus   = e['bus'],
            kind  = str(e.get('kind', '')),
            rated = to_per_unit(_num(e, 'rated_mw', where, required=True), base),
        ))

    buses.sort(key=lambda b: b.id)
    return NetworkCase(
        base_mva = base,
        buses    = tuple(buses),
        branches = tuple(branches),
        dc_links = tuple(links),
        units    = tuple(units),
        name     = str(data.get('name') or default_name),
    )


def serialize_case(case: NetworkCase) -> dict:
    """Inverse of build_case(): physical units for injections, g/b for branches."""
    base = case.base_mva
    return {
        'name':     case.name,
        'base_mva': base,
        'buses': [
            {
                'id':     b.id,
                'kind':   b.kind.value,
                'p_gen':  b.p_gen * base,
                'p_load': b.p_load * base,
                'q_gen':  b.q_gen * base,
                'q_load': b.q_load * base,
                **({'v_ref': b.v_ref} if b.v_ref is not None else {}),
            }
            for b in case.buses
        ],
        'branches': [
            {'from': br.from_bus, 'to': br.to_bus, 'g': br.g, 'b': br.b, 'status': br.status.value}
            for br in case.branches
        ],
        'dc_links': [
            {
                'rect_pcc':      ln.rect_pcc,
                'inv_pcc':       ln.inv_pcc,
                'r_dc':          ln.r_dc,
                'x_c_re':        ln.x_c_re,
                'x_c_iv':        ln.x_c_iv,
                'k_min':         ln.k_min,
                'k_max':         ln.k_max,
                'alpha_min_deg': math.degrees(ln.alpha_min),
                'gamma_min_deg': math.degrees(ln.gamma_min),
                'mode':          ln.mode.value,
                'i_ref_re':      ln.i_ref_re,
                'v_ref_iv':      ln.v_ref_iv,
                'i_ref_iv':      ln.i_ref_iv,
            }
            for ln in case.dc_links
        ],
        'units': [
            {'bus': u.bus, 'kind': u.kind, 'rated_mw': u.rated * base}
            for u in case.units
        ],
    }
