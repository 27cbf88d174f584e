"""
parsers/detector.py
──────────────────────────────────────────────────────────────────────────────
Case Detection: looks at the source and routes to the correct parser.

Detection priority order matters: a bare name is tried against the
bundled cases before anything else; JSON files and decoded dicts go to
the JSON parser. Every parsed case is validated before it is returned.
──────────────────────────────────────────────────────────────────────────────
"""

import json
import logging

from core.errors import NotFound
from core.models import NetworkCase, validate_case
from parsers.bundled import BundledCaseParser
from parsers.case_json import JsonCaseParser, serialize_case

logger = logging.getLogger(__name__)

# Ordered list, first match wins
_PARSERS = [
    BundledCaseParser(),
    JsonCaseParser(),
]


def detect(source):
    """
    Return the parser instance able to read `source`.
    Raises NotFound when no parser recognises it.
    """
    for parser in _PARSERS:
        try:
            if parser.detect(source):
                logger.debug(f"[detector] Matched: {parser.__class__.__name__}")
                return parser
        except OSError as ex:
            logger.debug(f"[detector] {parser.__class__.__name__}.detect() failed: {ex}")
            continue
    shown = source if isinstance(source, str) else type(source).__name__
    raise NotFound(f"no case found for {shown!r}")


def load_case(source) -> NetworkCase:
    """Path, bundled name or dict → validated per-unit NetworkCase."""
    case = detect(source).parse(source)
    validate_case(case)
    logger.info(f"[detector] loaded case {case.name!r}: {len(case.buses)} buses, "
                f"{len(case.closed_branches)} closed branches, {len(case.dc_links)} dc links")
    return case


def save_case(case: NetworkCase, path: str):
    with open(path, 'w', encoding='utf-8') as fh:
        json.dump(serialize_case(case), fh, indent=2)
