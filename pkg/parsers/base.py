"""
parsers/base.py
───────────────
Abstract base class for all case parsers.

To add a new case format:
1. Create parsers/newformat.py
2. class NewFormatParser(BaseCaseParser)
3. Implement detect() and parse()
4. Register in parsers/detector.py
"""

import logging


class BaseCaseParser:
    """
    Every case parser must inherit from this and implement both methods.
    `source` is a filesystem path, a bundled case name, or an already
    decoded dict (HTTP payloads).
    """

    def detect(self, source) -> bool:
        """
        Return True if this parser can handle the given source.
        Should be fast, no full parse.
        """
        raise NotImplementedError(
            f"{self.__class__.__name__} must implement detect()"
        )

    def parse(self, source):
        """
        Parse the source and return a NetworkCase in per-unit.
        Validation is the detector's job, not the parser's.
        """
        raise NotImplementedError(
            f"{self.__class__.__name__} must implement parse()"
        )

    def _log(self, msg: str):
        fmt = self.__class__.__name__.replace('Parser', '').lower()
        logging.getLogger(f"acdcflow.parsers.{fmt}").debug(f"[{fmt}] {msg}")
