"""
parsers/bundled.py
──────────────────
Resolves bare case names ("ieee30_mod", "fig1_5bus") against the
bundled case directory and hands the file to the JSON parser.
"""

import os

from core.config import C
from parsers.base import BaseCaseParser
from parsers.case_json import JsonCaseParser


class BundledCaseParser(BaseCaseParser):

    def __init__(self, case_dir: str = None):
        self.case_dir = case_dir or C.CASE_DIR
        self._json    = JsonCaseParser()

    def _path(self, name: str) -> str:
        return os.path.join(self.case_dir, f"{name}.json")

    def detect(self, source) -> bool:
        if not isinstance(source, str) or os.sep in source or source.endswith('.json'):
            return False
        return os.path.isfile(self._path(source))

    def parse(self, source):
        self._log(f"bundled case '{source}'")
        return self._json.parse(self._path(source))

    def available(self) -> list:
        if not os.path.isdir(self.case_dir):
            return []
        return sorted(f[:-5] for f in os.listdir(self.case_dir) if f.endswith('.json'))
