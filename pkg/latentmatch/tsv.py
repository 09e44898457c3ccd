"""
Tab-separated text helpers shared by every file format

Files written by latentmatch start with a ``# config_hash=...`` provenance
line. Readers skip that first line and blank lines; every other line is
data, including lines that happen to start with ``#``.
"""

import os
from typing import Iterable, Iterator, Optional, Sequence, Tuple

from .exceptions import DataError

HASH_PREFIX = "config_hash="


def iter_tsv(path: str) -> Iterator[Tuple[int, list]]:
    """Yield (1-based line number, fields) for every data line"""
    if not os.path.exists(path):
        raise DataError("file not found", path=path)
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip('\r\n')
            if not line.strip():
                continue
            if lineno == 1 and line.startswith(f"# {HASH_PREFIX}"):
                continue
            yield lineno, line.split('\t')


def write_tsv(path: str, rows: Iterable[Sequence], header: Optional[str] = None) -> int:
    """Write rows as TSV, returns the row count"""
    directory = os.path.dirname(path)
    if directory and not os.path.exists(directory):
        os.makedirs(directory)
    count = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        if header:
            f.write(f"# {header}\n")
        for row in rows:
            f.write('\t'.join(str(field) for field in row))
            f.write('\n')
            count += 1
    return count


def parse_int(value: str, path: str, lineno: int, what: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise DataError(f"{what} must be an integer, got {value!r}", path=path, line=lineno)


def parse_float(value: str, path: str, lineno: int, what: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"{what} must be a number, got {value!r}", path=path, line=lineno)
