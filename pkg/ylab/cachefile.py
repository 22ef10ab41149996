"""
Binary log-probability cache files.

Layout, all little-endian:

```
magic    4 bytes   b"YLLC"
version  u32       1
count    u64       number of records
records  count x   (pair_id u64, branch u8, logp f64)
```
"""

import struct
from pathlib import Path

import numpy as np

from ylab.exceptions import InvalidArgumentError
from ylab.preference import Branch, LogProbCache

MAGIC = b"YLLC"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
RECORD_DTYPE = np.dtype([("pair_id", "<u8"), ("branch", "u1"), ("logp", "<f8")])


def encode_cache(cache: LogProbCache) -> bytes:
    keys = sorted(cache.entries, key=lambda key: (key[0], key[1].value))
    records = np.zeros(len(keys), dtype=RECORD_DTYPE)
    for row, (pair_id, branch) in enumerate(keys):
        records[row] = (pair_id, branch.value, cache.entries[(pair_id, branch)])
    return HEADER.pack(MAGIC, VERSION, len(keys)) + records.tobytes()


def decode_cache(data: bytes, snapshot_id: str = "snapshot-0") -> LogProbCache:
    if len(data) < HEADER.size:
        raise InvalidArgumentError("Cache file is shorter than its header")
    magic, version, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise InvalidArgumentError(f"Bad cache magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise InvalidArgumentError(f"Unsupported cache version {version}")
    body = data[HEADER.size :]
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise InvalidArgumentError(
            f"Cache header declares {count} records, body holds {len(body)} bytes"
        )
    records = np.frombuffer(body, dtype=RECORD_DTYPE) if count else []
    entries = {}
    for pair_id, code, logp in records:
        try:
            branch = Branch(int(code))
        except ValueError:
            raise InvalidArgumentError(f"Unknown branch code {code} for pair {pair_id}")
        entries[(int(pair_id), branch)] = float(logp)
    return LogProbCache(snapshot_id=snapshot_id, entries=entries)


def write_cache(cache: LogProbCache, path: Path | str) -> Path:
    path = Path(path)
    path.write_bytes(encode_cache(cache))
    return path


def read_cache(path: Path | str, snapshot_id: str | None = None) -> LogProbCache:
    path = Path(path)
    return decode_cache(path.read_bytes(), snapshot_id or path.stem)
