"""CSV streaming and binary checkpoints.

Checkpoint layout (all little-endian)::

    b"MEMB" | version u32 | lmax u32 | nlat u32 | nlon u32 | t f64
    | w (nlat*nlon*3 f64, node-major) | wdot (same) | blake2b-64 digest

The digest covers every preceding byte.  Files are written to a temporary
name and renamed, so a reader never sees a partial checkpoint.
"""

import csv
import hashlib
import os
import struct
import tempfile

import numpy as np

from . import harmonics as sh
from .errors import CheckpointCorruptError, CheckpointError, CheckpointVersionError

MAGIC = b"MEMB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIId")
_DIGEST = 8

__all__ = [
    "fmt",
    "CsvStream",
    "write_csv",
    "read_csv",
    "write_checkpoint",
    "read_checkpoint",
    "checkpoint_roundtrip",
    "file_digest",
    "atomic_write_bytes",
    "MAGIC",
    "VERSION",
]


def fmt(v):
    """17 significant digits for floats (bit-faithful); plain str otherwise."""
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    if v is None:
        return ""
    return str(v)


class CsvStream:
    """Append rows to a CSV file, flushing each one.

    A process killed mid-run leaves every completed row on disk.
    """

    def __init__(self, path, columns, append=False):
        self.path = path
        self.columns = list(columns)
        exists = append and os.path.exists(path) and os.path.getsize(path) > 0
        self._fh = open(path, "a" if exists else "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if not exists:
            self._w.writerow(self.columns)
            self._fh.flush()

    def write(self, row):
        if len(row) != len(self.columns):
            raise ValueError(f"row has {len(row)} fields, expected {len(self.columns)}")
        self._w.writerow([fmt(v) for v in row])
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, columns, rows):
    with CsvStream(path, columns) as out:
        for r in rows:
            out.write(r)


def read_csv(path):
    """Return (columns, rows) with numeric fields parsed as floats."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        columns = next(reader)
        rows = []
        for raw in reader:
            row = []
            for v in raw:
                try:
                    row.append(float(v))
                except ValueError:
                    row.append(v)
            rows.append(row)
    return columns, rows


def atomic_write_bytes(path, data):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _digest(data):
    return hashlib.blake2b(data, digest_size=_DIGEST).digest()


def _node_major(v):
    return np.ascontiguousarray(np.moveaxis(np.asarray(v, "<f8"), 0, -1)).tobytes()


def encode_state(state, version=VERSION):
    g = state.grid
    head = _HEADER.pack(MAGIC, version, state.lmax, g.nlat, g.nlon, float(state.t))
    body = head + _node_major(state.w) + _node_major(state.wdot)
    return body + _digest(body)


def decode_state(data):
    from .dynamics import State

    if len(data) < _HEADER.size + _DIGEST:
        raise CheckpointCorruptError(f"corrupt checkpoint: truncated ({len(data)} bytes)")
    magic, version, lmax, nlat, nlon, t = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"corrupt checkpoint: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(found=version, expected=VERSION)
    n = nlat * nlon * 3
    expected = _HEADER.size + 2 * 8 * n + _DIGEST
    if len(data) != expected:
        raise CheckpointCorruptError(f"corrupt checkpoint: {len(data)} bytes, expected {expected}")
    body, dig = data[:-_DIGEST], data[-_DIGEST:]
    if _digest(body) != dig:
        raise CheckpointCorruptError("corrupt checkpoint: digest mismatch")
    arr = np.frombuffer(body, "<f8", offset=_HEADER.size).reshape(2, nlat, nlon, 3)
    grid = sh.SphGrid(nlat, nlon)
    # C order as in a live run; layout changes FFT round-off and breaks bit-exact resume
    w = np.ascontiguousarray(np.moveaxis(arr[0], -1, 0), dtype=float)
    wdot = np.ascontiguousarray(np.moveaxis(arr[1], -1, 0), dtype=float)
    return State(w, wdot, t, grid, lmax)


def write_checkpoint(path, state):
    atomic_write_bytes(path, encode_state(state))


def read_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    return decode_state(data)


def checkpoint_roundtrip(state, path):
    write_checkpoint(path, state)
    return read_checkpoint(path)


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
