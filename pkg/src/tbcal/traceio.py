"""Trace files.

Binary layout (all little-endian)::

    b"TBCAL" | u16 version | f64 dt | u64 n_samples | f64 t0 |
    u16 len + utf-8 detector id | u16 len + utf-8 units tag |
    u32 len + utf-8 JSON metadata | f64[n_samples] samples

CSV traces have a ``time,value`` header, optionally preceded by
``# key=value`` comment lines (``dt``, ``t0``, ``detector``, ``units`` and
``meta`` as JSON). Without a ``dt`` comment the step is taken from the time
column, which must be uniform.
"""

import json
import os
import struct

import numpy as np

from .errors import DataError
from .frontend import CurrentTrace

MAGIC = b"TBCAL"
VERSION = 1
UNITS = "charge-units/s"
_FIXED = struct.Struct("<5sHdQd")


def _meta_json(meta):
    return json.dumps(meta or {}, sort_keys=True, default=str).encode()


def _header(dt, n, t0, detector, units, meta):
    det = (detector or "").encode()
    unit = units.encode()
    blob = _meta_json(meta)
    return b"".join([
        _FIXED.pack(MAGIC, VERSION, float(dt), int(n), float(t0)),
        struct.pack("<H", len(det)), det,
        struct.pack("<H", len(unit)), unit,
        struct.pack("<I", len(blob)), blob,
    ])


class TraceWriter:
    """Stream samples into a binary trace file of known length."""

    def __init__(self, path, dt, n_samples, t0=0.0, detector="", units=UNITS, meta=None):
        self.path = path
        self.n = int(n_samples)
        self.written = 0
        self._fh = open(path, "wb")
        self._fh.write(_header(dt, n_samples, t0, detector, units, meta))

    def write(self, samples):
        samples = np.asarray(samples, dtype="<f8")
        if self.written + samples.size > self.n:
            raise DataError(f"{self.path}: more samples than declared")
        self._fh.write(samples.tobytes())
        self.written += samples.size

    def close(self):
        self._fh.close()
        if self.written != self.n:
            raise DataError(f"{self.path}: wrote {self.written} of {self.n} declared samples")

    def abort(self):
        """Close and delete a partially written file."""
        self._fh.close()
        os.remove(self.path)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *_):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def write_trace(path, trace, units=UNITS):
    with TraceWriter(path, trace.dt, trace.samples.size, trace.t0,
                     trace.meta.get("detector", ""), units, trace.meta) as w:
        w.write(trace.samples)


def read_trace(path, mmap=True):
    """Read a binary trace; samples are memory-mapped unless ``mmap=False``."""
    with open(path, "rb") as fh:
        head = fh.read(_FIXED.size)
        if len(head) < _FIXED.size or head[:5] != MAGIC:
            raise DataError(f"{path}: not a trace file (bad magic)")
        magic, version, dt, n, t0 = _FIXED.unpack(head)
        if version != VERSION:
            raise DataError(f"{path}: unsupported trace version {version} (expected {VERSION})")
        try:
            (ld,) = struct.unpack("<H", fh.read(2))
            detector = fh.read(ld).decode()
            (lu,) = struct.unpack("<H", fh.read(2))
            units = fh.read(lu).decode()
            (lm,) = struct.unpack("<I", fh.read(4))
            meta = json.loads(fh.read(lm).decode() or "{}")
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: corrupt header ({exc})") from None
        offset = fh.tell()
        fh.seek(0, 2)
        size = fh.tell()
    if size - offset != 8 * n:
        raise DataError(f"{path}: header declares {n} samples but file holds {(size - offset) / 8:g}")
    if not dt > 0:
        raise DataError(f"{path}: dt must be > 0")
    if n == 0:
        samples = np.empty(0)
    elif mmap:
        samples = np.memmap(path, dtype="<f8", mode="r", offset=offset, shape=(n,))
    else:
        samples = np.fromfile(path, dtype="<f8", offset=offset, count=n)
    meta = dict(meta)
    meta.setdefault("detector", detector)
    meta["units"] = units
    return CurrentTrace(dt=dt, samples=samples, t0=t0, meta=meta)


def write_trace_csv(path, trace):
    with open(path, "w") as fh:
        fh.write(f"# dt={trace.dt!r}\n# t0={trace.t0!r}\n")
        fh.write(f"# detector={trace.meta.get('detector', '')}\n# units={UNITS}\n")
        fh.write(f"# meta={_meta_json(trace.meta).decode()}\n")
        fh.write("time,value\n")
        np.savetxt(fh, np.column_stack([trace.times, trace.samples]), delimiter=",", fmt="%.17g")


def read_trace_csv(path):
    info = {}
    with open(path) as fh:
        lines = 0
        for line in fh:
            lines += 1
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                info[key.strip()] = value.strip()
                continue
            if line.strip().replace(" ", "") != "time,value":
                raise DataError(f"{path}:{lines}: expected header 'time,value'")
            break
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
    if data.size == 0 or data.shape[1] != 2:
        raise DataError(f"{path}: expected two columns of data")
    t, x = data[:, 0], data[:, 1]
    if "dt" in info:
        dt = float(info["dt"])
    elif t.size > 1:
        steps = np.diff(t)
        dt = float((t[-1] - t[0]) / (t.size - 1))
        if np.abs(steps - dt).max() > 1e-6 * dt:
            raise DataError(f"{path}: time column is not uniformly spaced")
    else:
        raise DataError(f"{path}: cannot infer dt from a single sample")
    if not dt > 0:
        raise DataError(f"{path}: dt must be > 0")
    meta = json.loads(info["meta"]) if "meta" in info else {}
    meta.setdefault("detector", info.get("detector", ""))
    meta["units"] = info.get("units", UNITS)
    t0 = float(info.get("t0", t[0]))
    return CurrentTrace(dt=dt, samples=x.copy(), t0=t0, meta=meta)


def load_trace(path):
    """Binary or CSV trace, chosen by the file's first bytes."""
    with open(path, "rb") as fh:
        start = fh.read(5)
    if start == MAGIC:
        return read_trace(path)
    return read_trace_csv(path)
