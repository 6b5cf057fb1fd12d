"""File formats.

Binary fields (``.saif``)::

    b"SAIF" | u32 version | u64 header length | JSON header | f64 payload

all little-endian. The header lists the arrays (name, shape, offset in
float64 units) plus free-form metadata. CSV numbers are written with 17
significant digits so that byte-level determinism checks are meaningful.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

MAGIC = b"SAIF"
VERSION = 1


def fmt(x) -> str:
    """17-significant-digit rendering (round-trips every float64)."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_field(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes())
    header = json.dumps({"arrays": entries, **(meta or {})}, sort_keys=True,
                        default=_json_default).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    return path


def read_field(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValidationError(f"{path}: not a SAIF file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported SAIF version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen])
    payload = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    arrays = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + size].reshape(e["shape"]).copy()
    return header, arrays


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty CSV")
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)


TRACE_HEADER = ["t", "node", "u", "ut", "utt", "uttt", "bilap_utt"]
SWEEP_HEADER = ["alpha", "residual", "rel_error"]


def write_traces(path, traces) -> Path:
    """TraceSeries as long-format CSV, one row per (time, interior beam node)."""
    nt, nb = traces.u.shape
    rows = ((traces.times[k], j, traces.u[k, j], traces.ut[k, j], traces.utt[k, j],
             traces.uttt[k, j], traces.bilap_utt[k, j]) for k in range(nt) for j in range(nb))
    return write_csv(path, TRACE_HEADER, rows)


def read_traces(path, hs: float):
    from .forward import TraceSeries
    header, data = read_csv(path)
    if header != TRACE_HEADER:
        raise ValidationError(f"{path}: expected header {','.join(TRACE_HEADER)}")
    times = np.unique(data[:, 0])
    nb = int(data[:, 1].max()) + 1
    if len(data) != len(times) * nb:
        raise ValidationError(f"{path}: incomplete trace table")
    cols = [data[:, k].reshape(len(times), nb) for k in range(2, 7)]
    return TraceSeries(times, *cols, hs=hs, provenance="loaded")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
