"""Persisted ensembles and CSV output.

Binary layout: the 8-byte magic ``SPDESMP\\0``, a little-endian ``uint32``
schema version, a ``uint32`` header length, a UTF-8 JSON header listing the
arrays (name, shape) and metadata, then each array as row-major little-endian
float64 in header order.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPDESMP\0"
SCHEMA_VERSION = 1


class ArtifactError(ValueError):
    """Missing, truncated or incompatible artifact file."""


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in arrays.items()}
    header = {
        "schema": SCHEMA_VERSION,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", SCHEMA_VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(v.tobytes(order="C"))


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"artifact {path} does not exist")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise ArtifactError(f"{path} is not an ensemble file (bad magic)")
    if len(data) < 16:
        raise ArtifactError(f"{path} is truncated")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != SCHEMA_VERSION:
        raise ArtifactError(f"{path} has schema version {version}, expected {SCHEMA_VERSION}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path} has a corrupt header: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("arrays"), list):
        raise ArtifactError(f"{path} has a corrupt header: no array table")
    offset = 16 + hlen
    out = {}
    for spec in header["arrays"]:
        try:
            shape = tuple(int(d) for d in spec["shape"])
        except (KeyError, TypeError, ValueError):
            raise ArtifactError(f"{path} has a corrupt header: bad array entry {spec!r}") from None
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise ArtifactError(f"{path} is truncated in array {spec['name']!r}")
        out[spec["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise ArtifactError(f"{path} has {len(data) - offset} trailing bytes")
    return out, header.get("meta", {})


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, header: list[str], rows) -> None:
    """Comma-separated, '.' decimal, one header row, LF line endings, shortest round-trip floats."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"artifact {path} does not exist")
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"artifact {path} does not exist")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path} is not valid JSON: {exc}") from None
