"""Binary container for named float64 arrays (checkpoints, feature files).

Layout: magic ``MCCS1``, an 8-byte little-endian header length, a UTF-8
JSON header, then the raw row-major little-endian float64 payloads. The
header stores per-array name/shape/offset plus a free-form ``meta`` dict.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"MCCS1"


class ContainerError(IOError):
    """Malformed, truncated, or inconsistent container file."""


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` (insertion order preserved) and ``meta`` to ``path``."""
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        blob = arr.astype("<f8", copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"arrays": entries, "meta": meta or {}},
        ensure_ascii=False,
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back ``(arrays, meta)``; raises ContainerError naming any bad array."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8:
        raise ContainerError(f"{path}: truncated container (only {len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    header_len = int.from_bytes(data[len(MAGIC) : len(MAGIC) + 8], "little")
    header_end = len(MAGIC) + 8 + header_len
    if len(data) < header_end:
        raise ContainerError(f"{path}: truncated header ({header_len} bytes declared)")
    try:
        header = json.loads(data[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: unreadable header: {e}") from None
    payload = data[header_end:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 8
        if end > len(payload):
            raise ContainerError(
                f"{path}: array {name!r} with shape {shape} extends past end of file"
            )
        arrays[name] = (
            np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
        )
    return arrays, header.get("meta", {})
