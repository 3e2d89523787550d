"""Versioned binary container for float64 arrays.

Layout (all integers little-endian):

    bytes 0..3    magic b"CMPC"
    bytes 4..5    uint16 format version
    bytes 6..9    uint32 header length H
    bytes 10..    H bytes of UTF-8 JSON: {"meta": {...}, "arrays": [...]}
    remainder     tightly packed little-endian float64 payload

Each entry of ``arrays`` records name, shape and byte offset into the
payload. Array order and canonical JSON make writes byte-deterministic, so
identical state always serializes to identical files.
"""
import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"CMPC"
FORMAT_VERSION = 1


def write_container(path, meta: dict, arrays: dict) -> None:
    """Write ``arrays`` (name -> float64 ndarray) with a JSON ``meta`` block."""
    entries = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps(
        {"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path):
    """Read a container, returning ``(meta, arrays)``.

    Raises LoadError on a bad magic, unsupported version, or truncation;
    nothing partial is ever returned.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise LoadError(f"{path} is not a CMPC container (bad magic)")
    version, header_len = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise LoadError(
            f"{path} has container version {version}, expected {FORMAT_VERSION}"
        )
    if len(raw) < 10 + header_len:
        raise LoadError(f"{path} is truncated (incomplete header)")
    try:
        header = json.loads(raw[10 : 10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path} has a corrupt header: {exc}") from exc
    payload = raw[10 + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise LoadError(f"{path} is truncated (array {entry['name']})")
        arrays[entry["name"]] = (
            np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
        )
    return header["meta"], arrays
