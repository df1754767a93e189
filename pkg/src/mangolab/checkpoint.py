"""Byte-stable checkpoint files.

Layout: one line of canonical JSON (format tag, version, free-form metadata
and a table of named arrays) followed by the raw little-endian array bytes
in table order. Equal contents always produce equal bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ContractError

FORMAT = "mangolab-ckpt"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8"), "b1": np.dtype("|b1")}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _code(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype.kind in "iu":
        return "i8"
    if arr.dtype.kind == "b":
        return "b1"
    raise ContractError(f"unsupported dtype {arr.dtype}")


def to_bytes(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "arrays": table}
    return canonical_json(header).encode() + b"\n" + b"".join(chunks)


def from_bytes(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    head, sep, body = blob.partition(b"\n")
    if not sep:
        raise ContractError("truncated checkpoint")
    header = json.loads(head)
    if header.get("format") != FORMAT:
        raise ContractError(f"not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise ContractError(f"unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for entry in header["arrays"]:
        raw = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ContractError(f"array {entry['name']} truncated")
        dt = _DTYPES[entry["dtype"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    blob = to_bytes(arrays, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
