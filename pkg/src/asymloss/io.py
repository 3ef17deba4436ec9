"""Binary container shared by datasets and trained models.

Layout (all integers little-endian)::

    8 bytes   magic  b"ASYMLOSS"
    4 bytes   uint32 length of the JSON header in bytes
    n bytes   UTF-8 JSON header, keys sorted, no whitespace
    ...       raw array payloads, in the order of header["arrays"]

``header["arrays"]`` lists ``{"name", "descr", "shape"}`` for each payload;
``descr`` is numpy's dtype description, so structured per-record dtypes
round-trip. Nothing time- or host-dependent is written, so identical
inputs give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib import format as npformat

from .errors import ContractError

MAGIC = b"ASYMLOSS"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    specs, blobs = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        specs.append({"name": name, "descr": npformat.dtype_to_descr(arr.dtype), "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    header["arrays"] = specs
    head = canonical_json(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def _descr(d):
    # json turns the (name, type[, shape]) tuples of structured descrs into lists
    if not isinstance(d, list):
        return d
    out = []
    for name, typ, *shape in d:
        field = (name, _descr(typ))
        out.append(field + (tuple(shape[0]),) if shape else field)
    return out


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContractError(f"{path}: not an asymloss container")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format version {header.get('format_version')}")
    offset = 12 + n
    arrays = {}
    for spec in header["arrays"]:
        dt = npformat.descr_to_dtype(_descr(spec["descr"]))
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                                             offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContractError(f"{path}: trailing bytes after payload")
    return header, arrays


def load_schema(name: str) -> dict:
    """JSON schema shipped with the package: ``shift``, ``histograms`` or ``manifest``."""
    from importlib.resources import files

    return json.loads(files("asymloss").joinpath(f"schemas/{name}.schema.json").read_text())
