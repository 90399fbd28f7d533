"""Checkpoint file format.

    DGIRL-CKPT <version>\\n
    <one-line JSON header: rng_seed, meta, entries [{name, shape}]>\\n
    <float64 little-endian values of each entry, in header order>

Writing then reading reproduces every value bit for bit, and identical
stores always serialise to identical bytes.
"""

import json
import os

import numpy as np

from ..errors import ContractViolation
from .params import Param, ParamStore

MAGIC = b"DGIRL-CKPT"
FORMAT_VERSION = 1


def checkpoint_bytes(store, meta=None):
    entries = [{"name": n, "shape": list(p.value.shape)} for n, p in store.items()]
    header = {"rng_seed": store.rng_seed, "meta": meta or {}, "entries": entries}
    chunks = [MAGIC + b" " + str(FORMAT_VERSION).encode() + b"\n",
              json.dumps(header, sort_keys=True).encode() + b"\n"]
    for _, p in store.items():
        chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return b"".join(chunks)


def write_checkpoint(path, store, meta=None):
    data = checkpoint_bytes(store, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return data


def read_checkpoint(path):
    """Returns ``(ParamStore, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    first, _, rest = data.partition(b"\n")
    magic, _, version = first.partition(b" ")
    if magic != MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint file")
    if int(version) != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported checkpoint version {version!r}")
    header_line, _, payload = rest.partition(b"\n")
    header = json.loads(header_line)
    store = ParamStore(header["rng_seed"])
    offset = 0
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if offset + nbytes > len(payload):
            raise ContractViolation(f"{path}: truncated payload at {entry['name']!r}")
        values = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(shape)
        store._entries[entry["name"]] = Param(values.astype(np.float64), entry["name"])
        offset += nbytes
    if offset != len(payload):
        raise ContractViolation(f"{path}: trailing bytes after last entry")
    return store, header["meta"]
