"""Named-tensor archive: one binary container for datasets and checkpoints.

Layout: an 8-byte magic string, a little-endian uint64 header length, a UTF-8
JSON header, then the raw payload. The header carries the manifest (name,
dtype, shape, byte offset into the payload) plus run metadata (config
snapshot, iteration counter, rng state). Payload buffers are contiguous
little-endian float32/int32, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MUNCKPT1"

_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


@dataclass
class Archive:
    tensors: dict[str, np.ndarray]
    kind: str = "tensors"
    config: dict | None = None
    meta: dict = field(default_factory=dict)
    iteration: int = 0
    rng_state: dict | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def _canonical(name: str, arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.float32:
        dtype = _DTYPES["float32"]
    elif arr.dtype == np.int32:
        dtype = _DTYPES["int32"]
    else:
        raise TypeError(
            f"archive entry '{name}' has dtype {arr.dtype}; only float32/int32 "
            "payloads are supported"
        )
    return np.ascontiguousarray(arr, dtype=dtype)


def save_archive(path: str | Path, archive: Archive, force: bool = False) -> None:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    manifest = []
    buffers = []
    offset = 0
    for name in archive.tensors:
        arr = _canonical(name, archive.tensors[name])
        manifest.append(
            {
                "name": name,
                "dtype": str(arr.dtype.name),
                "shape": list(arr.shape),
                "byte_offset": offset,
            }
        )
        buffers.append(arr.tobytes())
        offset += len(buffers[-1])
    header = {
        "kind": archive.kind,
        "config": archive.config,
        "meta": archive.meta,
        "iteration": archive.iteration,
        "rng_state": archive.rng_state,
        "manifest": manifest,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for buf in buffers:
            fh.write(buf)
    tmp.replace(path)


def load_archive(path: str | Path) -> Archive:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a named-tensor archive (bad magic)")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + header_len].decode("utf-8"))
    payload = raw[start + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        off = entry["byte_offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return Archive(
        tensors=tensors,
        kind=header["kind"],
        config=header.get("config"),
        meta=header.get("meta") or {},
        iteration=header.get("iteration", 0),
        rng_state=header.get("rng_state"),
    )
