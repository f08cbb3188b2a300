"""Flat binary parameter files with a textual header.

Layout::

    NUMKIT-CKPT 1
    meta <json object>
    tensor <name> <dtype> <dim0,dim1,...> <offset> <nbytes>
    ...
    end
    <little-endian payload; offsets count from the first byte after 'end\\n'>
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

MAGIC = "NUMKIT-CKPT 1"
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


def _code(arr: np.ndarray) -> str:
    for code, spec in _DTYPES.items():
        if arr.dtype == np.dtype(spec):
            return code
    raise TypeError(f"unsupported checkpoint dtype {arr.dtype}")


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    lines = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True, separators=(",", ":"))]
    payload = bytearray()
    for name in sorted(tensors):
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name may not contain whitespace: {name!r}")
        arr = np.asarray(tensors[name])
        if arr.dtype.kind == "f" and arr.dtype.itemsize not in (4, 8):
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr.astype(_DTYPES[_code(arr)]))
        shape = ",".join(str(s) for s in arr.shape) or "-"
        raw = arr.tobytes()
        lines.append(f"tensor {name} {_code(arr)} {shape} {len(payload)} {len(raw)}")
        payload.extend(raw)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + bytes(payload)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    marker = b"\nend\n"
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode()) or cut < 0:
        raise ValueError("not a numkit checkpoint")
    header = blob[:cut].decode("ascii").split("\n")
    data = blob[cut + len(marker):]
    meta: dict = {}
    tensors: dict[str, np.ndarray] = {}
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, code, shape, offset, nbytes = rest.split(" ")
            dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            start, size = int(offset), int(nbytes)
            arr = np.frombuffer(data[start:start + size], dtype=_DTYPES[code])
            tensors[name] = arr.reshape(dims).copy()
        else:
            raise ValueError(f"bad checkpoint header line: {line!r}")
    return tensors, meta


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, meta))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
