"""``.vaec`` model container.

Layout: ``b"VAEC"``, one version byte, a little-endian uint32 header length,
a UTF-8 JSON header, then raw little-endian payloads in header order (each
tensor followed by its bit-packed mask when it has one).
"""
from __future__ import annotations

import io
import json
import math
import os
import struct
from typing import Tuple, Union

import numpy as np

from ..tensor import QuantParams
from .params import ParamStore
from .spec import VaeSpec

MAGIC = b"VAEC"
VERSION = 1
_CODES = {"float32": "<f4", "float16": "<f2", "int8": "i1", "float64": "<f8"}


class ContainerError(ValueError):
    pass


def to_bytes(spec: VaeSpec, params: ParamStore) -> bytes:
    entries, chunks = [], []
    for name in sorted(params.tensors):
        arr = params.tensors[name]
        code = _CODES[arr.dtype.name]
        entry = {"name": name, "shape": list(arr.shape), "dtype": code,
                 "mask": name in params.masks}
        if name in params.qparams:
            entry["qparams"] = params.qparams[name].to_dict()
        entries.append(entry)
        chunks.append(np.ascontiguousarray(arr, dtype=code).tobytes())
        if entry["mask"]:
            chunks.append(np.packbits(params.masks[name].ravel()).tobytes())
    acts = {k: v.to_dict() for k, v in sorted(params.qparams.items()) if k.startswith("act:")}
    header = {
        "spec": spec.to_dict(),
        "dtype": params.dtype,
        "quant_mode": params.quant_mode,
        "tensors": entries,
        "act_qparams": acts,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([VERSION]))
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    for c in chunks:
        buf.write(c)
    return buf.getvalue()


def from_bytes(blob: bytes) -> Tuple[VaeSpec, ParamStore]:
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise ContainerError("not a .vaec container (bad magic)")
    if blob[4] != VERSION:
        raise ContainerError(f"unsupported container version {blob[4]} (expected {VERSION})")
    (hlen,) = struct.unpack("<I", blob[5:9])
    if 9 + hlen > len(blob):
        raise ContainerError("truncated header")
    try:
        header = json.loads(blob[9:9 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from exc
    spec = VaeSpec.from_dict(header["spec"])
    store = ParamStore(dtype=header["dtype"], quant_mode=header.get("quant_mode"))
    pos = 9 + hlen
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = math.prod(e["shape"])
        nbytes = count * dt.itemsize
        if pos + nbytes > len(blob):
            raise ContainerError(f"truncated payload in tensor {e['name']}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(e["shape"])
        store.tensors[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
        if e["mask"]:
            mbytes = (count + 7) // 8
            if pos + mbytes > len(blob):
                raise ContainerError(f"truncated mask for tensor {e['name']}")
            bits = np.unpackbits(np.frombuffer(blob, np.uint8, mbytes, pos), count=count)
            store.masks[e["name"]] = bits.astype(bool).reshape(e["shape"])
            pos += mbytes
        if "qparams" in e:
            store.qparams[e["name"]] = QuantParams.from_dict(e["qparams"])
    if pos != len(blob):
        raise ContainerError(f"{len(blob) - pos} trailing bytes after payload")
    for k, v in header.get("act_qparams", {}).items():
        store.qparams[k] = QuantParams.from_dict(v)
    return spec, store


def save_model(spec: VaeSpec, params: ParamStore, path: Union[str, os.PathLike]) -> int:
    """Write atomically; returns the number of bytes written."""
    blob = to_bytes(spec, params)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return len(blob)


def load_model(path: Union[str, os.PathLike]) -> Tuple[VaeSpec, ParamStore]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def model_size_bytes(spec: VaeSpec, params: ParamStore) -> int:
    return len(to_bytes(spec, params))
