"""Self-describing tensor container with a text header and raw data.

Layout::

    tensor-container 1
    meta <key> <value>
    tensor <name> <dtype> <dims or -> <nbytes>
    ...
    data
    <little-endian tensor bytes, concatenated in header order>

The header is ASCII; tensor data is always little-endian, so files are
readable without torch. Loading reproduces every tensor bit for bit. Writes
go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import tempfile
from typing import Mapping

import numpy as np
import torch

MAGIC = "tensor-container"
VERSION = 1

_DTYPES: dict[str, str] = {
    "float32": "<f4",
    "float64": "<f8",
    "float16": "<f2",
    "int64": "<i8",
    "int32": "<i4",
    "int16": "<i2",
    "int8": "|i1",
    "uint8": "|u1",
    "bool": "|b1",
}
_TORCH_NAMES = {getattr(torch, name): name for name in _DTYPES}


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | os.PathLike,
    tensors: Mapping[str, torch.Tensor],
    meta: Mapping[str, str] | None = None,
) -> None:
    header = [f"{MAGIC} {VERSION}"]
    for key, value in (meta or {}).items():
        _check_token(key)
        _check_token(str(value))
        header.append(f"meta {key} {value}")
    blobs = []
    for name, tensor in tensors.items():
        _check_token(name)
        dtype_name = _TORCH_NAMES.get(tensor.dtype)
        if dtype_name is None:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for tensor {name!r}")
        array = np.ascontiguousarray(tensor.detach().cpu().numpy()).astype(
            _DTYPES[dtype_name], copy=False
        )
        blob = array.tobytes()
        dims = ",".join(str(d) for d in tensor.shape) or "-"
        header.append(f"tensor {name} {dtype_name} {dims} {len(blob)}")
        blobs.append(blob)
    header.append("data")
    payload = "\n".join(header).encode("ascii") + b"\n" + b"".join(blobs)

    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    with open(path, "rb") as handle:
        raw = handle.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError("truncated container")
    first = raw[:newline].decode("ascii", errors="replace").split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor container")
    if int(first[1]) != VERSION:
        raise CheckpointError(f"unsupported container version {first[1]}")

    meta: dict[str, str] = {}
    entries: list[tuple[str, str, tuple[int, ...], int]] = []
    offset = newline + 1
    while True:
        newline = raw.find(b"\n", offset)
        if newline < 0:
            raise CheckpointError("header ended before 'data' line")
        line = raw[offset:newline].decode("ascii")
        offset = newline + 1
        if line == "data":
            break
        fields = line.split()
        if fields[0] == "meta" and len(fields) == 3:
            meta[fields[1]] = fields[2]
        elif fields[0] == "tensor" and len(fields) == 5:
            name, dtype_name, dims, nbytes = fields[1], fields[2], fields[3], int(fields[4])
            if dtype_name not in _DTYPES:
                raise CheckpointError(f"unknown dtype {dtype_name!r}")
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            entries.append((name, dtype_name, shape, nbytes))
        else:
            raise CheckpointError(f"malformed header line: {line!r}")

    tensors: dict[str, torch.Tensor] = {}
    for name, dtype_name, shape, nbytes in entries:
        blob = raw[offset : offset + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(f"tensor {name!r}: data truncated")
        offset += nbytes
        array = np.frombuffer(blob, dtype=_DTYPES[dtype_name]).reshape(shape)
        tensors[name] = torch.from_numpy(array.copy())
    if offset != len(raw):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors, meta


def _check_token(token: str) -> None:
    if not token or any(ch.isspace() for ch in token):
        raise CheckpointError(f"token {token!r} is empty or contains whitespace")
