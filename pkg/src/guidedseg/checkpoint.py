"""Binary checkpoint container for named float32 tensors plus a config dict.

Layout, all little-endian:

    bytes 0..3   magic b"GNCK"
    byte  4      format version (1)
    bytes 5..8   u32 byte length of the manifest
    ...          UTF-8 JSON manifest
    ...          tensor payloads, row-major float32, in manifest order

The manifest is {"tensors": [{"name","shape","dtype":"f32"}...],
"config": {...}} with tensors listed in sorted-name order, so identical
parameters and config always serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .tensor import Tensor

MAGIC = b"GNCK"
VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, Tensor], config: dict) -> None:
    """Write tensors and config to `path`; overwrites an existing file."""
    names = sorted(params)
    entries = []
    for name in names:
        t = params[name]
        if t.data.dtype != np.float32:
            raise ContractError(f"tensor '{name}' is {t.data.dtype}, only float32 is stored")
        entries.append({"name": name, "shape": list(t.shape), "dtype": "f32"})
    manifest = json.dumps(
        {"tensors": entries, "config": config},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob.append(VERSION)
    blob += struct.pack("<I", len(manifest))
    blob += manifest
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        blob += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    """Read a checkpoint; returns (params, config). Loaded tensors require grad."""
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file (bad magic)")
    if raw[4] != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {raw[4]}")
    (mlen,) = struct.unpack_from("<I", raw, 5)
    mstart = 9
    mend = mstart + mlen
    if mend > len(raw):
        raise ContractError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[mstart:mend].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContractError(f"{path}: corrupt manifest: {e}") from e
    entries = manifest.get("tensors")
    config = manifest.get("config")
    if not isinstance(entries, list) or not isinstance(config, dict):
        raise ContractError(f"{path}: manifest missing tensors/config")

    params: dict[str, Tensor] = {}
    offset = mend
    for entry in entries:
        name, shape, dtype = entry["name"], tuple(entry["shape"]), entry["dtype"]
        if dtype != "f32":
            raise ContractError(f"{path}: tensor '{name}' has unsupported dtype {dtype}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise ContractError(f"{path}: truncated payload for tensor '{name}'")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise ContractError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return params, config
