"""Versioned ``.bvdl`` checkpoint container.

Layout (little-endian)::

    b"BVDL" | u32 version | u64 header_len | header JSON | tensor blob | u32 crc32

The header lists every tensor's name, dtype, shape and byte offset into the
blob; the CRC covers everything before it.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

MAGIC = b"BVDL"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, meta)``; raises :class:`CheckpointError` on any defect."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size + 4:
        raise CheckpointError(f"{path}: truncated ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a .bvdl checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    hstart = _PREFIX.size
    if hstart + hlen > len(body):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(body[hstart:hstart + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    blob = body[hstart + hlen:]
    tensors = {}
    for e in header["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated data for tensor {e['name']!r}")
        arr = np.frombuffer(blob, dtype=np.dtype("<" + e["dtype"]), count=int(np.prod(e["shape"])),
                            offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupt)")
    return tensors, header["meta"]


def load_into(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "model/"):
    """Copy named tensors into ``module``, validating names and shapes first."""
    state = module.state_dict()
    found = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(state) - set(found))
    unexpected = sorted(set(found) - set(state))
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, ref in state.items():
        if tuple(found[name].shape) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for tensor {prefix}{name}: checkpoint {tuple(found[name].shape)}, "
                f"model {tuple(ref.shape)}"
            )
    module.load_state_dict({k: v.to(state[k].dtype) for k, v in found.items()})
