"""CSIM model checkpoints.

Layout, all little-endian::

    b"CSIM" | u32 version | u32 json_len | json (ModelSpec + metadata, utf-8)
    | u64 n_params | n_params * f32

The spec travels inline, so loading never needs the original config.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ConfigError
from .data import FormatError
from .nn import ModelSpec, Network, build_network

CSIM_MAGIC = b"CSIM"
CSIM_VERSION = 1
_HEAD = struct.Struct("<4sII")
_COUNT = struct.Struct("<Q")


class VersionError(FormatError):
    pass


def encode_checkpoint(net: Network, meta: dict | None = None) -> bytes:
    doc = json.dumps({"spec": net.spec.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    flat = np.ascontiguousarray(net.flat_parameters(), dtype="<f4")
    return _HEAD.pack(CSIM_MAGIC, CSIM_VERSION, len(doc)) + doc + _COUNT.pack(flat.size) + flat.tobytes()


def save_checkpoint(path, net: Network, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(net, meta))


def decode_checkpoint(raw: bytes) -> tuple[Network, dict]:
    if len(raw) < _HEAD.size:
        raise FormatError(f"checkpoint is {len(raw)} bytes, shorter than its header", len(raw))
    magic, version, doc_len = _HEAD.unpack_from(raw, 0)
    if magic != CSIM_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CSIM_VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {CSIM_VERSION}", 4)
    pos = _HEAD.size
    if len(raw) < pos + doc_len + _COUNT.size:
        raise FormatError("truncated spec block", len(raw))
    try:
        doc = json.loads(raw[pos:pos + doc_len].decode())
        spec = ModelSpec.from_dict(doc["spec"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"unreadable spec block: {exc}", pos) from None
    pos += doc_len
    (count,) = _COUNT.unpack_from(raw, pos)
    pos += _COUNT.size
    net = build_network(spec)
    expected = net.flat_parameters().size
    if count != expected:
        raise FormatError(f"spec needs {expected} parameters, header says {count}", pos - _COUNT.size)
    if len(raw) != pos + 4 * count:
        raise FormatError(f"expected {pos + 4 * count} bytes, found {len(raw)}", min(len(raw), pos + 4 * count))
    flat = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
    if not np.all(np.isfinite(flat)):
        bad = int(np.flatnonzero(~np.isfinite(flat))[0])
        raise FormatError(f"parameter {bad} is not finite", pos + 4 * bad)
    net.load_flat(flat.astype(np.float32))
    return net, doc.get("meta", {})


def load_checkpoint(path) -> tuple[Network, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def require_role(net: Network, role: str, path) -> None:
    if net.spec.role != role:
        raise ConfigError(f"{path}: expected an {role} checkpoint, found {net.spec.role}")
