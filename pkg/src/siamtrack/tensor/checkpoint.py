"""Checkpoint file format.

Layout::

    b"SIAMCKPT"                    8-byte magic
    uint32 LE                      format version
    uint32 LE                      header length in bytes
    header                         UTF-8 text: ``key=value`` metadata lines,
                                   a ``---`` separator, then the layer profile
    float32 LE blocks              per layer, in order: conv weight, bias;
                                   batchnorm gamma, beta, running_mean, running_var
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .network import Network, format_profile, parse_profile

MAGIC = b"SIAMCKPT"
VERSION = 1


def dumps(net: Network, metadata: dict | None = None) -> bytes:
    meta = "".join(f"{k}={v}\n" for k, v in (metadata or {}).items())
    header = (meta + "---\n" + format_profile(net.specs)).encode("utf-8")
    blocks = [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in net.state_arrays()]
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blocks)


def loads(blob: bytes) -> tuple[Network, dict]:
    if blob[:8] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = blob[16:16 + hlen].decode("utf-8")
    meta_text, sep, profile_text = header.partition("---\n")
    if not sep:
        raise DataError("checkpoint header lacks profile separator")
    metadata = dict(ln.split("=", 1) for ln in meta_text.splitlines() if ln)
    net = Network(parse_profile(profile_text), dtype=np.float32)
    pos = 16 + hlen
    for _, arr in net.state_arrays():
        nbytes = arr.size * 4
        if pos + nbytes > len(blob):
            raise DataError("checkpoint truncated")
        arr[...] = np.frombuffer(blob, dtype="<f4", count=arr.size, offset=pos).reshape(arr.shape)
        pos += nbytes
    if pos != len(blob):
        raise DataError(f"checkpoint has {len(blob) - pos} trailing bytes")
    return net, metadata


def save(path, net: Network, metadata: dict | None = None) -> None:
    Path(path).write_bytes(dumps(net, metadata))


def load(path) -> tuple[Network, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)
