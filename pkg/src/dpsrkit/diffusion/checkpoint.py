"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DPSR" | u32 format version | u32 meta length | meta JSON (utf-8)
    | payload sections, back to back | u32 CRC32 of every preceding byte

The meta JSON lists each payload section as ``[name, kind, length]`` where kind
is ``"f8"`` (little-endian float64 array, length in elements) or ``"bytes"``
(opaque blob such as an embedded part checkpoint, length in bytes).
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .network import NoiseNet
from .schedule import Schedule

MAGIC = b"DPSR"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def pack(meta: dict, sections: list[tuple[str, object]]) -> bytes:
    index, blobs = [], []
    for name, value in sections:
        if isinstance(value, (bytes, bytearray)):
            index.append([name, "bytes", len(value)])
            blobs.append(bytes(value))
        else:
            arr = np.ascontiguousarray(value, dtype="<f8").reshape(-1)
            index.append([name, "f8", int(arr.size)])
            blobs.append(arr.tobytes())
    meta = dict(meta, sections=index)
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(mb)) + mb + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unpack(data: bytes) -> tuple[dict, dict]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("bad magic: not a DPSR checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupted")
    version, mlen = struct.unpack("<II", body[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    meta = json.loads(body[12 : 12 + mlen].decode())
    off = 12 + mlen
    sections = {}
    for name, kind, length in meta["sections"]:
        nbytes = length * 8 if kind == "f8" else length
        chunk = body[off : off + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"section {name!r} is truncated")
        sections[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64) if kind == "f8" else bytes(chunk)
        off += nbytes
    if off != len(body):
        raise CheckpointError("trailing bytes after last section")
    return meta, sections


def net_to_bytes(net: NoiseNet) -> bytes:
    meta = {
        "kind": "noisenet",
        "dim": net.dim,
        "hidden": net.hidden,
        "blocks": net.blocks,
        "temb_dim": net.temb_dim,
        "xi_min": net.schedule.xi_min,
        "xi_max": net.schedule.xi_max,
    }
    return pack(meta, [("mean", net.mean), ("std", net.std), ("params", net.params)])


def net_from_bytes(data: bytes) -> NoiseNet:
    meta, sec = unpack(data)
    if meta.get("kind") != "noisenet":
        raise CheckpointError(f"expected a noisenet checkpoint, got {meta.get('kind')!r}")
    return NoiseNet(
        dim=meta["dim"],
        hidden=meta["hidden"],
        blocks=meta["blocks"],
        temb_dim=meta["temb_dim"],
        schedule=Schedule(meta["xi_min"], meta["xi_max"]),
        params=sec["params"],
        mean=sec["mean"],
        std=sec["std"],
    )


def save_net(net: NoiseNet, path) -> None:
    Path(path).write_bytes(net_to_bytes(net))


def load_net(path) -> NoiseNet:
    return net_from_bytes(Path(path).read_bytes())


def checkpoint_kind(data: bytes) -> str:
    return unpack(data)[0].get("kind", "")
