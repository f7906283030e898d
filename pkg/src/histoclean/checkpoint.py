"""Binary checkpoint container.

Layout::

    magic      8 bytes   b"HCLNCKPT"
    version    uint32 LE
    hdr_len    uint64 LE
    header     hdr_len bytes of UTF-8 JSON (config, specs, counters, tensor index)
    payload    concatenated little-endian float32 arrays
    digest     32 bytes  sha256 of everything above

The digest is verified before anything is parsed, so a truncated or edited
file is rejected without loading partial state.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HCLNCKPT"
FORMAT_VERSION = 1
LATEST = "latest"


class CheckpointError(RuntimeError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


@dataclass
class CheckpointData:
    meta: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def save(path: str | os.PathLike, data: CheckpointData) -> Path:
    path = Path(path)
    index = []
    chunks = []
    offset = 0
    for name, arr in data.arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": data.meta, "tensors": index}).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(digest)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def resolve(path: str | os.PathLike) -> Path:
    """Follow a ``latest`` marker (or a run directory) to the checkpoint it names."""
    path = Path(path)
    if path.is_dir():
        path = path / LATEST
    if path.name == LATEST and path.is_file():
        path = path.parent / path.read_text(encoding="utf-8").strip()
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def load(path: str | os.PathLike) -> CheckpointData:
    path = resolve(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise ChecksumError(f"{path}: not a checkpoint or truncated")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated file)")
    version, hdr_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hdr_len].decode())
    payload = memoryview(body)[start + hdr_len :]
    arrays = {}
    for t in header["tensors"]:
        buf = payload[t["offset"] : t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(buf, dtype="<f4").reshape(t["shape"]).astype(np.float32)
    return CheckpointData(header["meta"], arrays)


def write_latest(out_dir: str | os.PathLike, ckpt_name: str) -> None:
    marker = Path(out_dir) / LATEST
    tmp = marker.with_suffix(".tmp")
    tmp.write_text(ckpt_name + "\n", encoding="utf-8")
    os.replace(tmp, marker)


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
