"""Binary container shared by checkpoints and embedding tables.

Layout: 4-byte magic, u32 little-endian header length, UTF-8 JSON header,
then raw little-endian float32 tensor payloads in header index order.
The JSON is rendered canonically (sorted keys, no whitespace) so that
saving an unmodified object reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

CONTAINER_VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_tensor_container(path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors plus a JSON meta block.

    `tensors` order defines payload order; the header records name, shape and
    payload-relative offset for each entry.
    """
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    index = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = canonical_json({"version": CONTAINER_VERSION, "meta": meta, "tensors": index})
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def read_tensor_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated container", offset=len(blob))
    if blob[:4] != magic:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}", offset=0)
    (header_len,) = struct.unpack("<I", blob[4:8])
    header_end = 8 + header_len
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    try:
        header = json.loads(blob[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}", offset=8) from exc
    if header.get("version") != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}", offset=8)
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = header_end + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise FormatError(f"{path}: payload for {entry['name']!r} truncated", offset=len(blob))
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return header["meta"], tensors
