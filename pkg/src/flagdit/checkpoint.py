"""``FDT1`` checkpoint files.

Layout::

    b"FDT1" | u32 version | u64 header length | header (UTF-8 JSON) | payload

The header holds the model config, free-form metadata and a tensor
directory ``[{"name", "shape", "offset"}]`` with byte offsets into the
payload, which is the concatenation of little-endian float32 arrays in
directory order.  JSON is written with sorted keys, so saving the same
weights twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import FlagDiT, FlagDiTConfig

MAGIC = b"FDT1"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def to_bytes(model: FlagDiT, meta: dict | None = None) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": directory,
        "payload_bytes": offset,
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)


def save(model: FlagDiT, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, meta))


def from_bytes(raw: bytes, source: str = "<bytes>") -> tuple[FlagDiT, dict]:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{source}: file too short for an FDT1 header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CheckpointError(f"{source}: header length {hlen} runs past end of file")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header: {exc}") from None
    payload = memoryview(raw)[start + hlen :]
    config = FlagDiTConfig.from_dict(header["config"])
    state = {}
    spans = []
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        off = int(entry["offset"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + nbytes > len(payload):
            raise CheckpointError(f"{source}: tensor {entry['name']} lies outside the payload")
        spans.append((off, off + nbytes, entry["name"]))
        arr = np.frombuffer(payload[off : off + nbytes], dtype="<f4").reshape(shape)
        state[entry["name"]] = arr.astype(np.float32)
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"{source}: tensors {an} and {bn} overlap")
    model = FlagDiT(config)
    model.load_state_dict(state)
    return model, header.get("meta", {})


def load(path: str | Path) -> tuple[FlagDiT, dict]:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))
