"""Binary checkpoint framing: magic, JSON header, then little-endian float32 tensors.

Layout::

    b"T2UECKPT" | uint32 LE header length | UTF-8 JSON header | float32 blocks

The header lists every state-dict entry (name, shape) in declaration order;
the blocks follow in that order. Integer buffers are stored as float32 too
(BatchNorm step counters stay far below 2**24).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"T2UECKPT"
FORMAT_VERSION = 1


def encode(state: dict[str, torch.Tensor], header: dict) -> bytes:
    tensors = []
    for name, t in state.items():
        tensors.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")})
    head = dict(header, format_version=FORMAT_VERSION, tensors=tensors)
    head_bytes = json.dumps(head, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(head_bytes)), head_bytes]
    for t in state.values():
        parts.append(t.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError("not a t2ue checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(blob[start:start + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    offset = start + n
    state = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(spec["shape"])
        offset += 4 * count
        state[spec["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, spec["dtype"]))
    if offset != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return header, state


def save(path: str | Path, state: dict[str, torch.Tensor], header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(state, header))
    return path


def load(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    return decode(Path(path).read_bytes())


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
