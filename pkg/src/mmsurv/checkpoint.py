"""Deterministic single-file checkpoint format.

Layout: 8-byte magic, uint32 header length, UTF-8 JSON header, raw
little-endian C-order array payload. The header carries a format version,
metadata (seed, config hash, specs), per-array offsets, the frozen-key
list, and a payload SHA-256 so truncation and corruption are detected on
load. Writing the same model twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MMSURVCK"
FORMAT_VERSION = 1


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]
    frozen: dict[str, bool] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params.arrays)
    payload = bytearray()
    index = []
    for name in names:
        arr = np.ascontiguousarray(params.arrays[name])
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        index.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": params.meta,
        "frozen": sorted(k for k, v in params.frozen.items() if v),
        "arrays": index,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array(len(hdr), dtype="<u4").tobytes())
        f.write(hdr)
        f.write(bytes(payload))


def load_checkpoint(path: str | Path) -> ModelParams:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    hdr_len = int(np.frombuffer(blob, dtype="<u4", count=1, offset=len(MAGIC))[0])
    start = len(MAGIC) + 4
    if len(blob) < start + hdr_len:
        raise ValueError("truncated checkpoint header")
    header = json.loads(blob[start : start + hdr_len].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    payload = blob[start + hdr_len :]
    expected = sum(a["nbytes"] for a in header["arrays"])
    if len(payload) != expected:
        raise ValueError("truncated or padded checkpoint payload")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ValueError("checkpoint payload checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    frozen = {name: True for name in header.get("frozen", [])}
    return ModelParams(arrays=arrays, frozen=frozen, meta=header.get("meta", {}))


def arrays_from_module(module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_into_module(module, arrays: dict[str, np.ndarray]) -> None:
    """Strict shape-checked load; names the offending key on mismatch."""
    import torch

    state = module.state_dict()
    for key in state:
        if key not in arrays:
            raise ValueError(f"checkpoint missing key {key}")
        if tuple(arrays[key].shape) != tuple(state[key].shape):
            raise ValueError(
                f"checkpoint mismatch at {key}: stored {tuple(arrays[key].shape)}, "
                f"model expects {tuple(state[key].shape)}"
            )
    extra = [k for k in arrays if k not in state]
    if extra:
        raise ValueError(f"checkpoint has unexpected keys: {extra[:3]}")
    module.load_state_dict(
        {k: torch.as_tensor(v) for k, v in arrays.items() if k in state}
    )
