"""Single-file archive of named arrays.

Layout::

    8 bytes   b"MFCKPT01"
    8 bytes   uint64 little-endian length of the JSON header
    N bytes   UTF-8 JSON header (sorted keys, compact separators):
              {"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
               "meta": {...}}
    ...       raw little-endian array payloads, in header order; ``offset``
              counts from the first payload byte

Arrays are written in sorted-name order, so saving the same contents twice
produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MFCKPT01"


def _to_numpy(value):
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def checkpoint_bytes(arrays: dict, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        src = _to_numpy(arrays[name])
        # ascontiguousarray promotes 0-d arrays to 1-d; keep the original shape
        arr = np.ascontiguousarray(src).reshape(src.shape)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(arrays, meta))
    tmp.replace(path)


def parse_checkpoint(data: bytes):
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint archive (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode())
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def load_checkpoint(path):
    """Returns ``(arrays, meta)`` with arrays as numpy."""
    return parse_checkpoint(Path(path).read_bytes())


def model_arrays(model, prefix="model/"):
    return {prefix + k: v for k, v in model.state_dict().items()}


def load_model_arrays(model, arrays, prefix="model/"):
    """Copy ``prefix``-named arrays into ``model``, checking names and shapes."""
    state = model.state_dict()
    found = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    missing = sorted(set(state) - set(found))
    extra = sorted(set(found) - set(state))
    if missing or extra:
        raise KeyError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, tensor in state.items():
        if tuple(found[name].shape) != tuple(tensor.shape):
            raise ValueError(f"{name}: checkpoint shape {found[name].shape} vs model {tuple(tensor.shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(found[k])) for k in state})
