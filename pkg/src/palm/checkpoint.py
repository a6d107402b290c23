"""Versioned ``.palmckpt`` container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
a sorted-key JSON header, then raw little-endian tensor bytes in header order.
The header lists sections (``encoder``, ``backbone``, ``heads``, ``dit`` and
optionally ``optimizer`` and ``rng``) with per-tensor dtype, shape and offset.
No timestamps are written, so equal contents give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PALMCKPT"
VERSION = 1

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "uint8": torch.uint8,
    "bool": torch.bool,
}
_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointVersionError(ValueError):
    pass


class CheckpointShapeError(ValueError):
    pass


class CheckpointCorruptError(RuntimeError):
    pass


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    if arr.dtype.byteorder == ">":
        arr = arr.byteswap().newbyteorder()
    return arr.tobytes()


def save(path, sections: dict[str, dict[str, torch.Tensor]], meta: dict) -> None:
    """Write atomically: the file appears complete or not at all."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = {}, [], 0
    for sname in sorted(sections):
        entries = []
        for key in sorted(sections[sname]):
            t = sections[sname][key]
            if t.dtype not in _NAMES:
                raise TypeError(f"unsupported dtype {t.dtype} for {sname}.{key}")
            b = _tensor_bytes(t)
            entries.append({"key": key, "dtype": _NAMES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(b)})
            blobs.append(b)
            offset += len(b)
        index[sname] = entries
    header = json.dumps({"meta": meta, "sections": index}, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, dict[str, torch.Tensor]], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    header = json.loads(data[20 : 20 + hlen])
    base = 20 + hlen
    sections = {}
    for sname, entries in header["sections"].items():
        out = {}
        for e in entries:
            raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise CheckpointCorruptError(f"{path}: truncated at {sname}.{e['key']}")
            np_dtype = np.dtype(e["dtype"]).newbyteorder("<")
            arr = np.frombuffer(raw, dtype=np_dtype).reshape(e["shape"]).copy()
            out[e["key"]] = torch.from_numpy(arr)
        sections[sname] = out
    return sections, header["meta"]


def load_module_state(module: torch.nn.Module, state: dict[str, torch.Tensor], section: str) -> None:
    """Strict load that names both shapes on mismatch."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise CheckpointShapeError(f"section {section!r}: missing keys {missing[:5]}, unexpected keys {extra[:5]}")
    for k, v in own.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise CheckpointShapeError(
                f"section {section!r} tensor {k!r}: checkpoint shape {tuple(state[k].shape)} "
                f"vs model shape {tuple(v.shape)}"
            )
    module.load_state_dict({k: state[k].to(own[k].dtype) for k in own})


def optimizer_tensors(opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    sd = opt.state_dict()
    out = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            t = v if torch.is_tensor(v) else torch.tensor(v, dtype=torch.float64)
            out[f"{int(pid):05d}.{k}"] = t
    return out


def restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, v in tensors.items():
        pid, k = key.split(".", 1)
        state.setdefault(int(pid), {})[k] = v.clone()
    sd["state"] = state
    opt.load_state_dict(sd)
