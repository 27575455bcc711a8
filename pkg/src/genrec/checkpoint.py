"""Single-file tensor container.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then the raw
little-endian tensor payload.  The header lists every tensor's name, shape,
dtype and byte range within the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .backbone import Decoder, ModelConfig

FORMAT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def write_tensors(path: str | Path, tensors: Mapping[str, torch.Tensor], header_extra: Mapping | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype], "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "tensors": entries, **(header_extra or {})}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def read_tensors(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise CheckpointError(f"{path}: truncated file")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = memoryview(data)[8 + n :]
    tensors = {}
    for e in header["tensors"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(payload[lo:hi], dtype=e["dtype"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return header, tensors


def save_model(path: str | Path, model: Decoder, meta: Mapping | None = None) -> None:
    write_tensors(path, model.state_dict(), {"config": model.config.to_dict(), "meta": dict(meta or {})})


def load_model(path: str | Path) -> tuple[Decoder, dict]:
    header, tensors = read_tensors(path)
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config: {exc}") from None
    model = Decoder(cfg)
    expected = model.state_dict()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"{path}: tensor names do not match config (missing {missing}, unexpected {extra})")
    for name, t in tensors.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(t.shape)}, config expects {tuple(expected[name].shape)}")
    dtype = next(iter(tensors.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(tensors)
    return model, header.get("meta", {})
