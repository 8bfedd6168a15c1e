"""Versioned binary checkpoint container.

Layout: ``MAGIC`` | u32 little-endian header length | UTF-8 JSON header |
raw tensor bytes. The header echoes the run config, lists every tensor
(name, dtype, shape, offset) and carries small JSON-able state. Readers
accept any file with the same major version and ignore unknown header keys.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import IngestionError, ValidationError

MAGIC = b"WDTMDCK\x00"
FORMAT_VERSION = (1, 0)


def save(path, tensors: dict[str, torch.Tensor], meta: dict):
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": list(FORMAT_VERSION), "tensors": entries, "meta": meta}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load(path) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise IngestionError(f"missing checkpoint {path}") from exc
    if not data.startswith(MAGIC):
        raise ValidationError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(data[start:start + hlen])
    major = header.get("format_version", [0])[0]
    if major != FORMAT_VERSION[0]:
        raise ValidationError(f"checkpoint major version {major} unsupported (expected {FORMAT_VERSION[0]})")
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, header.get("meta", {})


def pack_training_state(model, optimizer=None, generator: torch.Generator | None = None) -> dict:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        for idx, st in optimizer.state_dict()["state"].items():
            for key, val in st.items():
                tensors[f"optim.{idx}.{key}"] = torch.as_tensor(val)
    if generator is not None:
        tensors["rng.torch"] = generator.get_state()
    return tensors


def unpack_model_state(tensors: dict) -> dict:
    return {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}


def restore_optimizer(optimizer, tensors: dict):
    sd = optimizer.state_dict()
    state: dict = {}
    for name, val in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = val
    sd["state"] = state
    optimizer.load_state_dict(sd)
