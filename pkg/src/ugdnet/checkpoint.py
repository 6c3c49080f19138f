"""Checkpoint files.

Layout::

    b"UGDNCKPT"                      8-byte magic
    uint32 little-endian             format version
    uint64 little-endian             header length in bytes
    header                           UTF-8 JSON, sorted keys
    payload                          row-major little-endian float32 tensors,
                                     concatenated in header order

The header holds ``format_version``, ``config`` (echo of the run config),
``meta`` (free-form, e.g. epoch and validation DSC) and ``tensors``
(list of ``{"name", "shape"}``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .errors import FormatError, LoadError

MAGIC = b"UGDNCKPT"
FORMAT_VERSION = 1


def encode(state: dict[str, torch.Tensor], config: dict, meta: dict | None = None) -> bytes:
    tensors = []
    chunks = []
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4"))
        tensors.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "meta": meta or {},
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict, dict]:
    if blob[:8] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    offset = 20 + hlen
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"checkpoint truncated while reading {entry['name']}")
        state[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise FormatError("trailing bytes after checkpoint payload")
    return state, header["config"], header["meta"]


def save_checkpoint(path, model: nn.Module, config: dict, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(model.state_dict(), config, meta))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise LoadError(f"cannot read checkpoint {path}: {e}") from e
    return decode(blob)


def load_state(model: nn.Module, state: dict[str, np.ndarray]) -> None:
    """Copy tensors into ``model``; every name and shape must match."""
    own = model.state_dict()
    problems = []
    for name in sorted(set(own) - set(state)):
        problems.append(f"missing {name}")
    for name in sorted(set(state) - set(own)):
        problems.append(f"unexpected {name}")
    for name in sorted(set(own) & set(state)):
        if tuple(own[name].shape) != tuple(state[name].shape):
            problems.append(f"shape {name}: checkpoint {tuple(state[name].shape)} vs model {tuple(own[name].shape)}")
    if problems:
        raise LoadError("checkpoint does not match model: " + "; ".join(problems))
    with torch.no_grad():
        for name, t in own.items():
            t.copy_(torch.from_numpy(state[name]).to(t.dtype))


def load_checkpoint(path, model: nn.Module) -> tuple[dict, dict]:
    state, config, meta = read_checkpoint(path)
    load_state(model, state)
    return config, meta


def build_from_checkpoint(path) -> tuple[Any, dict, dict]:
    """Rebuild the network described by a checkpoint's config echo."""
    from .config import RunConfig
    from .network import UGDNet

    state, config, meta = read_checkpoint(path)
    run = RunConfig.from_dict(config)
    model = UGDNet(run.network)
    load_state(model, state)
    model.eval()
    return model, run, meta
