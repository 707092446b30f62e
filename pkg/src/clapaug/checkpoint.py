"""Binary checkpoints.

Layout::

    b"RCLP" | version:u8 = 1 | header_len:u32le | header (canonical JSON)
    | float32le tensors, in the order listed by header["tensors"]

The header carries the model config, Adam hyperparameters and step count, and
the name/shape of every tensor. Adam moments follow the model parameters as
``adam.m.<name>`` / ``adam.v.<name>``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from clapaug.encoders import DualEncoder, ModelConfig
from clapaug.errors import CheckpointError
from clapaug.nn import Adam

MAGIC = b"RCLP"
VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _tensor_list(model: DualEncoder, adam: Adam | None) -> list[tuple[str, np.ndarray]]:
    tensors = [(name, p) for name, p, _ in model.named_parameters()]
    if adam is not None and adam.m:
        for name, _ in list(tensors):
            tensors.append((f"adam.m.{name}", adam.m[name]))
            tensors.append((f"adam.v.{name}", adam.v[name]))
    return tensors


def save_checkpoint(model: DualEncoder, adam: Adam | None, path, config: ModelConfig | None = None) -> None:
    config = config or model.config
    tensors = _tensor_list(model, adam)
    header = {
        "model": config.to_dict(),
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step": adam.step_count,
        },
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = canonical_json(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(bytes([VERSION]))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for _, t in tensors:
                f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[DualEncoder, Adam | None, ModelConfig]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r} in {path}")
    if len(data) < 9:
        raise CheckpointError(f"truncated checkpoint header in {path}")
    if data[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data[4]} (expected {VERSION})")
    (hlen,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + hlen:
        raise CheckpointError(f"truncated checkpoint header in {path}")
    try:
        header = json.loads(data[9:9 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc

    model = DualEncoder(config, init=False)
    adam = None
    if header.get("adam") is not None:
        a = header["adam"]
        adam = Adam(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
        adam.step_count = a["step"]

    expected = {name: p.shape for name, p, _ in model.named_parameters()}
    targets = dict((name, p) for name, p, _ in model.named_parameters())
    pos = 9 + hlen
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        base = name.split(".", 2)[2] if name.startswith("adam.") else name
        if base not in expected:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        if shape != expected[base]:
            raise CheckpointError(
                f"tensor {name!r} has shape {shape}, config implies {expected[base]}")
        nbytes = 4 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise CheckpointError(f"checkpoint truncated in tensor {name!r}")
        values = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).astype(np.float64)
        values = values.reshape(shape)
        pos += nbytes
        if name.startswith("adam."):
            if adam is None:
                raise CheckpointError(f"moment tensor {name!r} without Adam state")
            store = adam.m if name.startswith("adam.m.") else adam.v
            store[base] = values
        else:
            targets[name][...] = values
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last tensor")
    missing = set(expected) - {e["name"] for e in header["tensors"]}
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    return model, adam, config
