"""Checkpoint persistence.

A checkpoint is a directory: `metadata.json` (config snapshot, step, seed,
partition table, array listing) plus one binary file per named array
under `arrays/`. Array files are little-endian float32 with a short
header (magic, ndim, dims), so a round-trip is bit-identical at the
stored precision. Parameters are partitioned by submodule so adaptation
can rewrite the `lm` partition and provably touch nothing else.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

ARRAY_MAGIC = b"HTSR"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_array(path: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = ARRAY_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header + arr.tobytes())
    os.replace(tmp, path)


def read_array(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != ARRAY_MAGIC:
        raise CheckpointError(f"{path}: bad array magic")
    ndim = struct.unpack("<I", raw[4:8])[0]
    shape = struct.unpack(f"<{ndim}I", raw[8 : 8 + 4 * ndim])
    data = np.frombuffer(raw[8 + 4 * ndim :], dtype="<f4")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"{path}: truncated array")
    return data.reshape(shape).copy()


@dataclass
class Checkpoint:
    directory: str
    metadata: dict

    @property
    def step(self) -> int:
        return self.metadata["step"]

    @property
    def config(self) -> dict:
        return self.metadata["config"]

    @property
    def partitions(self) -> dict[str, str]:
        return self.metadata["partitions"]

    def array_path(self, name: str) -> str:
        return os.path.join(self.directory, "arrays", name + ".bin")

    def load_array(self, name: str) -> np.ndarray:
        return read_array(self.array_path(name))

    def load_arrays(self, names=None) -> dict[str, np.ndarray]:
        names = self.metadata["arrays"] if names is None else names
        return {n: self.load_array(n) for n in names}


def save_checkpoint(
    directory: str,
    model: torch.nn.Module,
    config_snapshot: dict,
    step: int,
    seed: int,
    extra: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> Checkpoint:
    os.makedirs(os.path.join(directory, "arrays"), exist_ok=True)
    partitions = model.partition_table()
    names = []
    for name, param in model.named_parameters():
        write_array(os.path.join(directory, "arrays", name + ".bin"), param.detach().cpu().numpy())
        names.append(name)
    opt_names = []
    if optimizer is not None:
        params = dict(model.named_parameters())
        id_to_name = {id(p): n for n, p in params.items()}
        for p, state in optimizer.state.items():
            pname = id_to_name.get(id(p))
            if pname is None:
                continue
            for key in ("exp_avg", "exp_avg_sq", "step"):
                if key in state:
                    arr = state[key]
                    arr = arr.detach().cpu().numpy() if torch.is_tensor(arr) else np.asarray(arr, dtype=np.float32)
                    oname = f"optimizer/{pname}.{key}"
                    os.makedirs(os.path.dirname(os.path.join(directory, "arrays", oname + ".bin")), exist_ok=True)
                    write_array(os.path.join(directory, "arrays", oname + ".bin"), np.atleast_1d(arr))
                    opt_names.append(oname)
    metadata = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "seed": seed,
        "config": config_snapshot,
        "partitions": partitions,
        "arrays": names,
        "optimizer_arrays": opt_names,
        "extra": extra or {},
    }
    tmp = os.path.join(directory, "metadata.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(directory, "metadata.json"))
    return Checkpoint(directory, metadata)


def load_checkpoint(directory: str) -> Checkpoint:
    meta_path = os.path.join(directory, "metadata.json")
    if not os.path.exists(meta_path):
        raise CheckpointError(f"no checkpoint at {directory}")
    with open(meta_path, "r", encoding="utf-8") as f:
        metadata = json.load(f)
    if metadata.get("format_version") != FORMAT_VERSION:
        raise CheckpointError("unsupported checkpoint format version")
    return Checkpoint(directory, metadata)


def load_into_model(model: torch.nn.Module, ckpt: Checkpoint, partitions=None) -> None:
    """Copy checkpoint arrays into the model, optionally one partition only."""
    wanted = set(partitions) if partitions is not None else None
    params = dict(model.named_parameters())
    for name in ckpt.metadata["arrays"]:
        part = ckpt.partitions[name]
        if wanted is not None and part not in wanted:
            continue
        if name not in params:
            raise CheckpointError(f"checkpoint array {name} has no model parameter")
        arr = ckpt.load_array(name)
        with torch.no_grad():
            params[name].copy_(torch.from_numpy(arr).to(params[name].dtype))


def load_optimizer_state(optimizer: torch.optim.Optimizer, model: torch.nn.Module, ckpt: Checkpoint) -> None:
    names = ckpt.metadata.get("optimizer_arrays", [])
    if not names:
        return
    params = dict(model.named_parameters())
    for oname in names:
        body = oname[len("optimizer/") :]
        pname, key = body.rsplit(".", 1)
        p = params[pname]
        arr = ckpt.load_array(oname)
        state = optimizer.state[p]
        if key == "step":
            state[key] = torch.tensor(float(arr.reshape(-1)[0]))
        else:
            state[key] = torch.from_numpy(arr.reshape(p.shape)).to(p.dtype)
