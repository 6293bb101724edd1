"""Checkpoint directories and the raw tensor blob format.

Blob layout (all little-endian):

    offset 0   4 bytes   magic b"AMRT"
    offset 4   uint32    format version (1)
    offset 8   uint32    rank
    offset 12  uint32    reserved, 0
    offset 16  rank x uint64 dims
    then       prod(dims) float32 values, row-major

A checkpoint directory holds ``manifest.json`` (config, iteration, seeds,
parameter inventory) and one ``.bin`` blob per parameter, buffer and
optimizer moment under ``params/`` and ``optim/``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import DataError

MAGIC = b"AMRT"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_blob(path, array) -> None:
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    arr = np.asarray(array, dtype="<f4", order="C")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, arr.ndim, 0))
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        fh.write(arr.tobytes(order="C"))


def read_blob(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, rank, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise DataError(f"{path}: not a tensor blob (magic={magic!r}, version={version})")
    off = _HEADER.size
    dims = np.frombuffer(raw, dtype="<u8", count=rank, offset=off)
    off += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - off != 4 * count:
        raise DataError(f"{path}: expected {count} float32 values, found {(len(raw) - off) / 4}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(tuple(int(d) for d in dims)).copy()


def _fname(name: str) -> str:
    return name.replace("/", "_") + ".bin"


def save_checkpoint(directory, model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None,
                    *, config: Optional[dict] = None, iteration: int = 0, seeds: Optional[dict] = None,
                    extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    inventory = {}
    for name, tensor in model.state_dict().items():
        if tensor.dtype != torch.float32:
            raise DataError(f"{name}: only float32 tensors can be checkpointed, got {tensor.dtype}")
        rel = f"params/{_fname(name)}"
        write_blob(directory / rel, tensor)
        inventory[name] = {"file": rel, "shape": list(tensor.shape)}

    optim_entries = {}
    if optimizer is not None:
        (directory / "optim").mkdir(exist_ok=True)
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                name = names[id(p)]
                entry = {"step": int(state["step"])}
                for key in ("exp_avg", "exp_avg_sq"):
                    rel = f"optim/{_fname(name)}.{key}.bin"
                    write_blob(directory / rel, state[key])
                    entry[key] = rel
                optim_entries[name] = entry

    manifest = {
        "format": "amir-checkpoint",
        "version": VERSION,
        "iteration": iteration,
        "seeds": seeds or {},
        "config": config or {},
        "parameters": inventory,
        "optimizer": optim_entries,
        "torch_rng_state": torch.get_rng_state().numpy().tobytes().hex(),
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise DataError(f"{directory} is not a checkpoint (no manifest.json)")
    return json.loads(path.read_text())


def load_checkpoint(directory, model: torch.nn.Module,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> dict:
    """Load parameters (and optimizer moments) in place; returns the manifest."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    state = {}
    for name, entry in manifest["parameters"].items():
        state[name] = torch.from_numpy(read_blob(directory / entry["file"]))
    model.load_state_dict(state)

    if optimizer is not None and manifest.get("optimizer"):
        params = dict(model.named_parameters())
        for name, entry in manifest["optimizer"].items():
            p = params[name]
            optimizer.state[p] = {
                "step": torch.tensor(float(entry["step"])),
                "exp_avg": torch.from_numpy(read_blob(directory / entry["exp_avg"])),
                "exp_avg_sq": torch.from_numpy(read_blob(directory / entry["exp_avg_sq"])),
            }
    rng_hex = manifest.get("torch_rng_state")
    if rng_hex:
        torch.set_rng_state(torch.from_numpy(np.frombuffer(bytes.fromhex(rng_hex), dtype=np.uint8).copy()))
    return manifest
