"""
Checkpoint archive
Named parameter arrays behind a JSON header; shared by both networks
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from .errors import FormatError, InvalidInputError

logger = logging.getLogger(__name__)

MAGIC = b"VMCK"
VERSION = 1


@dataclass
class Checkpoint:
    """Parameters, optimizer moments, counters, config snapshot and RNG state"""

    kind: str
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_meta: Dict[str, Any] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    config: Dict[str, str] = field(default_factory=dict)
    rng_state: Optional[np.ndarray] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def capture(cls, kind: str, model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None,
                epoch: int = 0, step: int = 0, config: Optional[Dict[str, str]] = None,
                extra: Optional[Dict[str, Any]] = None) -> "Checkpoint":
        params = {name: t.detach().cpu().numpy().copy() for name, t in model.state_dict().items()}
        moments, meta = {}, {}
        if optimizer is not None:
            state = optimizer.state_dict()
            for index, slots in state["state"].items():
                for slot, value in slots.items():
                    key = f"{index}.{slot}"
                    if torch.is_tensor(value):
                        moments[key] = value.detach().cpu().numpy().copy()
                    else:
                        moments[key] = np.asarray(value)
            meta = {"param_groups": state["param_groups"]}
        return cls(kind=kind, params=params, optimizer=moments, optimizer_meta=meta, epoch=epoch,
                   step=step, config=dict(config or {}), rng_state=torch.get_rng_state().numpy().copy(),
                   extra=dict(extra or {}))

    def restore_model(self, model: torch.nn.Module) -> torch.nn.Module:
        state = {name: torch.from_numpy(np.array(array)) for name, array in self.params.items()}
        model.load_state_dict(state)
        return model

    def restore_optimizer(self, optimizer: torch.optim.Optimizer) -> torch.optim.Optimizer:
        if not self.optimizer_meta:
            return optimizer
        state: Dict[int, Dict[str, Any]] = {}
        for key, array in self.optimizer.items():
            index, slot = key.split(".", 1)
            state.setdefault(int(index), {})[slot] = torch.from_numpy(np.array(array))
        optimizer.load_state_dict({"state": state, "param_groups": self.optimizer_meta["param_groups"]})
        return optimizer

    def restore_rng(self) -> None:
        if self.rng_state is not None:
            torch.set_rng_state(torch.from_numpy(np.array(self.rng_state, dtype=np.uint8)))


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    """
    Write a checkpoint archive

    Layout: magic, uint32 version, uint64 header length, JSON header, raw
    little-endian array bytes at the offsets the header records.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in checkpoint.params.items()}
    arrays.update({f"optim/{k}": v for k, v in checkpoint.optimizer.items()})
    if checkpoint.rng_state is not None:
        arrays["rng/torch"] = checkpoint.rng_state
    entries, blobs, offset = [], [], 0
    for name, array in arrays.items():
        array = np.asarray(array)
        data = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.newbyteorder("<").str,
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "kind": checkpoint.kind, "epoch": checkpoint.epoch, "step": checkpoint.step,
        "config": checkpoint.config, "optimizer_meta": checkpoint.optimizer_meta,
        "extra": checkpoint.extra, "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    logger.info("saved %s checkpoint (epoch %d, step %d) to %s", checkpoint.kind, checkpoint.epoch,
                checkpoint.step, path)
    return path


def load_checkpoint(path: Path, kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path} is not a checkpoint archive")
    version, header_len = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header in {path}") from exc
    if kind is not None and header["kind"] != kind:
        raise InvalidInputError(f"{path} holds a {header['kind']} network, expected {kind}")
    body = start + header_len
    params, moments, rng_state = {}, {}, None
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = entry["nbytes"] // dtype.itemsize if dtype.itemsize else 0
        array = np.frombuffer(data, dtype=dtype, count=count, offset=body + entry["offset"])
        array = array.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        group, name = entry["name"].split("/", 1)
        if group == "param":
            params[name] = array
        elif group == "optim":
            moments[name] = array
        elif group == "rng":
            rng_state = array
    return Checkpoint(kind=header["kind"], params=params, optimizer=moments,
                      optimizer_meta=header["optimizer_meta"], epoch=header["epoch"], step=header["step"],
                      config=header["config"], rng_state=rng_state, extra=header["extra"])
