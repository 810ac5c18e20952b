"""Checkpoint serialization with bit-exact round-trips.

Layout: an 8-byte magic, a uint64 header length, a JSON header and a raw
little-endian payload of all tensors back to back. The header records
name/dtype/shape/offset for every tensor plus a SHA-256 of the payload,
so corruption is detected on load and save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TVRCKPT1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt file, bad magic, checksum mismatch or shape mismatch."""


@dataclass
class Checkpoint:
    """In-memory checkpoint contents.

    ``parameters`` is the model state dict; ``optimizer_state`` mirrors the
    torch optimizer state dict; ``rng_state`` holds the torch RNG bytes.
    """

    parameters: dict[str, torch.Tensor]
    config: dict
    epoch: int = 0
    best_score: float = float("-inf")
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None
    metadata: dict = field(default_factory=dict)


def _flatten_tensors(obj, prefix: str, table: dict[str, torch.Tensor]):
    """Replace tensors in a nested structure by markers, collecting them."""
    if isinstance(obj, torch.Tensor):
        table[prefix] = obj
        return {"__tensor__": prefix}
    if isinstance(obj, dict):
        return {str(k): _flatten_tensors(v, f"{prefix}.{k}", table) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_flatten_tensors(v, f"{prefix}.{i}", table) for i, v in enumerate(obj)]
    return obj


def _restore_tensors(obj, table: dict[str, torch.Tensor]):
    if isinstance(obj, dict):
        if set(obj) == {"__tensor__"}:
            return table[obj["__tensor__"]]
        return {k: _restore_tensors(v, table) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore_tensors(v, table) for v in obj]
    return obj


def save_checkpoint(state: Checkpoint, path: str | Path) -> Path:
    """Write a checkpoint; returns the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    table: dict[str, torch.Tensor] = {}
    for name, tensor in state.parameters.items():
        table[f"model.{name}"] = tensor
    optim_skeleton = None
    if state.optimizer_state is not None:
        optim_skeleton = _flatten_tensors(state.optimizer_state, "optim", table)
    if state.rng_state is not None:
        table["rng.torch"] = state.rng_state

    payload = bytearray()
    index = []
    for name in sorted(table):
        arr = table[name].detach().contiguous().cpu().numpy()
        data = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(data),
            }
        )
        payload.extend(data)
    payload = bytes(payload)

    header = {
        "version": FORMAT_VERSION,
        "epoch": state.epoch,
        "best_score": state.best_score,
        "config": state.config,
        "metadata": state.metadata,
        "optimizer": optim_skeleton,
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and integrity-check a checkpoint file."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc
    payload = raw[16 + header_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(
            f"checksum mismatch in {path}: payload {digest[:12]}.. != "
            f"recorded {header['payload_sha256'][:12]}.."
        )

    table: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=entry["dtype"])
        table[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())

    parameters = {
        name[len("model.") :]: tensor
        for name, tensor in table.items()
        if name.startswith("model.")
    }
    optimizer_state = None
    if header.get("optimizer") is not None:
        optimizer_state = _restore_tensors(header["optimizer"], table)
        if "state" in optimizer_state:
            optimizer_state["state"] = {
                int(k): v for k, v in optimizer_state["state"].items()
            }
    return Checkpoint(
        parameters=parameters,
        config=header["config"],
        epoch=header["epoch"],
        best_score=header["best_score"],
        optimizer_state=optimizer_state,
        rng_state=table.get("rng.torch"),
        metadata=header.get("metadata", {}),
    )


def apply_parameters(net: torch.nn.Module, parameters: dict[str, torch.Tensor]) -> None:
    """Load parameters into a model, naming the first mismatching tensor."""
    own = net.state_dict()
    missing = sorted(set(own) - set(parameters))
    if missing:
        raise CheckpointError(f"checkpoint is missing tensor {missing[0]!r}")
    unexpected = sorted(set(parameters) - set(own))
    if unexpected:
        raise CheckpointError(f"checkpoint has unexpected tensor {unexpected[0]!r}")
    for name, tensor in parameters.items():
        if tuple(tensor.shape) != tuple(own[name].shape):
            raise CheckpointError(
                f"shape mismatch for tensor {name!r}: checkpoint "
                f"{tuple(tensor.shape)} vs model {tuple(own[name].shape)}"
            )
    net.load_state_dict(parameters)
