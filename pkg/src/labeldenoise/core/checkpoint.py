"""Self-describing checkpoint container for segmentation models.

Layout: one format-version byte, a little-endian uint32 header length, a UTF-8 YAML header
(architecture, training stage, epoch, rng state, config hash, tensor table, payload digest)
and the parameter payload as little-endian float32 arrays named by layer.
"""
from __future__ import annotations

import base64
import hashlib
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import torch
import torch.nn as nn
import yaml

from .errors import CheckpointError
from .network import ArchitectureSpec, build_model

FORMAT_VERSION = 1
STAGES = ("initial", "source-pretrained", "adapted")
_PREFIX = struct.Struct("<BI")


@dataclass(slots=True)
class Checkpoint:
    model: nn.Module
    architecture: ArchitectureSpec
    stage: str = "initial"
    epoch: int = 0
    config_hash: str = ""
    rng_state: bytes | None = None
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.architecture.num_classes


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> Checkpoint:
    if checkpoint.stage not in STAGES:
        raise CheckpointError(f"Unknown training stage '{checkpoint.stage}'")
    tensors: List[Dict[str, Any]] = []
    chunks: List[bytes] = []
    offset = 0
    for name, tensor in checkpoint.model.state_dict().items():
        data = tensor.detach().cpu().numpy().astype("<f4").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": str(tensor.dtype).removeprefix("torch."),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    header = {
        "architecture": asdict(checkpoint.architecture),
        "stage": checkpoint.stage,
        "epoch": checkpoint.epoch,
        "config_hash": checkpoint.config_hash,
        "rng_state": base64.b64encode(checkpoint.rng_state).decode("ascii") if checkpoint.rng_state else None,
        "metrics": {key: float(value) for key, value in checkpoint.metrics.items()},
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = yaml.safe_dump(header, sort_keys=False).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_PREFIX.pack(FORMAT_VERSION, len(header_bytes)) + header_bytes + payload)
    return checkpoint


def _read_header(raw: bytes, path: Path) -> tuple[Dict[str, Any], bytes]:
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"Checkpoint '{path}' is truncated (no header)")
    version, header_length = _PREFIX.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint '{path}' has format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(raw) < start + header_length:
        raise CheckpointError(f"Checkpoint '{path}' is truncated inside its header")
    try:
        header = yaml.safe_load(raw[start : start + header_length].decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as exc:
        raise CheckpointError(f"Checkpoint '{path}' has a corrupt header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointError(f"Checkpoint '{path}' has a corrupt header")
    return header, raw[start + header_length :]


def load_checkpoint(
    path: Path,
    *,
    expected_num_classes: int | None = None,
    expected_config_hash: str | None = None,
) -> Checkpoint:
    if not path.exists():
        raise CheckpointError(f"Checkpoint '{path}' does not exist")
    header, payload = _read_header(path.read_bytes(), path)
    config_hash = header.get("config_hash", "")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(
            f"Checkpoint '{path}' is corrupt: payload digest mismatch (recorded config hash {config_hash or 'none'})"
        )
    if expected_config_hash is not None and expected_config_hash != config_hash:
        raise CheckpointError(
            f"Checkpoint '{path}' config hash mismatch: expected {expected_config_hash}, found {config_hash}"
        )

    architecture = ArchitectureSpec(**header["architecture"])
    if expected_num_classes is not None and architecture.num_classes != expected_num_classes:
        raise CheckpointError(
            f"Checkpoint '{path}' class count mismatch: expected C={expected_num_classes}, "
            f"found C={architecture.num_classes}"
        )

    model = build_model(architecture)
    state: Dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        count = entry["nbytes"] // 4
        array = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensor = torch.from_numpy(array.reshape(entry["shape"]).copy())
        state[entry["name"]] = tensor.to(getattr(torch, entry["dtype"]))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"Checkpoint '{path}' does not fit architecture '{architecture.name}': {exc}") from exc

    rng_state = header.get("rng_state")
    return Checkpoint(
        model=model,
        architecture=architecture,
        stage=header["stage"],
        epoch=int(header["epoch"]),
        config_hash=config_hash,
        rng_state=base64.b64decode(rng_state) if rng_state else None,
        metrics=dict(header.get("metrics") or {}),
    )


def clone_checkpoint(checkpoint: Checkpoint) -> Checkpoint:
    """Deep copy whose model can be trained without touching the original."""
    model = build_model(checkpoint.architecture)
    model.load_state_dict(checkpoint.model.state_dict())
    return Checkpoint(
        model=model,
        architecture=checkpoint.architecture,
        stage=checkpoint.stage,
        epoch=checkpoint.epoch,
        config_hash=checkpoint.config_hash,
        rng_state=checkpoint.rng_state,
        metrics=dict(checkpoint.metrics),
    )


def checkpoint_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()
