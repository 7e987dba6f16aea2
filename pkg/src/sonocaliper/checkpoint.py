"""Self-describing checkpoint files.

Layout, all little-endian:

    bytes 0..4   magic ``SCKP``
    bytes 4..8   container version (u32), currently 1
    bytes 8..16  header length in bytes (u64)
    header       UTF-8 JSON: backbone config, plane, encode settings, seed,
                 metric history and a tensor index (name, shape, offset)
    payload      raw float32 tensor data, concatenated in index order

The header alone is enough to rebuild the network shape; the index maps each
state-dict entry into the payload. See ``docs/checkpoint-format.md``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError
from .geometry import PlaneConfig
from .model import BackboneConfig, CaliperNet

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "MAGIC", "CONTAINER_VERSION"]

MAGIC = b"SCKP"
CONTAINER_VERSION = 1
HEADER_FORMAT = "sonocaliper-checkpoint/v1"


def _plane_to_json(plane: PlaneConfig) -> dict:
    return {
        "plane_name": plane.plane_name,
        "landmark_names": list(plane.landmark_names),
        "biometry_pairs": [list(p) for p in plane.biometry_pairs],
    }


def _plane_from_json(obj: dict) -> PlaneConfig:
    return PlaneConfig(
        plane_name=obj["plane_name"],
        landmark_names=tuple(obj["landmark_names"]),
        biometry_pairs=tuple((a, b) for a, b in obj["biometry_pairs"]),
    )


@dataclass
class Checkpoint:
    backbone: BackboneConfig
    plane: PlaneConfig
    state_dict: dict[str, torch.Tensor]
    sigma: float
    line_width: float
    alpha: float
    seed: int
    best_epoch: int | None
    history: list[dict]

    def build_model(self) -> CaliperNet:
        model = CaliperNet(self.backbone)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name, tensor in checkpoint.state_dict.items():
        if not tensor.dtype.is_floating_point:
            raise CheckpointError(f"tensor {name!r} has non-float dtype {tensor.dtype}")
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": HEADER_FORMAT,
        "backbone": checkpoint.backbone.to_json_dict(),
        "plane": _plane_to_json(checkpoint.plane),
        "sigma": checkpoint.sigma,
        "line_width": checkpoint.line_width,
        "alpha": checkpoint.alpha,
        "seed": checkpoint.seed,
        "best_epoch": checkpoint.best_epoch,
        "history": checkpoint.history,
        "tensors": index,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CONTAINER_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (header_len,) = struct.unpack_from("<Q", data, 8)
    header_end = 16 + header_len
    if len(data) < header_end:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(data[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON: {exc}") from exc
    if header.get("format") != HEADER_FORMAT:
        raise CheckpointError(
            f"{path}: header format {header.get('format')!r} is not {HEADER_FORMAT!r}"
        )
    payload = data[header_end:]
    state = {}
    for item in header["tensors"]:
        shape = tuple(int(s) for s in item["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        start = int(item["offset"])
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {item['name']!r} overruns the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start)
        state[item["name"]] = torch.from_numpy(arr.reshape(shape).copy())
    return Checkpoint(
        backbone=BackboneConfig.from_json_dict(header["backbone"]),
        plane=_plane_from_json(header["plane"]),
        state_dict=state,
        sigma=float(header["sigma"]),
        line_width=float(header["line_width"]),
        alpha=float(header["alpha"]),
        seed=int(header["seed"]),
        best_epoch=None if header["best_epoch"] is None else int(header["best_epoch"]),
        history=list(header["history"]),
    )
