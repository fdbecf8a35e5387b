"""
Checkpoint files

Layout: the header line SCGA-CKPT-1, an 8-byte little-endian manifest length,
the JSON manifest, then for every parameter its values, first and second Adam
moments as little-endian float64 buffers. The manifest carries names, shapes,
offsets, optimizer step counts, the random generator state, the training
position, the configuration and the vocabulary.
"""
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.encoders import RESERVED_TOKENS, Vocabulary
from core.errors import DatasetError, ShapeError
from core.settings import build_config

logger = logging.getLogger(__name__)

MAGIC = b"SCGA-CKPT-1\n"
_LENGTH = struct.Struct("<Q")
_FLOAT = np.dtype("<f8")


@dataclass
class TrainingPosition:
    epoch: int = 0
    step: int = 0
    best_val_loss: Optional[float] = None
    best_epoch: Optional[int] = None


@dataclass
class Checkpoint:
    manifest: Dict[str, Any]
    tensors: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray, int]] = field(default_factory=dict)

    @property
    def position(self) -> TrainingPosition:
        return TrainingPosition(**self.manifest["position"])

    @property
    def rng_state(self) -> dict:
        return self.manifest["rng_state"]


def save_checkpoint(path: Path, model, position: TrainingPosition, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write model parameters, Adam moments and run state

    Args:
        path: Target file; written via a temporary file and renamed into place
        model: SCGAModel
        position: Where training stands
        metadata: Extra JSON-serializable fields (e.g. validation metrics)
    """
    path = Path(path)
    entries, buffers, offset = [], [], 0
    for name, p in model.named_parameters():
        count = int(p.data.size)
        entries.append({"name": name, "shape": list(p.data.shape), "offset": offset, "count": count, "step": p.step})
        for array in (p.data, p.m, p.v):
            buffers.append(np.ascontiguousarray(array, dtype=_FLOAT).tobytes())
        offset += 3 * count * _FLOAT.itemsize
    manifest = {
        "parameters": entries,
        "rng_state": model.rng.get_state(),
        "position": asdict(position),
        "config": model.config.model_dump(),
        "vocab": model.vocab.itos[len(RESERVED_TOKENS):],
        "metadata": metadata or {},
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(encoded)))
        f.write(encoded)
        for chunk in buffers:
            f.write(chunk)
    os.replace(tmp, path)
    logger.info("checkpoint written: %s (epoch %d, step %d)", path, position.epoch, position.step)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise DatasetError(f"{path} is not an SCGA checkpoint")
    start = len(MAGIC)
    (length,) = _LENGTH.unpack_from(raw, start)
    start += _LENGTH.size
    try:
        manifest = json.loads(raw[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path} has a corrupt manifest: {exc}") from exc
    data = raw[start + length:]
    checkpoint = Checkpoint(manifest=manifest)
    for entry in manifest["parameters"]:
        count, offset = entry["count"], entry["offset"]
        if offset + 3 * count * _FLOAT.itemsize > len(data):
            raise DatasetError(f"{path} is truncated at parameter {entry['name']}", field=entry["name"])
        arrays = [
            np.frombuffer(data, dtype=_FLOAT, count=count, offset=offset + i * count * _FLOAT.itemsize)
            .reshape(entry["shape"]).astype(np.float64)
            for i in range(3)
        ]
        checkpoint.tensors[entry["name"]] = (arrays[0], arrays[1], arrays[2], int(entry["step"]))
    return checkpoint


def restore(model, checkpoint: Checkpoint, with_rng: bool = True) -> None:
    """Copy values, moments and step counts into model; names and shapes must match"""
    params = dict(model.named_parameters())
    missing = sorted(set(params) ^ set(checkpoint.tensors))
    if missing:
        raise ShapeError(f"checkpoint and model disagree on parameters: {', '.join(missing[:5])}")
    for name, p in params.items():
        value, m, v, step = checkpoint.tensors[name]
        if value.shape != p.data.shape:
            raise ShapeError(f"{name}: checkpoint shape {value.shape} vs model {p.data.shape}")
        p.data, p.m, p.v, p.step = value.copy(), m.copy(), v.copy(), step
        p.grad = None
    if with_rng:
        model.rng.set_state(checkpoint.rng_state)


def model_from_checkpoint(path: Path):
    """Rebuild the model recorded in a checkpoint; returns (model, checkpoint)"""
    from core.model import SCGAModel

    checkpoint = load_checkpoint(path)
    config = build_config(checkpoint.manifest["config"])
    model = SCGAModel(config, Vocabulary(checkpoint.manifest["vocab"]))
    restore(model, checkpoint)
    return model, checkpoint
