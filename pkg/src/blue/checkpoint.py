"""Single-file checkpoints: a JSON header line, then raw parameter bytes.

The header pins the model configuration, the bounding box the contexts were
normalized against, and the ordered parameter table (name, shape), so a
checkpoint alone is enough to rebuild the model. Floats are stored
little-endian in parameter-table order. An optional JSON "model card"
sidecar records how the checkpoint was produced.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .geo import BoundingBox
from .model import BlueModel, ModelConfig

FORMAT_TAG = "blue-checkpoint"
FORMAT_VERSION = 1

_WIRE_DTYPE = {"float32": "<f4", "float64": "<f8"}


def _box_to_dict(box: BoundingBox) -> dict:
    return {
        "lon_min": box.lon_min,
        "lon_max": box.lon_max,
        "lat_min": box.lat_min,
        "lat_max": box.lat_max,
        "d_max": box.d_max,
    }


def _box_from_dict(d: dict) -> BoundingBox:
    return BoundingBox(d["lon_min"], d["lon_max"], d["lat_min"], d["lat_max"], d["d_max"])


def save_checkpoint(path, model: BlueModel, box: BoundingBox, card: Optional[dict] = None) -> Path:
    """Write the model to one binary file; optionally a .card.json sidecar."""
    path = Path(path)
    header = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "box": _box_to_dict(box),
        "params": [[p.name, list(p.data.shape)] for p in model.parameters()],
    }
    wire = _WIRE_DTYPE[model.config.dtype]
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p.data.astype(wire, copy=False)).tobytes())
    if card is not None:
        card_path = path.with_suffix(path.suffix + ".card.json")
        card_path.write_text(json.dumps(card, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[BlueModel, BoundingBox, dict]:
    """Rebuild model and bounding box from a checkpoint file."""
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path} is not a checkpoint: bad header") from exc
        if header.get("format") != FORMAT_TAG:
            raise ValueError(f"{path} is not a checkpoint (format={header.get('format')!r})")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {header.get('version')} in {path}"
            )
        config = ModelConfig.from_dict(header["config"])
        model = BlueModel(config)
        wire = np.dtype(_WIRE_DTYPE[config.dtype])
        table = header["params"]
        params = model.parameters()
        if [p.name for p in params] != [name for name, _ in table]:
            raise ValueError(f"{path}: parameter table does not match the stored config")
        for p, (name, shape) in zip(params, table):
            shape = tuple(shape)
            if p.data.shape != shape:
                raise ValueError(f"{path}: {name} has shape {shape}, expected {p.data.shape}")
            n_bytes = int(np.prod(shape, dtype=np.int64)) * wire.itemsize
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise ValueError(f"{path}: truncated while reading {name}")
            p.data[...] = np.frombuffer(raw, dtype=wire).reshape(shape).astype(config.np_dtype)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after the last parameter")
    return model, _box_from_dict(header["box"]), header
