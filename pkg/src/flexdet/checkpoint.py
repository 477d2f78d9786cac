"""Checkpoints: manifest.json (parameter names, shapes, dtype, config
hash, iteration) plus params.bin, little-endian float32 concatenated in
manifest order. Round-trips are byte-exact."""

from __future__ import annotations

import json
import os

import numpy as np

from .config import DetectorConfig, config_hash, detector_config_from_dict
from .model import Detector


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: Detector, directory: str, iteration: int) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = []
    blobs = []
    for name, p in model.named_parameters():
        entries.append({"name": name, "shape": list(p.values.shape), "dtype": "f4"})
        blobs.append(np.ascontiguousarray(p.values.astype("<f4")).tobytes())
    manifest = {
        "format": "flexdet-checkpoint-v1",
        "iteration": iteration,
        "config_hash": config_hash(model.cfg),
        "config": json.loads(_config_json(model.cfg)),
        "params": entries,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(directory: str, cfg: DetectorConfig | None = None) -> tuple[Detector, int]:
    """Rebuild the model from a checkpoint directory. When ``cfg`` is given
    its hash must match the stored one; otherwise the stored config is used."""
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as err:
        raise CheckpointError(f"no manifest at {manifest_path}") from err
    stored_cfg = detector_config_from_dict(manifest["config"])
    if cfg is not None and config_hash(cfg) != manifest["config_hash"]:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {manifest['config_hash']}, "
            f"requested {config_hash(cfg)}"
        )
    model = Detector(stored_cfg)
    params = dict(model.named_parameters())
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        raw = fh.read()
    offset = 0
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in params:
            raise CheckpointError(f"unknown parameter in checkpoint: {name}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype="<f4").reshape(shape)
        if params[name].values.shape != shape:
            raise CheckpointError(f"shape mismatch for {name}")
        params[name].values = arr.astype(params[name].values.dtype).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError("params.bin size does not match the manifest")
    return model, int(manifest["iteration"])


def _config_json(cfg: DetectorConfig) -> str:
    from dataclasses import asdict

    return json.dumps(asdict(cfg), sort_keys=True)
