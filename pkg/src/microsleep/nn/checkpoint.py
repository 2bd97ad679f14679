"""Checkpoints: a JSON manifest beside a raw little-endian float32 blob.

The manifest carries the model kind, architecture fields, ordered parameter
names and shapes, the construction seed, and training hyperparameters; the
blob holds every parameter's values flattened in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..data import atomic_write_bytes, atomic_write_text
from .autograd import Tensor

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(stem: str | Path, manifest: dict, params: dict[str, Tensor]) -> tuple[Path, Path]:
    stem = Path(stem)
    entries = [{"name": k, "shape": list(p.data.shape)} for k, p in params.items()]
    doc = dict(manifest)
    doc["format_version"] = CHECKPOINT_FORMAT_VERSION
    doc["params"] = entries
    blob = b"".join(p.data.astype("<f4").tobytes() for p in params.values())
    json_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    atomic_write_text(json_path, json.dumps(doc, indent=2) + "\n")
    atomic_write_bytes(bin_path, blob)
    return json_path, bin_path


def load_checkpoint(stem: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    stem = Path(stem)
    json_path = stem if stem.suffix == ".json" else stem.with_suffix(".json")
    bin_path = json_path.with_suffix(".bin")
    manifest = json.loads(json_path.read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {manifest.get('format_version')!r}"
        )
    blob = bin_path.read_bytes()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + count * 4
        if end > len(blob):
            raise CheckpointError(
                f"blob too short for parameter {entry['name']!r}: "
                f"need {end} bytes, have {len(blob)}"
            )
        params[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(
            entry["shape"]
        ).copy()
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"blob has {len(blob) - offset} trailing bytes")
    return manifest, params
