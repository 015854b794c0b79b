"""Checkpoint directories: manifest.tsv + tensors.bin + state/config JSON.

The manifest lists ``name<TAB>shape<TAB>byte offset``; each blob record is a
shape-headed little-endian float64 tensor.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import tensor_to_bytes, tensor_from_bytes
from .config import RunConfig
from .model import TrainState

MANIFEST = "manifest.tsv"
BLOB = "tensors.bin"


class CheckpointError(ValueError):
    pass


def _named_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in state.adam.params.items()}
    for name in state.adam.params:
        arrays[f"adam.m.{name}"] = state.adam.m[name]
        arrays[f"adam.v.{name}"] = state.adam.v[name]
    return arrays


def save(state: TrainState, directory: str | Path) -> Path:
    """Write every parameter and optimizer moment, little-endian float64."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines, offset = [], 0
    with open(out / BLOB, "wb") as blob:
        for name, arr in sorted(_named_arrays(state).items()):
            raw = tensor_to_bytes(arr)
            blob.write(raw)
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}\n")
            offset += len(raw)
    (out / MANIFEST).write_text("".join(lines), encoding="utf-8")
    (out / "state.json").write_text(json.dumps(
        {"step": state.step, "adam_step": state.adam.step, "seed": state.config.seed}) + "\n",
        encoding="utf-8")
    (out / "config.json").write_text(state.config.to_json() + "\n", encoding="utf-8")
    return out


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def load(directory: str | Path, cfg: RunConfig | None = None) -> TrainState:
    """Rebuild a state; ``cfg`` defaults to the checkpoint's own config."""
    root = Path(directory)
    try:
        manifest = (root / MANIFEST).read_text(encoding="utf-8")
        blob = (root / BLOB).read_bytes()
        meta = json.loads((root / "state.json").read_text(encoding="utf-8"))
        if cfg is None:
            cfg = RunConfig.from_text((root / "config.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {root}: {exc}") from exc

    state = TrainState.create(cfg)
    arrays = _named_arrays(state)
    seen = set()
    for lineno, line in enumerate(manifest.splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, shape_text, offset_text = line.split("\t")
            shape, offset = _parse_shape(shape_text), int(offset_text)
        except ValueError as exc:
            raise CheckpointError(f"{root / MANIFEST}:{lineno}: malformed entry") from exc
        if name not in arrays:
            raise CheckpointError(f"checkpoint tensor {name!r} has no counterpart in the model")
        target = arrays[name]
        if tuple(target.shape) != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {shape}, model {tuple(target.shape)}")
        try:
            stored, _ = tensor_from_bytes(blob, offset)
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{name}: blob truncated or corrupt") from exc
        if stored.shape != shape:
            raise CheckpointError(f"{name}: blob header {stored.shape} disagrees with manifest {shape}")
        target[...] = stored.data
        seen.add(name)
    missing = sorted(set(arrays) - seen)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor(s): {', '.join(missing[:5])}"
                              + (" ..." if len(missing) > 5 else ""))
    state.step = int(meta["step"])
    state.adam.step = int(meta["adam_step"])
    return state
