"""Checkpoint blob store: one .npy per tensor plus a JSON manifest with hashes.

Round trips are bit-exact; a corrupted blob fails the whole load (hashes are
verified before any state is returned).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def tensor_sha256(t: torch.Tensor) -> str:
    arr = t.detach().cpu().contiguous().numpy()
    return hashlib.sha256(arr.tobytes() + str(arr.dtype).encode() + str(arr.shape).encode()).hexdigest()


def state_hash(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(tensor_sha256(state[name]).encode())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return state_hash(dict(module.state_dict()))


def save_state(state: dict[str, torch.Tensor], out_dir: str | Path,
               extra: dict | None = None) -> None:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, name in enumerate(sorted(state)):
        arr = state[name].detach().cpu().contiguous().numpy()
        fname = f"tensors/{idx:04d}.npy"
        np.save(out / fname, arr)
        entries.append({
            "name": name,
            "file": fname,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "state_hash": state_hash(state),
        "tensors": entries,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_state(in_dir: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Verify and load every tensor before returning; no partial state escapes."""
    src = Path(in_dir)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint manifest in {src}: {e}") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint schema {manifest.get('schema_version')} != supported {SCHEMA_VERSION}")
    state: dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        path = src / entry["file"]
        try:
            arr = np.load(path)
        except (OSError, ValueError) as e:
            raise CheckpointError(f"unreadable tensor blob {path}: {e}") from e
        if hashlib.sha256(arr.tobytes()).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"hash mismatch for {entry['name']} in {path}")
        if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
            raise CheckpointError(f"shape/dtype mismatch for {entry['name']}")
        state[entry["name"]] = torch.from_numpy(arr)
    return state, manifest
