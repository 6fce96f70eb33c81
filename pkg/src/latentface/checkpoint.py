"""Language-neutral checkpoints: raw float32 tensors plus a JSON index.

A checkpoint is a directory of one `.f32` file per named tensor and an
`index.json` recording name, shape, dtype, per-file sha256, a component
version string, and free-form metadata. The overall checkpoint hash is
the sha256 of the sorted (name, file-hash) pairs, so any byte flip is
detectable and ledger entries can pin exact parameters.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DependencyError
from .utils import read_json, sha256_bytes, sha256_file, write_json

FORMAT_VERSION = "ckpt-v1"


def _tensor_filename(name: str) -> str:
    return name.replace("/", "__") + ".f32"


def save_checkpoint(path, tensors: dict, component_version: str, meta: dict = None) -> str:
    """Write tensors (anything array-like) as float32; returns the checkpoint hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=np.float32)
        fname = _tensor_filename(name)
        data = arr.tobytes()
        with open(path / fname, "wb") as fh:
            fh.write(data)
        entries.append(
            {
                "name": name,
                "file": fname,
                "shape": list(arr.shape),
                "dtype": "float32",
                "sha256": sha256_bytes(data),
            }
        )
    overall = sha256_bytes(
        "\n".join(f"{e['name']}:{e['sha256']}" for e in entries).encode()
    )
    write_json(
        path / "index.json",
        {
            "format": FORMAT_VERSION,
            "component_version": component_version,
            "checkpoint_sha256": overall,
            "meta": meta or {},
            "tensors": entries,
        },
    )
    return overall


def load_checkpoint(path, expected_version: str = None, verify: bool = True):
    """Load tensors and index; raises DependencyError on corruption/mismatch."""
    path = Path(path)
    index_path = path / "index.json"
    if not index_path.exists():
        raise DependencyError(f"no checkpoint at {path}")
    index = read_json(index_path)
    if index.get("format") != FORMAT_VERSION:
        raise DependencyError(f"unsupported checkpoint format in {index_path}")
    if expected_version is not None and index["component_version"] != expected_version:
        raise DependencyError(
            f"checkpoint {path} has component version "
            f"{index['component_version']!r}, need {expected_version!r}"
        )
    tensors = {}
    for entry in index["tensors"]:
        fpath = path / entry["file"]
        if not fpath.exists():
            raise DependencyError(f"checkpoint tensor file missing: {fpath}")
        if verify and sha256_file(fpath) != entry["sha256"]:
            raise DependencyError(f"checkpoint tensor corrupted: {fpath}")
        arr = np.fromfile(fpath, dtype=np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, index


def checkpoint_hash(path) -> str:
    index = read_json(Path(path) / "index.json")
    return index["checkpoint_sha256"]


def verify_checkpoint(path) -> list:
    """Return a list of problems (empty means intact)."""
    path = Path(path)
    problems = []
    index_path = path / "index.json"
    if not index_path.exists():
        return [f"missing index.json in {path}"]
    index = read_json(index_path)
    for entry in index.get("tensors", []):
        fpath = path / entry["file"]
        if not fpath.exists():
            problems.append(f"missing tensor file {fpath}")
        elif sha256_file(fpath) != entry["sha256"]:
            problems.append(f"hash mismatch in {fpath}")
    return problems


# ---------------------------------------------------------------------------
# torch bridges

def module_tensors(module) -> dict:
    """Named parameters + buffers of a torch module as numpy float32."""
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
    }


def load_module(module, tensors: dict) -> None:
    import torch

    state = {name: torch.from_numpy(np.array(arr)) for name, arr in tensors.items()}
    module.load_state_dict(state)


def optimizer_tensors(optimizer) -> dict:
    """Adam state flattened to named float32 tensors (step counts as scalars)."""
    out = {}
    for gi, group in enumerate(optimizer.state_dict()["state"].items()):
        pid, state = group
        for key, value in state.items():
            name = f"opt/{pid}/{key}"
            if hasattr(value, "numpy"):
                out[name] = value.detach().cpu().numpy().astype(np.float32)
            else:
                out[name] = np.array([float(value)], dtype=np.float32)
        del gi
    return out


def load_optimizer(optimizer, tensors: dict) -> None:
    import torch

    state_dict = optimizer.state_dict()
    state = {}
    for name, arr in tensors.items():
        _, pid, key = name.split("/")
        entry = state.setdefault(int(pid), {})
        if key == "step":
            entry[key] = torch.tensor(float(arr[0]))
        else:
            entry[key] = torch.from_numpy(np.array(arr))
    state_dict["state"] = state
    optimizer.load_state_dict(state_dict)
