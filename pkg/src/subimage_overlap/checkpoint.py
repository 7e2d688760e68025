"""Single-file checkpoint archive.

Tensors are stored with safetensors (dtype/shape header per tensor); the
architecture id, provenance, model spec, resolved config, seed and a SHA-256
digest of the tensor payload travel in the string metadata.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .models.transfer import ParameterStore, check_arch

FORMAT = "subimage-overlap-checkpoint"
VERSION = "1"
_PARAM = "param/"
_RNG = "rng/torch"


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Checkpoint:
    store: ParameterStore
    config: dict = field(default_factory=dict)
    seed: int | None = None
    rng_state: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)


def _digest(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.contiguous().view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


def write_checkpoint(path, store: ParameterStore, config: dict | None = None, seed: int | None = None,
                     rng_state: torch.Tensor | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {_PARAM + k: v.detach().cpu().contiguous() for k, v in store.tensors.items()}
    if rng_state is not None:
        tensors[_RNG] = rng_state.detach().cpu().contiguous()
    metadata = {
        "format": FORMAT,
        "version": VERSION,
        "arch": store.arch,
        "provenance": store.provenance,
        "model": json.dumps(store.model, sort_keys=True),
        "config": json.dumps(config or {}, sort_keys=True),
        "seed": json.dumps(seed),
        "extra": json.dumps(extra or {}, sort_keys=True),
        "sha256": _digest(tensors),
    }
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata=metadata)
    tmp.replace(path)
    return path


def read_checkpoint(path, expected_arch: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        from safetensors import safe_open
        with safe_open(str(path), framework="pt") as fh:
            metadata = fh.metadata() or {}
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if metadata.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if metadata.get("version") != VERSION:
        raise CheckpointError(
            f"checkpoint version {metadata.get('version')!r} is not supported (expected {VERSION})"
        )
    if _digest(tensors) != metadata.get("sha256"):
        raise CheckpointError(f"corrupt checkpoint {path}: tensor digest mismatch")
    arch = metadata["arch"]
    if expected_arch is not None:
        check_arch(expected_arch)
        if arch != expected_arch:
            raise CheckpointError(
                f"checkpoint architecture {arch!r} does not match requested {expected_arch!r}"
            )
    params = {k[len(_PARAM):]: v for k, v in tensors.items() if k.startswith(_PARAM)}
    store = ParameterStore(params, arch, metadata["provenance"], json.loads(metadata["model"]))
    return Checkpoint(
        store=store,
        config=json.loads(metadata["config"]),
        seed=json.loads(metadata["seed"]),
        rng_state=tensors.get(_RNG),
        extra=json.loads(metadata["extra"]),
    )
