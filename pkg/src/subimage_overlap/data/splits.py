"""Fixed train/validation allocation and split manifest files."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from ..core import SplitAssignment


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def allocate_val_split(train_ids, fraction: float = 0.2, seed: int = 0) -> SplitAssignment:
    """Move a seeded random ``fraction`` of ``train_ids`` into validation.

    The validation size is ``round(fraction * N)`` clamped so both sides keep
    at least one id. Both lists keep the input order.
    """
    ids = list(train_ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    n = len(ids)
    n_val = min(max(round_half_up(fraction * n), 1), n - 1) if n > 1 else 0
    order = np.random.default_rng(seed).permutation(n)
    chosen = set(order[:n_val].tolist())
    val = [x for i, x in enumerate(ids) if i in chosen]
    train = [x for i, x in enumerate(ids) if i not in chosen]
    return SplitAssignment(train=train, val=val, seed=seed, fraction=fraction)


def write_split_manifest(path, ids, split: str, seed: int | None = None,
                         fraction: float | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# split: {split}"]
    if seed is not None:
        lines.append(f"# seed: {seed}")
    if fraction is not None:
        lines.append(f"# fraction: {fraction}")
    lines.extend(ids)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_split_manifest(path) -> tuple[list[str], dict]:
    header, ids = {}, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
        else:
            ids.append(line)
    return ids, header


def write_assignment(directory, assignment: SplitAssignment) -> dict[str, Path]:
    out = {}
    for split in ("train", "val", "test"):
        ids = assignment.ids(split)
        if ids or split != "test":
            out[split] = write_split_manifest(
                Path(directory) / f"{split}.txt", ids, split,
                assignment.seed, assignment.fraction,
            )
    return out
