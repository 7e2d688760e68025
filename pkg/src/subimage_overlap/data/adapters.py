"""Dataset adapters.

Expected layouts (the user downloads the data; nothing is fetched here):

LandCoverAI (after the dataset's own ``split.py`` tiling)::

    root/output/<id>.jpg        RGB 512x512 tiles
    root/output/<id>_m.png      single-band class masks, 0..4
    root/train.txt, val.txt, test.txt

LoveDA::

    root/Train/{Urban,Rural}/images_png/<n>.png
    root/Train/{Urban,Rural}/masks_png/<n>.png     0 = no-data, 1..7 classes
    root/Val/...

DeepGlobe land cover, as written by ``prepare-data``::

    root/tiles/<parent>_<r>_<c>_sat.png
    root/tiles/<parent>_<r>_<c>_mask.png           class indices, 255 = unknown
    root/splits/train.txt, val.txt                 parent scene ids

The raw DeepGlobe download (``root/train/<id>_sat.jpg`` plus RGB-coded
``<id>_mask.png``) is the input of :func:`prepare_deepglobe`.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from ..core import ImageSample, SegmentationSample, SplitAssignment
from .geometry import tile_grid, tile_name
from .splits import allocate_val_split, read_split_manifest, write_assignment

DATA_ROOT_ENV = "SUBIMAGE_OVERLAP_DATA_ROOT"
IGNORE_INDEX = 255


class DataError(RuntimeError):
    """Dataset files are missing or malformed."""


def resolve_root(root=None, dataset: str | None = None) -> Path:
    """Explicit root, else ``$SUBIMAGE_OVERLAP_DATA_ROOT[/<dataset>]``."""
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ROOT_ENV)
    if not env:
        raise DataError(f"no dataset root given and {DATA_ROOT_ENV} is not set")
    base = Path(env)
    if dataset and (base / dataset).is_dir():
        return base / dataset
    return base


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            im = im.convert("L")
        return np.asarray(im).astype(np.int64)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: expected {path}")
    return path


class DatasetAdapter:
    """Read-only access to the samples of named splits."""

    name = "dataset"
    num_classes = 2
    ignore_index: int | None = None
    #: side of the square crop taken before resizing, or None
    crop_size: int | None = None

    def split_ids(self, split: str) -> list[str]:
        raise NotImplementedError

    def load(self, split: str, sample_id: str) -> SegmentationSample:
        raise NotImplementedError

    @property
    def splits(self) -> tuple[str, ...]:
        return ("train", "val")

    def __len__(self):
        return sum(len(self.split_ids(s)) for s in self.splits)

    def iter_split(self, split: str):
        for sid in self.split_ids(split):
            yield self.load(split, sid)

    def summary(self) -> dict[str, int]:
        return {s: len(self.split_ids(s)) for s in self.splits}


class InMemoryDataset(DatasetAdapter):
    def __init__(self, name, num_classes, splits: dict, ignore_index=None, crop_size=None,
                 assignment: SplitAssignment | None = None):
        self.name = name
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.crop_size = crop_size
        self.assignment = assignment
        self._splits = {k: list(v) for k, v in splits.items()}
        self._index = {k: {s.id: s for s in v} for k, v in self._splits.items()}

    @property
    def splits(self):
        return tuple(self._splits)

    def split_ids(self, split):
        if split not in self._splits:
            raise DataError(f"{self.name} has no {split!r} split")
        return [s.id for s in self._splits[split]]

    def load(self, split, sample_id):
        return self._index[split][sample_id]

    def subset(self, split: str, ids) -> "InMemoryDataset":
        splits = dict(self._splits)
        keep = set(ids)
        splits[split] = [s for s in self._splits[split] if s.id in keep]
        return InMemoryDataset(self.name, self.num_classes, splits, self.ignore_index,
                               self.crop_size)

    @classmethod
    def from_arrays(cls, images, labels=None, num_classes=2, val_images=None, val_labels=None,
                    name="arrays", ignore_index=None):
        def build(prefix, xs, ys):
            out = []
            for i, x in enumerate(xs):
                image = ImageSample(f"{prefix}{i:06d}", x, name)
                y = np.zeros(image.shape, dtype=np.int64) if ys is None else ys[i]
                out.append(SegmentationSample(image, y, num_classes, ignore_index))
            return out
        splits = {"train": build("train", images, labels)}
        if val_images is not None:
            splits["val"] = build("val", val_images, val_labels)
        return cls(name, num_classes, splits, ignore_index)


class LandCoverAI(DatasetAdapter):
    name = "landcoverai"
    num_classes = 5
    crop_size = None

    def __init__(self, root=None):
        self.root = resolve_root(root, self.name)
        self._ids = {}

    @property
    def splits(self):
        return ("train", "val", "test")

    def check(self):
        _require(self.root / "output", "LandCoverAI tile directory")
        for s in self.splits:
            _require(self.root / f"{s}.txt", f"LandCoverAI {s} list")

    def split_ids(self, split):
        if split not in self._ids:
            path = _require(self.root / f"{split}.txt", f"LandCoverAI {split} list")
            self._ids[split] = [x for x in read_split_manifest(path)[0]]
        return self._ids[split]

    def load(self, split, sample_id):
        out = self.root / "output"
        pixels = load_rgb(_require(out / f"{sample_id}.jpg", "image"))
        labels = load_mask(_require(out / f"{sample_id}_m.png", "mask"))
        return SegmentationSample(ImageSample(sample_id, pixels, self.name), labels,
                                  self.num_classes)


class LoveDA(DatasetAdapter):
    name = "loveda"
    num_classes = 7
    ignore_index = IGNORE_INDEX
    crop_size = 512
    _dirs = {"train": "Train", "val": "Val"}

    def __init__(self, root=None, domains=("Urban", "Rural")):
        self.root = resolve_root(root, self.name)
        self.domains = tuple(domains)
        self._ids = {}

    def _split_dir(self, split):
        if split not in self._dirs:
            raise DataError(f"LoveDA labels exist only for {sorted(self._dirs)}")
        return self.root / self._dirs[split]

    def check(self):
        for split in self._dirs:
            for d in self.domains:
                _require(self._split_dir(split) / d / "images_png", "LoveDA images directory")
                _require(self._split_dir(split) / d / "masks_png", "LoveDA masks directory")

    def split_ids(self, split):
        if split not in self._ids:
            ids = []
            for d in self.domains:
                img_dir = _require(self._split_dir(split) / d / "images_png", "LoveDA images directory")
                ids += [f"{d}/{p.stem}" for p in sorted(img_dir.glob("*.png"), key=_natural)]
            self._ids[split] = ids
        return self._ids[split]

    def load(self, split, sample_id):
        domain, stem = sample_id.split("/")
        base = self._split_dir(split) / domain
        pixels = load_rgb(_require(base / "images_png" / f"{stem}.png", "image"))
        raw = load_mask(_require(base / "masks_png" / f"{stem}.png", "mask"))
        labels = np.where(raw == 0, IGNORE_INDEX, raw - 1)
        return SegmentationSample(ImageSample(sample_id, pixels, self.name), labels,
                                  self.num_classes, IGNORE_INDEX)


def _natural(path: Path):
    return (0, int(path.stem)) if path.stem.isdigit() else (1, path.stem)


# RGB codes of the DeepGlobe land-cover masks; "unknown" (black) is ignored
DEEPGLOBE_COLORS = {
    (0, 255, 255): 0,    # urban
    (255, 255, 0): 1,    # agriculture
    (255, 0, 255): 2,    # rangeland
    (0, 255, 0): 3,      # forest
    (0, 0, 255): 4,      # water
    (255, 255, 255): 5,  # barren
    (0, 0, 0): IGNORE_INDEX,
}


def decode_deepglobe_mask(rgb: np.ndarray) -> np.ndarray:
    """Map RGB mask codes to class indices, thresholding JPEG-ish noise at 128."""
    bits = (np.asarray(rgb) >= 128).astype(np.int64)
    out = np.full(bits.shape[:2], IGNORE_INDEX, dtype=np.int64)
    for (r, g, b), cls in DEEPGLOBE_COLORS.items():
        hit = (bits[..., 0] == r // 255) & (bits[..., 1] == g // 255) & (bits[..., 2] == b // 255)
        out[hit] = cls
    return out


class DeepGlobe(DatasetAdapter):
    name = "deepglobe"
    num_classes = 6
    ignore_index = IGNORE_INDEX
    crop_size = 512

    def __init__(self, root=None, grid: int = 4):
        self.root = resolve_root(root, self.name)
        self.grid = grid
        self._ids = {}

    def check(self):
        for s in self.splits:
            _require(self.root / "splits" / f"{s}.txt",
                     "DeepGlobe split manifest (run prepare-data first)")
        _require(self.root / "tiles", "DeepGlobe tile directory (run prepare-data first)")

    def parent_ids(self, split):
        path = _require(self.root / "splits" / f"{split}.txt",
                        "DeepGlobe split manifest (run prepare-data first)")
        return read_split_manifest(path)[0]

    def split_ids(self, split):
        if split not in self._ids:
            self._ids[split] = [tile_name(p, r, c) for p in self.parent_ids(split)
                                for r in range(self.grid) for c in range(self.grid)]
        return self._ids[split]

    def load(self, split, sample_id):
        tiles = self.root / "tiles"
        pixels = load_rgb(_require(tiles / f"{sample_id}_sat.png", "tile image"))
        labels = load_mask(_require(tiles / f"{sample_id}_mask.png", "tile mask"))
        return SegmentationSample(ImageSample(sample_id, pixels, self.name), labels,
                                  self.num_classes, IGNORE_INDEX)


def prepare_deepglobe(raw_root, out_root=None, fraction: float = 0.2, seed: int = 0,
                      grid: int = 4) -> dict:
    """Tile every labelled scene into a grid, save tiles, and fix a scene-level val split."""
    raw_root = Path(raw_root)
    out_root = Path(out_root) if out_root is not None else raw_root
    train_dir = _require(raw_root / "train", "DeepGlobe train directory")
    scenes = sorted(p.name[: -len("_sat.jpg")] for p in train_dir.glob("*_sat.jpg"))
    if not scenes:
        raise DataError(f"no *_sat.jpg images found in {train_dir}")
    missing = [s for s in scenes if not (train_dir / f"{s}_mask.png").exists()]
    if missing:
        raise DataError(
            f"missing masks for {len(missing)} scenes, e.g. expected {train_dir / (missing[0] + '_mask.png')}"
        )
    tiles_dir = out_root / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        pixels = np.asarray(Image.open(train_dir / f"{scene}_sat.jpg").convert("RGB"))
        with Image.open(train_dir / f"{scene}_mask.png") as im:
            labels = decode_deepglobe_mask(np.asarray(im.convert("RGB")))
        sample = SegmentationSample(ImageSample(scene, pixels / 255.0, "deepglobe"), labels,
                                    DeepGlobe.num_classes, IGNORE_INDEX)
        for tile in tile_grid(sample, grid):
            r, c = tile.row, tile.col
            th, tw = tile.sample.image.shape
            window = (slice(r * th, (r + 1) * th), slice(c * tw, (c + 1) * tw))
            Image.fromarray(pixels[window]).save(tiles_dir / f"{tile.sample.id}_sat.png")
            Image.fromarray(tile.sample.labels.astype(np.uint8)).save(
                tiles_dir / f"{tile.sample.id}_mask.png")
    assignment = allocate_val_split(scenes, fraction, seed)
    write_assignment(out_root / "splits", assignment)
    return {"train": len(assignment.train) * grid * grid, "val": len(assignment.val) * grid * grid,
            "scenes": len(scenes)}


ADAPTERS = {"landcoverai": LandCoverAI, "loveda": LoveDA, "deepglobe": DeepGlobe}


def open_dataset(name: str, root=None) -> DatasetAdapter:
    if name not in ADAPTERS:
        raise DataError(f"unknown dataset {name!r}; choose from {sorted(ADAPTERS)} or 'synthetic'")
    return ADAPTERS[name](root)
