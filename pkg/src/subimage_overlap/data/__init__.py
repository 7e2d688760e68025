from .adapters import (
    ADAPTERS,
    DATA_ROOT_ENV,
    DataError,
    DatasetAdapter,
    DeepGlobe,
    InMemoryDataset,
    LandCoverAI,
    LoveDA,
    decode_deepglobe_mask,
    open_dataset,
    prepare_deepglobe,
)
from .geometry import Tile, assemble_tiles, crop, crop_window, preprocess, resize, tile_grid
from .splits import allocate_val_split, read_split_manifest, write_split_manifest
from .synthetic import generate_synthetic_dataset

__all__ = [
    "ADAPTERS", "DATA_ROOT_ENV", "DataError", "DatasetAdapter", "DeepGlobe", "InMemoryDataset",
    "LandCoverAI", "LoveDA", "Tile", "allocate_val_split", "assemble_tiles", "crop",
    "crop_window", "decode_deepglobe_mask", "generate_synthetic_dataset", "open_dataset", "prepare_deepglobe",
    "preprocess", "read_split_manifest", "resize", "tile_grid", "write_split_manifest",
]
