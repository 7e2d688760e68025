import hashlib

import numpy as np
import pytest
from PIL import Image

from subimage_overlap.core import ImageSample, SegmentationSample
from subimage_overlap.data import (
    DataError,
    DeepGlobe,
    LandCoverAI,
    LoveDA,
    allocate_val_split,
    assemble_tiles,
    crop,
    crop_window,
    decode_deepglobe_mask,
    generate_synthetic_dataset,
    prepare_deepglobe,
    preprocess,
    read_split_manifest,
    resize,
    tile_grid,
    write_split_manifest,
)
from subimage_overlap.data.adapters import DATA_ROOT_ENV, IGNORE_INDEX, resolve_root
from subimage_overlap.data.geometry import flip_pair
from subimage_overlap.task import FlipRecord


def seg(h, w, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    image = ImageSample("s", rng.random((h, w, 3)))
    return SegmentationSample(image, rng.integers(0, classes, (h, w)), classes)


def coordinate_sample(h, w):
    """Labels encode each pixel's (row, col); the red channel encodes them too."""
    labels = (np.arange(h)[:, None] * w + np.arange(w)[None, :]).astype(np.int64)
    pixels = np.zeros((h, w, 3), dtype=np.float32)
    pixels[..., 0] = labels / labels.max()
    return SegmentationSample(ImageSample("coords", pixels), labels, h * w)


def test_resize_contract():
    out = resize(seg(512, 512, classes=5), (224, 224))
    assert out.image.shape == (224, 224) and out.labels.shape == (224, 224)
    assert out.labels.min() >= 0 and out.labels.max() < 5


def test_resize_identity_is_bit_identical():
    s = seg(32, 40)
    out = resize(s, (32, 40))
    assert out.image.pixels.tobytes() == s.image.pixels.tobytes()
    assert np.array_equal(out.labels, s.labels)


def test_resize_constant_image():
    image = ImageSample("c", np.full((50, 70, 3), 0.3))
    out = resize(image, (224, 224))
    assert out.shape == (224, 224)
    np.testing.assert_allclose(out.pixels, 0.3, atol=1e-6)


def test_resize_rejects_non_positive():
    with pytest.raises(ValueError):
        resize(seg(4, 4), (0, 4))


def test_center_crop_window():
    assert crop_window((1024, 1024), 512, "center") == (256, 256)
    s = seg(512, 512)
    for mode in ("center", "random"):
        out = crop(s, 512, mode, np.random.default_rng(0))
        assert np.array_equal(out.labels, s.labels)
    with pytest.raises(ValueError):
        crop(seg(100, 100), 512, "center")


def test_random_crop_reproducible():
    a = crop_window((1000, 900), 512, "random", np.random.default_rng(4))
    b = crop_window((1000, 900), 512, "random", np.random.default_rng(4))
    assert a == b


def test_geometric_ops_move_image_and_labels_together():
    s = coordinate_sample(40, 48)
    rng = np.random.default_rng(0)
    out = crop(s, 24, "random", rng)
    np.testing.assert_allclose(out.image.pixels[..., 0], out.labels / (40 * 48 - 1), atol=1e-6)
    flipped = flip_pair(s, FlipRecord(True, True))
    np.testing.assert_allclose(flipped.image.pixels[..., 0], flipped.labels / (40 * 48 - 1),
                               atol=1e-6)
    for tile in tile_grid(s, 4):
        np.testing.assert_allclose(tile.sample.image.pixels[..., 0],
                                   tile.sample.labels / (40 * 48 - 1), atol=1e-6)
    up = resize(s, (80, 96))
    # nearest labels index back into the source at the same place the image was sampled
    rows, cols = up.labels // 48, up.labels % 48
    assert np.abs(rows - np.arange(80)[:, None] / 2).max() <= 1
    assert np.abs(cols - np.arange(96)[None, :] / 2).max() <= 1


def test_tile_counts_and_names():
    image = ImageSample("scene", np.zeros((2448, 2448, 3), dtype=np.float32))
    tiles = tile_grid(image, 4)
    assert len(tiles) == 16
    assert all(t.sample.shape == (612, 612) for t in tiles)
    assert tiles[6].sample.id == "scene_1_2" and tiles[6].index == 6


def test_tiles_reassemble_and_truncate():
    s = seg(10, 10)
    tiles = tile_grid(s, 4)
    assert all(t.sample.image.shape == (2, 2) for t in tiles)
    assert tiles[0].truncated == (2, 2)
    np.testing.assert_array_equal(assemble_tiles(tiles, 4), s.image.pixels[:8, :8])


def test_deepglobe_pipeline_output_dims():
    s = seg(2448, 2448, classes=6)
    rng = np.random.default_rng(0)
    for tile in tile_grid(s, 4)[:3]:
        out = preprocess(tile.sample, (400, 400), 512, "train", rng)
        assert out.image.shape == (400, 400) and out.labels.shape == (400, 400)


def test_val_split_sizes():
    split = allocate_val_split([f"i{k}" for k in range(100)], 0.2, seed=1)
    assert len(split.val) == 20 and len(split.train) == 80
    assert not set(split.val) & set(split.train)
    assert len(allocate_val_split([f"i{k}" for k in range(10)], 0.999, 0).val) == 9
    with pytest.raises(ValueError):
        allocate_val_split([], 0.2)


def test_manifest_bytes_stable(tmp_path):
    ids = [f"i{k}" for k in range(50)]
    a = allocate_val_split(ids, 0.2, 7)
    b = allocate_val_split(ids, 0.2, 7)
    pa = write_split_manifest(tmp_path / "a.txt", a.val, "val", 7, 0.2)
    pb = write_split_manifest(tmp_path / "b.txt", b.val, "val", 7, 0.2)
    assert pa.read_bytes() == pb.read_bytes()
    read, header = read_split_manifest(pa)
    assert read == list(a.val) and header["seed"] == "7" and header["fraction"] == "0.2"


def test_synthetic_properties():
    data = generate_synthetic_dataset(200, (64, 64), 3, seed=0)
    samples = list(data.iter_split("train")) + list(data.iter_split("val"))
    assert len(samples) == 200
    labels = np.stack([s.labels for s in samples])
    assert set(np.unique(labels)) <= {0, 1, 2}
    for c in range(3):
        present = np.mean([(s.labels == c).any() for s in samples])
        assert present >= 0.9, (c, present)
    assert all(s.image.shape == (64, 64) for s in samples)


def test_synthetic_determinism():
    def digest(seed):
        data = generate_synthetic_dataset(10, (32, 32), 3, seed=seed)
        h = hashlib.sha256()
        for split in ("train", "val"):
            for s in data.iter_split(split):
                h.update(s.image.pixels.tobytes())
                h.update(s.labels.tobytes())
        return h.hexdigest()
    assert digest(0) == digest(0)
    assert digest(0) != digest(1)


def _png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def test_landcoverai_layout(tmp_path):
    rng = np.random.default_rng(0)
    (tmp_path / "output").mkdir()
    for name in ("a", "b", "c"):
        Image.fromarray(rng.integers(0, 255, (16, 16, 3), dtype=np.uint8)).save(
            tmp_path / "output" / f"{name}.jpg")
        _png(tmp_path / "output" / f"{name}_m.png", rng.integers(0, 5, (16, 16), dtype=np.uint8))
    (tmp_path / "train.txt").write_text("a\nb\n")
    (tmp_path / "val.txt").write_text("c\n")
    (tmp_path / "test.txt").write_text("")
    data = LandCoverAI(tmp_path)
    data.check()
    assert data.summary() == {"train": 2, "val": 1, "test": 0}
    s = data.load("train", "a")
    assert s.image.shape == (16, 16) and s.labels.max() < 5


def test_landcoverai_missing_files_named(tmp_path):
    with pytest.raises(DataError, match="output"):
        LandCoverAI(tmp_path).check()


def test_loveda_layout_and_label_shift(tmp_path):
    for split in ("Train", "Val"):
        for domain in ("Urban", "Rural"):
            base = tmp_path / split / domain
            _png(base / "images_png" / "1.png", np.zeros((8, 8, 3), dtype=np.uint8))
            mask = np.zeros((8, 8), dtype=np.uint8)
            mask[:, 4:] = 3
            _png(base / "masks_png" / "1.png", mask)
    data = LoveDA(tmp_path)
    data.check()
    assert data.split_ids("train") == ["Urban/1", "Rural/1"]
    s = data.load("val", "Rural/1")
    assert (s.labels[:, :4] == IGNORE_INDEX).all() and (s.labels[:, 4:] == 2).all()


def test_loveda_missing_masks_named(tmp_path):
    (tmp_path / "Train" / "Urban" / "images_png").mkdir(parents=True)
    with pytest.raises(DataError, match="masks_png"):
        LoveDA(tmp_path, domains=("Urban",)).check()


def test_deepglobe_decode():
    rgb = np.array([[[0, 255, 255], [255, 255, 0]], [[0, 0, 0], [250, 250, 250]]], dtype=np.uint8)
    np.testing.assert_array_equal(decode_deepglobe_mask(rgb), [[0, 1], [IGNORE_INDEX, 5]])


def test_deepglobe_prepare_is_deterministic(tmp_path):
    raw = tmp_path / "raw" / "train"
    rng = np.random.default_rng(0)
    colours = np.array([[0, 255, 255], [255, 255, 0], [0, 255, 0]], dtype=np.uint8)
    raw.mkdir(parents=True)
    for k in range(5):
        Image.fromarray(rng.integers(0, 255, (16, 16, 3), dtype=np.uint8)).save(raw / f"{k}_sat.jpg")
        _png(raw / f"{k}_mask.png", colours[rng.integers(0, 3, (16, 16))])
    outs = []
    for run in ("x", "y"):
        summary = prepare_deepglobe(tmp_path / "raw", tmp_path / run, 0.2, seed=7)
        assert summary == {"train": 64, "val": 16, "scenes": 5}
        outs.append((tmp_path / run / "splits" / "val.txt").read_bytes())
    assert outs[0] == outs[1]
    data = DeepGlobe(tmp_path / "x")
    data.check()
    val_parents = set(data.parent_ids("val"))
    assert not val_parents & set(data.parent_ids("train"))
    tile = data.load("val", data.split_ids("val")[0])
    assert tile.image.shape == (4, 4) and tile.labels.shape == (4, 4)


def test_deepglobe_missing_mask_is_actionable(tmp_path):
    raw = tmp_path / "train"
    raw.mkdir()
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(raw / "9_sat.jpg")
    with pytest.raises(DataError, match="9_mask.png"):
        prepare_deepglobe(tmp_path, tmp_path / "out")


def test_data_root_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
    (tmp_path / "loveda").mkdir()
    assert resolve_root(None, "loveda") == tmp_path / "loveda"
    assert resolve_root(None, "landcoverai") == tmp_path
    monkeypatch.delenv(DATA_ROOT_ENV)
    with pytest.raises(DataError, match=DATA_ROOT_ENV):
        resolve_root(None, "loveda")
