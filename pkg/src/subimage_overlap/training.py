"""Pretraining and finetuning loops."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import write_checkpoint
from .core import ImageSample
from .data.adapters import DatasetAdapter
from .data.geometry import flip_pair, preprocess
from .data.splits import round_half_up
from .models.transfer import (
    PROVENANCES,
    ModelSpec,
    ParameterStore,
    build_downstream_segmenter,
    build_pretrain_model,
    check_arch,
)
from .models.vit import joint_sequence_length
from .objectives import (
    OVERLAP_ALPHA,
    OVERLAP_GAMMA,
    ConfusionMatrix,
    accumulate_confusion,
    focal_loss,
    inverse_sqrt_class_weights,
    miou,
    pixel_counts,
)
from .task import AugmentationConfig, FlipRecord, assemble_pretrain_example, select_subimage

log = logging.getLogger(__name__)

#: fixed rng "epoch" used for validation examples so they do not change across epochs
_VAL_STREAM = 0


@dataclass
class TrainConfig:
    task: str = "pretrain"
    arch: str = "vit"
    epochs: int = 150
    batch_size: int = 64
    initial_lr: float = 1e-4
    weight_decay: float = 0.01
    loss: str = "focal"
    gamma: float = OVERLAP_GAMMA
    alpha_policy: str = "fixed"
    alpha: tuple = OVERLAP_ALPHA
    class_count_floor: int | None = None
    flip: bool = True
    jitter: bool = False
    label_fraction: float = 1.0
    seed: int = 0
    resolution: int = 224
    subimage_size: int = 112
    freeze_subimages: bool = False
    crop_size: int | None = None
    patch_size: int = 14
    vit_dim: int = 384
    vit_depth: int = 12
    vit_heads: int = 6
    pos_grid: int | None = None
    layerscale: float = 1.0
    cnn_depth: str = "resnet50"
    fusion_channels: int | None = None
    device: str = "auto"
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.alpha, list):
            self.alpha = tuple(self.alpha)
        self.validate()

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(task="finetune", epochs=100, batch_size=128, alpha_policy="inverse_sqrt",
                    flip=False, alpha=())
        return cls(**{**base, **overrides})

    def validate(self) -> None:
        if self.task not in ("pretrain", "finetune"):
            raise ValueError(f"task must be 'pretrain' or 'finetune', got {self.task!r}")
        check_arch(self.arch)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.label_fraction <= 1:
            raise ValueError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.loss not in ("focal", "ce"):
            raise ValueError(f"loss must be 'focal' or 'ce', got {self.loss!r}")
        if self.alpha_policy not in ("fixed", "inverse_sqrt", "none"):
            raise ValueError(f"unknown alpha_policy {self.alpha_policy!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.task == "pretrain" and self.subimage_size > self.resolution:
            raise ValueError(
                f"subimage_size {self.subimage_size} exceeds resolution {self.resolution}"
            )
        if self.arch == "vit":
            if self.resolution % self.patch_size:
                raise ValueError(
                    f"resolution {self.resolution} is not a multiple of patch size {self.patch_size}"
                )
            if self.task == "pretrain" and self.subimage_size % self.patch_size:
                raise ValueError(
                    f"subimage_size {self.subimage_size} is not a multiple of patch size "
                    f"{self.patch_size}"
                )

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            arch=self.arch, patch_size=self.patch_size, dim=self.vit_dim, depth=self.vit_depth,
            num_heads=self.vit_heads, pos_grid=self.pos_grid or self.resolution // self.patch_size,
            layerscale=self.layerscale, cnn_depth=self.cnn_depth,
            fusion_channels=self.fusion_channels,
        )

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(flip_enabled=self.flip, jitter_enabled=self.jitter)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = list(self.alpha)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = sorted(set(data) - set(cls.keys()))
        if unknown:
            raise KeyError(f"unknown config keys {unknown}; valid keys: {cls.keys()}")
        return cls(**data)

    def sequence_length(self) -> int | None:
        if self.arch != "vit":
            return None
        return joint_sequence_length((self.resolution,) * 2, (self.subimage_size,) * 2,
                                     self.patch_size)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    split: str
    loss: float
    per_class_iou: tuple
    miou: float
    seconds: float
    lr: float

    def to_json(self) -> str:
        iou = [None if (v is None or math.isnan(v)) else float(v) for v in self.per_class_iou]
        return json.dumps({
            "epoch": self.epoch, "split": self.split, "loss": self.loss,
            "per_class_iou": iou, "miou": self.miou, "seconds": self.seconds, "lr": self.lr,
        })

    @classmethod
    def from_json(cls, line: str) -> "EpochRecord":
        d = json.loads(line)
        d["per_class_iou"] = tuple(float("nan") if v is None else v for v in d["per_class_iou"])
        return cls(**d)


class RunLog:
    """Append-only sequence of epoch records, optionally mirrored to a JSONL file."""

    def __init__(self, path=None, name: str = ""):
        self.records: list[EpochRecord] = []
        self.path = Path(path) if path is not None else None
        self.name = name
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: EpochRecord) -> None:
        previous = [r.epoch for r in self.records if r.split == record.split]
        if previous and record.epoch <= previous[-1]:
            raise ValueError(f"epoch {record.epoch} does not follow {previous[-1]}")
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(record.to_json() + "\n")

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def split(self, split: str) -> list[EpochRecord]:
        return [r for r in self.records if r.split == split]

    def curve(self, split: str = "val") -> list[float]:
        return [r.miou for r in self.split(split)]

    @classmethod
    def read(cls, path) -> "RunLog":
        out = cls(name=Path(path).parent.name)
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.append(EpochRecord.from_json(line))
        return out


def cosine_lr(initial_lr: float, epoch: float, total: int) -> float:
    """Cosine annealing to zero: ``lr0 * 0.5 * (1 + cos(pi * epoch / total))``."""
    return initial_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


def subsample_labels(train_ids, fraction: float, seed: int) -> list:
    """Seeded subset of ``round(fraction * N)`` ids in their original order.

    Subsets of one seed are nested: a smaller fraction always selects a
    prefix of the same random permutation.
    """
    ids = list(train_ids)
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return ids
    k = round_half_up(fraction * len(ids))
    if k == 0:
        raise ValueError(f"fraction {fraction} of {len(ids)} ids selects nothing")
    order = np.random.default_rng(seed).permutation(len(ids))
    chosen = np.sort(order[:k])
    return [ids[i] for i in chosen]


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is merged into its predecessor."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def eval_batches(n: int, batch_size: int) -> list[np.ndarray]:
    return [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def _to_chw(arrays) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).contiguous()


def collate_pretrain(examples, device=None):
    full = _to_chw([e.full_image.pixels for e in examples])
    sub = _to_chw([e.subimage.pixels for e in examples])
    target = torch.from_numpy(np.stack([e.target.mask for e in examples]).astype(np.int64))
    if device is not None:
        full, sub, target = full.to(device), sub.to(device), target.to(device)
    return full, sub, target


def train_step(model, optimizer, inputs, target, loss_fn):
    """One optimisation step; returns the batch loss before the update and the logits."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    logits = model(*inputs)
    loss = loss_fn(logits, target)
    loss.backward()
    optimizer.step()
    return float(loss.detach()), logits.detach()


class _SampleCache:
    """Loads samples from an adapter and applies a deterministic transform, memoised."""

    def __init__(self, dataset: DatasetAdapter, split: str, ids, transform, limit: int = 4096):
        self.dataset, self.split, self.ids = dataset, split, list(ids)
        self.transform = transform
        self._memo = {} if len(self.ids) <= limit else None

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        if self._memo is not None and i in self._memo:
            return self._memo[i]
        out = self.transform(self.dataset.load(self.split, self.ids[i]))
        if self._memo is not None:
            self._memo[i] = out
        return out


def _as_image(sample) -> ImageSample:
    return sample.image if hasattr(sample, "image") else sample


def _make_optimizer(model, config):
    return torch.optim.AdamW(model.parameters(), lr=config.initial_lr,
                             weight_decay=config.weight_decay)


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _record(epoch, split, losses, cm, seconds, lr) -> EpochRecord:
    per_class, mean = miou(cm)
    return EpochRecord(epoch, split, float(np.mean(losses)) if losses else float("nan"),
                       tuple(float(x) for x in per_class), mean, round(seconds, 3), lr)


def _split_ids(dataset, split):
    ids = dataset.split_ids(split)
    if not ids:
        raise ValueError(f"dataset {dataset.name!r} has an empty {split!r} split")
    return ids


def _run_dir_files(out_dir):
    if out_dir is None:
        return None, None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / "run_log.jsonl", out_dir / "best.ckpt"


def run_pretraining(config: TrainConfig, dataset: DatasetAdapter, out_dir=None,
                    init: ParameterStore | None = None):
    """Train the overlap model; returns the best (by val IoU) parameters and the run log.

    ``init`` optionally seeds the encoder(s) with external weights before
    pretraining starts.
    """
    if config.task != "pretrain":
        raise ValueError("run_pretraining needs a config with task='pretrain'")
    config.validate()
    device = resolve_device(config.device)
    seed_everything(config.seed, config.deterministic)
    spec = config.model_spec()
    model = build_pretrain_model(spec).to(device)
    if init is not None:
        _load_pretrain_init(model, init, config.arch)
    if config.arch == "vit":
        log.info("joint sequence length %d", config.sequence_length())

    size = (config.resolution, config.resolution)
    sub_dims = (config.subimage_size, config.subimage_size)
    prep = lambda s: _as_image(preprocess(s, size, None))  # noqa: E731
    train = _SampleCache(dataset, "train", _split_ids(dataset, "train"), prep)
    val = _SampleCache(dataset, "val", _split_ids(dataset, "val"), prep)
    aug = config.augmentation()
    alpha = None if config.alpha_policy == "none" else tuple(config.alpha)
    gamma = config.gamma if config.loss == "focal" else 0.0

    def loss_fn(logits, target):
        return focal_loss(logits, target, alpha=alpha, gamma=gamma)

    frozen = {}
    if config.freeze_subimages:
        for split, source in (("train", train), ("val", val)):
            frozen[split] = [
                select_subimage(size, sub_dims, np.random.default_rng([config.seed, 1, i, 7]))
                for i in range(len(source))
            ]

    def example(source, split, i, stream):
        rng = np.random.default_rng([config.seed, stream, int(i)])
        spec_i = frozen[split][i] if frozen else None
        return assemble_pretrain_example(source[i], sub_dims, aug, split, rng, spec=spec_i)

    optimizer = _make_optimizer(model, config)
    run_path, ckpt_path = _run_dir_files(out_dir)
    run_log = RunLog(run_path)
    best, best_state = -1.0, None
    for epoch in range(1, config.epochs + 1):
        lr = cosine_lr(config.initial_lr, epoch - 1, config.epochs)
        _set_lr(optimizer, lr)
        start = time.perf_counter()
        losses, cm = [], ConfusionMatrix(2)
        for idx in epoch_batches(len(train), config.batch_size, config.seed, epoch):
            batch = [example(train, "train", i, epoch) for i in idx]
            full, sub, target = collate_pretrain(batch, device)
            loss, logits = train_step(model, optimizer, (full, sub), target, loss_fn)
            losses.append(loss)
            cm = accumulate_confusion(cm, logits.argmax(1).cpu().numpy(), target.cpu().numpy())
        run_log.append(_record(epoch, "train", losses, cm, time.perf_counter() - start, lr))

        start = time.perf_counter()
        losses, cm = evaluate_overlap(model, [example(val, "val", i, _VAL_STREAM)
                                              for i in range(len(val))],
                                      loss_fn, config.batch_size, device)
        record = _record(epoch, "val", losses, cm, time.perf_counter() - start, lr)
        run_log.append(record)
        log.info("epoch %d/%d train loss %.4f val IoU %.4f", epoch, config.epochs,
                 run_log.split("train")[-1].loss, record.miou)
        if record.miou > best:
            best, best_state = record.miou, copy.deepcopy(model.state_dict())

    store = ParameterStore(best_state, config.arch, "subimage-pretrained", asdict(spec))
    if ckpt_path is not None:
        write_checkpoint(ckpt_path, store, config.to_dict(), config.seed,
                         torch.get_rng_state(), {"best_val_iou": best})
    return store, run_log


def _load_pretrain_init(model, init: ParameterStore, arch: str):
    if init.arch != arch:
        raise ValueError(f"initial weights are for {init.arch!r}, model is {arch!r}")
    prefixes = ["encoder."] if arch == "vit" else ["full_encoder.", "sub_encoder."]
    tensors = {}
    for name, value in init.tensors.items():
        if not name.startswith("encoder."):
            continue
        for p in prefixes:
            tensors[p + name[len("encoder."):]] = value
    report = ParameterStore(tensors, arch, init.provenance, init.model).load_into(model)
    if report.mismatched:
        raise ValueError(f"initial weights do not fit: {list(report.mismatched)[:5]}")
    return report


@torch.no_grad()
def evaluate_overlap(model, examples, loss_fn, batch_size, device):
    model.eval()
    losses, cm = [], ConfusionMatrix(2)
    for idx in eval_batches(len(examples), batch_size):
        full, sub, target = collate_pretrain([examples[i] for i in idx], device)
        logits = model(full, sub)
        losses.append(float(loss_fn(logits, target)))
        cm = accumulate_confusion(cm, logits.argmax(1).cpu().numpy(), target.cpu().numpy())
    return losses, cm


def collate_segmentation(samples, device=None):
    images = _to_chw([s.image.pixels for s in samples])
    labels = torch.from_numpy(np.stack([s.labels for s in samples]))
    if device is not None:
        images, labels = images.to(device), labels.to(device)
    return images, labels


@torch.no_grad()
def evaluate_segmentation(model, samples, num_classes, ignore_index, loss_fn, batch_size, device):
    model.eval()
    losses, cm = [], ConfusionMatrix(num_classes, ignore_index)
    for idx in eval_batches(len(samples), batch_size):
        images, labels = collate_segmentation([samples[i] for i in idx], device)
        logits = model(images)
        losses.append(float(loss_fn(logits, labels)))
        cm = accumulate_confusion(cm, logits.argmax(1).cpu().numpy(), labels.cpu().numpy())
    return losses, cm


def class_weights_for(config: TrainConfig, samples, num_classes, ignore_index):
    if config.alpha_policy == "none":
        return None
    if config.alpha_policy == "fixed":
        if len(config.alpha) != num_classes:
            raise ValueError(f"fixed alpha has {len(config.alpha)} entries for {num_classes} classes")
        return tuple(config.alpha)
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += pixel_counts(s.labels, num_classes, ignore_index)
    return inverse_sqrt_class_weights(counts, floor=config.class_count_floor).alpha


def run_finetuning(config: TrainConfig, dataset: DatasetAdapter, init: ParameterStore | None,
                   out_dir=None, allow_random: bool = True):
    """Train a segmentation model from ``init`` (``None`` = random); best by val mIoU."""
    if config.task != "finetune":
        raise ValueError("run_finetuning needs a config with task='finetune'")
    config.validate()
    if init is not None:
        if init.provenance not in PROVENANCES:
            raise ValueError(f"unknown init provenance {init.provenance!r}")
        if init.arch != config.arch:
            raise ValueError(f"init weights are for {init.arch!r}, config arch is {config.arch!r}")
    elif not allow_random:
        raise ValueError("random initialisation requested but not allowed")
    device = resolve_device(config.device)
    seed_everything(config.seed, config.deterministic)
    num_classes, ignore = dataset.num_classes, dataset.ignore_index
    size = (config.resolution, config.resolution)
    crop_size = config.crop_size if config.crop_size is not None else dataset.crop_size

    train_ids = subsample_labels(_split_ids(dataset, "train"), config.label_fraction, config.seed)
    log.info("finetuning on %d training samples", len(train_ids))
    raw_train = _SampleCache(dataset, "train", train_ids, lambda s: s)
    fixed = lambda s: preprocess(s, size, crop_size, "val")  # noqa: E731
    val = _SampleCache(dataset, "val", _split_ids(dataset, "val"), fixed)
    counting = _SampleCache(dataset, "train", train_ids, fixed)
    alpha = class_weights_for(config, (counting[i] for i in range(len(counting))),
                              num_classes, ignore)
    gamma = config.gamma if config.loss == "focal" else 0.0

    def loss_fn(logits, target):
        return focal_loss(logits, target, alpha=alpha, gamma=gamma, ignore_index=ignore)

    spec = init.spec if init is not None else config.model_spec()
    model = build_downstream_segmenter(init, config.arch, num_classes, spec).to(device)
    optimizer = _make_optimizer(model, config)
    aug = config.augmentation()
    run_path, ckpt_path = _run_dir_files(out_dir)
    run_log = RunLog(run_path)
    best, best_state = -1.0, None
    for epoch in range(1, config.epochs + 1):
        lr = cosine_lr(config.initial_lr, epoch - 1, config.epochs)
        _set_lr(optimizer, lr)
        start = time.perf_counter()
        losses, cm = [], ConfusionMatrix(num_classes, ignore)
        for idx in epoch_batches(len(raw_train), config.batch_size, config.seed, epoch):
            batch = []
            for i in idx:
                rng = np.random.default_rng([config.seed, epoch, int(i)])
                sample = preprocess(raw_train[i], size, crop_size, "train", rng)
                if aug.flip_enabled:
                    sample = flip_pair(sample, FlipRecord(rng.random() < 0.5, rng.random() < 0.5))
                batch.append(sample)
            images, labels = collate_segmentation(batch, device)
            loss, logits = train_step(model, optimizer, (images,), labels, loss_fn)
            losses.append(loss)
            cm = accumulate_confusion(cm, logits.argmax(1).cpu().numpy(), labels.cpu().numpy())
        run_log.append(_record(epoch, "train", losses, cm, time.perf_counter() - start, lr))

        start = time.perf_counter()
        losses, cm = evaluate_segmentation(model, [val[i] for i in range(len(val))], num_classes,
                                           ignore, loss_fn, config.batch_size, device)
        record = _record(epoch, "val", losses, cm, time.perf_counter() - start, lr)
        run_log.append(record)
        log.info("epoch %d/%d val mIoU %.4f", epoch, config.epochs, record.miou)
        if record.miou > best:
            best, best_state = record.miou, copy.deepcopy(model.state_dict())

    provenance = init.provenance if init is not None else "random"
    store = ParameterStore(best_state, config.arch, provenance, asdict(spec))
    if ckpt_path is not None:
        write_checkpoint(ckpt_path, store, config.to_dict(), config.seed, torch.get_rng_state(),
                         {"best_val_miou": best, "task": "finetune", "num_classes": num_classes,
                          "alpha": list(alpha) if alpha else None})
    return store, run_log


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **overrides)
