"""Scikit-learn style wrappers around pretraining and finetuning.

Arrays follow the ``(N, H, W, 3)`` image convention used elsewhere in the
package; masks and label maps are ``(N, H, W)``.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import ImageSample, SegmentationSample
from .data.adapters import InMemoryDataset
from .data.splits import allocate_val_split
from .models.transfer import (
    ParameterStore,
    build_downstream_segmenter,
    build_pretrain_model,
)
from .models.transfer import export_encoder as _export
from .objectives import ConfusionMatrix, accumulate_confusion, binary_overlap_iou, miou
from .task import AugmentationConfig, assemble_pretrain_example
from .training import (
    TrainConfig,
    collate_pretrain,
    eval_batches,
    resolve_device,
    run_finetuning,
    run_pretraining,
)
from .validation import check_images, check_labels, check_pair_dims


def _dataset(images, labels, num_classes, ignore_index, val_fraction, seed, name):
    samples = {}
    for i, x in enumerate(images):
        sid = f"{name}{i:06d}"
        y = np.zeros(x.shape[:2], dtype=np.int64) if labels is None else labels[i]
        samples[sid] = SegmentationSample(ImageSample(sid, x, name), y, num_classes, ignore_index)
    split = allocate_val_split(list(samples), val_fraction, seed)
    return InMemoryDataset(name, num_classes,
                           {s: [samples[i] for i in split.ids(s)] for s in ("train", "val")},
                           ignore_index, assignment=split)


def _chw(batch: np.ndarray, device) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch)).permute(0, 3, 1, 2).to(device)


class SubimageOverlapPretrainer(BaseEstimator, TransformerMixin):
    """Self-supervised pretraining by subimage overlap prediction.

    ``fit`` needs only unlabelled images. After fitting, ``transform`` maps
    images to encoder feature maps and ``export_encoder`` returns the
    transferable weights.
    """

    def __init__(self, arch="vit", resolution=224, subimage_size=112, epochs=150,
                 batch_size=64, initial_lr=1e-4, patch_size=14, vit_dim=384, vit_depth=12,
                 vit_heads=6, cnn_depth="resnet50", flip=True, jitter=False,
                 val_fraction=0.2, seed=0, device="auto", out_dir=None):
        self.arch = arch
        self.resolution = resolution
        self.subimage_size = subimage_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.patch_size = patch_size
        self.vit_dim = vit_dim
        self.vit_depth = vit_depth
        self.vit_heads = vit_heads
        self.cnn_depth = cnn_depth
        self.flip = flip
        self.jitter = jitter
        self.val_fraction = val_fraction
        self.seed = seed
        self.device = device
        self.out_dir = out_dir

    def _config(self) -> TrainConfig:
        return TrainConfig(
            task="pretrain", arch=self.arch, epochs=self.epochs, batch_size=self.batch_size,
            initial_lr=self.initial_lr, flip=self.flip, jitter=self.jitter, seed=self.seed,
            resolution=self.resolution, subimage_size=self.subimage_size,
            patch_size=self.patch_size, vit_dim=self.vit_dim, vit_depth=self.vit_depth,
            vit_heads=self.vit_heads, cnn_depth=self.cnn_depth, device=self.device,
        )

    def fit(self, X, y=None):
        images = check_images(X)
        if len(images) < 2:
            raise ValueError("need at least two images to hold out a validation split")
        config = self._config()
        data = _dataset(images, None, 2, None, self.val_fraction, self.seed, "img")
        self.params_, self.run_log_ = run_pretraining(config, data, self.out_dir)
        self.config_ = config
        self.model_ = build_pretrain_model(self.params_.spec)
        self.params_.load_into(self.model_)
        self.device_ = resolve_device(self.device)
        self.model_.to(self.device_).eval()
        self.n_features_out_ = self.params_.spec.dim if self.arch == "vit" \
            else self.model_.full_encoder.out_channels
        return self

    @torch.no_grad()
    def predict_proba(self, images, subimages) -> np.ndarray:
        """Per-pixel overlap probability ``(N, H, W)``."""
        check_is_fitted(self, "model_")
        full = check_images(images, name="images")
        sub = check_images(subimages, name="subimages")
        check_pair_dims(full, sub)
        out = []
        for idx in eval_batches(len(full), self.batch_size):
            logits = self.model_(_chw(full[idx], self.device_), _chw(sub[idx], self.device_))
            out.append(logits.softmax(1)[:, 1].cpu().numpy())
        return np.concatenate(out)

    def predict_overlap(self, images, subimages) -> np.ndarray:
        """Binary overlap masks ``(N, H, W)``."""
        return (self.predict_proba(images, subimages) > 0.5).astype(np.uint8)

    predict = predict_overlap

    @torch.no_grad()
    def transform(self, X) -> np.ndarray:
        """Encoder feature maps ``(N, C, h, w)``."""
        check_is_fitted(self, "model_")
        images = check_images(X)
        encoder = self.model_.encoder if self.arch == "vit" else self.model_.full_encoder
        out = [encoder(_chw(images[idx], self.device_)).cpu().numpy()
               for idx in eval_batches(len(images), self.batch_size)]
        return np.concatenate(out)

    def export_encoder(self) -> ParameterStore:
        check_is_fitted(self, "params_")
        return _export(self.params_, self.arch)

    @torch.no_grad()
    def score(self, X, y=None) -> float:
        """Overlap IoU on subimages drawn from ``X`` with a fixed seed."""
        check_is_fitted(self, "model_")
        images = check_images(X)
        sub = (self.subimage_size, self.subimage_size)
        examples = [
            assemble_pretrain_example(ImageSample(f"s{i}", x), sub, AugmentationConfig(), "val",
                                      np.random.default_rng([self.seed, i]))
            for i, x in enumerate(images)
        ]
        full, subs, target = collate_pretrain(examples, self.device_)
        return binary_overlap_iou(self.model_(full, subs).cpu(), target.cpu().numpy())


class OverlapSegmenter(BaseEstimator, ClassifierMixin):
    """Semantic segmentation initialised from pretrained encoder weights.

    ``init`` may be a :class:`ParameterStore` (for example the output of
    :meth:`SubimageOverlapPretrainer.export_encoder`), a fitted pretrainer,
    or ``None`` for a fresh initialisation.
    """

    def __init__(self, init=None, arch="vit", num_classes=None, ignore_index=None, epochs=100,
                 batch_size=128, initial_lr=1e-4, resolution=224, label_fraction=1.0,
                 loss="focal", gamma=1.5, alpha_policy="inverse_sqrt", flip=False,
                 patch_size=14, vit_dim=384, vit_depth=12, vit_heads=6, cnn_depth="resnet50",
                 val_fraction=0.2, seed=0, device="auto", out_dir=None):
        self.init = init
        self.arch = arch
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.epochs = epochs
        self.batch_size = batch_size
        self.initial_lr = initial_lr
        self.resolution = resolution
        self.label_fraction = label_fraction
        self.loss = loss
        self.gamma = gamma
        self.alpha_policy = alpha_policy
        self.flip = flip
        self.patch_size = patch_size
        self.vit_dim = vit_dim
        self.vit_depth = vit_depth
        self.vit_heads = vit_heads
        self.cnn_depth = cnn_depth
        self.val_fraction = val_fraction
        self.seed = seed
        self.device = device
        self.out_dir = out_dir

    def _init_store(self):
        if self.init is None or isinstance(self.init, ParameterStore):
            return self.init
        if isinstance(self.init, SubimageOverlapPretrainer):
            return self.init.export_encoder()
        raise TypeError(f"init must be a ParameterStore, a pretrainer or None, got {type(self.init)}")

    def fit(self, X, y):
        images = check_images(X)
        num_classes = self.num_classes
        if num_classes is None:
            labels = np.asarray(y)
            valid = labels if self.ignore_index is None else labels[labels != self.ignore_index]
            num_classes = int(valid.max()) + 1 if valid.size else 2
        labels = check_labels(y, images, num_classes, self.ignore_index)
        if len(images) < 2:
            raise ValueError("need at least two images to hold out a validation split")
        init = self._init_store()
        config = TrainConfig.finetune_defaults(
            arch=self.arch, epochs=self.epochs, batch_size=self.batch_size,
            initial_lr=self.initial_lr, resolution=self.resolution,
            label_fraction=self.label_fraction, loss=self.loss, gamma=self.gamma,
            alpha_policy=self.alpha_policy, flip=self.flip, seed=self.seed,
            patch_size=self.patch_size, vit_dim=self.vit_dim, vit_depth=self.vit_depth,
            vit_heads=self.vit_heads, cnn_depth=self.cnn_depth, device=self.device,
        )
        data = _dataset(images, labels, num_classes, self.ignore_index, self.val_fraction,
                        self.seed, "seg")
        self.params_, self.run_log_ = run_finetuning(config, data, init, self.out_dir)
        self.classes_ = np.arange(num_classes)
        self.config_ = config
        self.model_ = build_downstream_segmenter(None, self.arch, num_classes,
                                                 self.params_.spec)
        self.params_.load_into(self.model_)
        self.device_ = resolve_device(self.device)
        self.model_.to(self.device_).eval()
        return self

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities ``(N, C, H, W)``."""
        check_is_fitted(self, "model_")
        images = check_images(X)
        return np.concatenate([
            self.model_(_chw(images[idx], self.device_)).softmax(1).cpu().numpy()
            for idx in eval_batches(len(images), self.batch_size)
        ])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(1)

    def score(self, X, y, sample_weight=None) -> float:
        """Dataset-level mean IoU."""
        images = check_images(X)
        labels = check_labels(y, images, len(self.classes_), self.ignore_index)
        cm = accumulate_confusion(ConfusionMatrix(len(self.classes_), self.ignore_index),
                                  self.predict(images), labels)
        return miou(cm)[1]

    def get_config(self) -> dict:
        check_is_fitted(self, "config_")
        return {**self.config_.to_dict(), "model": asdict(self.params_.spec)}
