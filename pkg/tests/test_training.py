import json

import numpy as np
import pytest
import torch

from subimage_overlap.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from subimage_overlap.data import generate_synthetic_dataset
from subimage_overlap.models import ModelSpec, ParameterStore, ViTOverlapModel
from subimage_overlap.objectives import focal_loss
from subimage_overlap.task import AugmentationConfig, assemble_pretrain_example
from subimage_overlap.training import (
    EpochRecord,
    RunLog,
    TrainConfig,
    collate_pretrain,
    cosine_lr,
    epoch_batches,
    run_finetuning,
    run_pretraining,
    subsample_labels,
    train_step,
)

TOY = dict(resolution=32, subimage_size=16, patch_size=8, vit_dim=32, vit_depth=1,
           vit_heads=2, device="cpu")


def test_pretrain_defaults():
    cfg = TrainConfig()
    assert (cfg.gamma, cfg.alpha, cfg.initial_lr, cfg.epochs, cfg.batch_size) == \
        (1.5, (0.25, 0.75), 1e-4, 150, 64)
    assert cfg.sequence_length() == 321
    ft = TrainConfig.finetune_defaults()
    assert (ft.epochs, ft.batch_size, ft.alpha_policy) == (100, 128, "inverse_sqrt")


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(KeyError, match="valid keys"):
        TrainConfig.from_dict({"epochz": 3})
    with pytest.raises(ValueError):
        TrainConfig(subimage_size=300)
    with pytest.raises(ValueError):
        TrainConfig(resolution=225)


def test_config_round_trip():
    cfg = TrainConfig(epochs=3, alpha=(0.1, 0.9))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_cosine_matches_torch_scheduler():
    param = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.SGD([param], lr=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=150, eta_min=0.0)
    for epoch in range(151):
        assert cosine_lr(1e-4, epoch, 150) == pytest.approx(opt.param_groups[0]["lr"], rel=1e-9,
                                                            abs=1e-15)
        opt.step()
        sched.step()
    assert cosine_lr(1e-4, 0, 150) == 1e-4
    assert cosine_lr(1e-4, 75, 150) == pytest.approx(5e-5)
    assert cosine_lr(1e-4, 150, 150) == pytest.approx(0.0, abs=1e-20)


def test_subsample_sizes_and_nesting():
    ids = [f"img{i}" for i in range(7470)]
    assert len(subsample_labels(ids, 0.5, 0)) == 3735
    assert len(subsample_labels(ids, 0.25, 0)) == round(0.25 * 7470 + 1e-9) == 1868
    small = subsample_labels(ids, 0.1, 3)
    big = subsample_labels(ids, 0.5, 3)
    assert set(small) <= set(big)
    assert big == sorted(big, key=ids.index)
    assert subsample_labels(ids, 0.5, 3) == big
    assert subsample_labels(ids, 1.0, 3) == ids
    with pytest.raises(ValueError):
        subsample_labels(ids, 0.0, 0)


def test_epoch_batches_cover_and_merge_singletons():
    batches = epoch_batches(9, 4, seed=0, epoch=1)
    assert [len(b) for b in batches] == [4, 5]
    assert sorted(np.concatenate(batches).tolist()) == list(range(9))
    assert [b.tolist() for b in epoch_batches(9, 4, 0, 1)] == [b.tolist() for b in batches]
    assert epoch_batches(9, 4, 0, 2)[0].tolist() != batches[0].tolist()


def test_run_log_rejects_non_increasing_epochs(tmp_path):
    log = RunLog(tmp_path / "log.jsonl")
    rec = EpochRecord(1, "val", 0.5, (0.9, float("nan")), 0.9, 0.1, 1e-4)
    log.append(rec)
    with pytest.raises(ValueError):
        log.append(rec)
    back = RunLog.read(tmp_path / "log.jsonl")
    assert back.records[0].epoch == 1 and np.isnan(back.records[0].per_class_iou[1])


def _store():
    torch.manual_seed(0)
    model = ViTOverlapModel(patch_size=8, dim=16, depth=1, num_heads=2, pos_grid=4)
    spec = ModelSpec(arch="vit", patch_size=8, dim=16, depth=1, num_heads=2, pos_grid=4)
    return ParameterStore.from_module(model, "vit", "subimage-pretrained", spec)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    store = _store()
    rng = torch.get_rng_state()
    path = write_checkpoint(tmp_path / "a.ckpt", store, TrainConfig().to_dict(), 7, rng, {"k": 1})
    ckpt = read_checkpoint(path)
    assert ckpt.seed == 7 and ckpt.extra == {"k": 1}
    assert ckpt.config == TrainConfig().to_dict()
    assert ckpt.store.arch == "vit" and ckpt.store.provenance == "subimage-pretrained"
    assert torch.equal(ckpt.rng_state, rng)
    assert set(ckpt.store.names()) == set(store.names())
    for name in store.names():
        assert torch.equal(ckpt.store.tensors[name], store.tensors[name])
        assert ckpt.store.tensors[name].dtype == store.tensors[name].dtype


def test_checkpoint_arch_mismatch_names_both(tmp_path):
    path = write_checkpoint(tmp_path / "a.ckpt", _store())
    with pytest.raises(CheckpointError, match="'vit'.*'dual_cnn'"):
        read_checkpoint(path, expected_arch="dual_cnn")


def test_truncated_checkpoint_is_corrupt(tmp_path):
    path = write_checkpoint(tmp_path / "a.ckpt", _store())
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="corrupt"):
        read_checkpoint(path)


def test_tampered_checkpoint_fails_digest(tmp_path):
    path = write_checkpoint(tmp_path / "a.ckpt", _store())
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="corrupt"):
        read_checkpoint(path)


def test_one_step_reduces_batch_loss():
    data = generate_synthetic_dataset(20, (32, 32), 3, seed=0)
    images = [s.image for s in data.iter_split("train")]
    improved = 0
    for trial in range(100):
        torch.manual_seed(trial)
        model = ViTOverlapModel(patch_size=8, dim=32, depth=2, num_heads=2, pos_grid=4)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-4, weight_decay=0.01)
        rng = np.random.default_rng(trial)
        batch = [assemble_pretrain_example(images[int(i)], (16, 16), AugmentationConfig(),
                                           "train", rng)
                 for i in rng.choice(len(images), 4, replace=False)]
        full, sub, target = collate_pretrain(batch)

        def loss_fn(logits, t):
            return focal_loss(logits, t, (0.25, 0.75), 1.5)

        before, _ = train_step(model, opt, (full, sub), target, loss_fn)
        with torch.no_grad():
            after = float(loss_fn(model(full, sub), target))
        improved += after < before
    assert improved >= 95


def test_pretraining_writes_run_artifacts(tmp_path):
    data = generate_synthetic_dataset(10, (32, 32), 3, seed=1)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=3, **TOY)
    store, log = run_pretraining(cfg, data, tmp_path)
    assert [r.epoch for r in log.split("val")] == [1, 2]
    assert (tmp_path / "run_log.jsonl").is_file()
    ckpt = read_checkpoint(tmp_path / "best.ckpt", expected_arch="vit")
    assert ckpt.config["seed"] == 3
    assert set(ckpt.store.names()) == set(store.names())


def test_frozen_subimages_are_fixed_across_epochs(tmp_path):
    data = generate_synthetic_dataset(10, (32, 32), 3, seed=1)
    cfg = TrainConfig(epochs=1, batch_size=4, freeze_subimages=True, **TOY)
    store, log = run_pretraining(cfg, data)
    assert len(log.split("train")) == 1


def test_finetuning_uses_subsampled_labels(tmp_path, caplog):
    data = generate_synthetic_dataset(20, (32, 32), 3, seed=2)
    cfg = TrainConfig.finetune_defaults(epochs=1, batch_size=4, label_fraction=0.25,
                                        **{k: v for k, v in TOY.items() if k != "subimage_size"})
    with caplog.at_level("INFO"):
        _, log = run_finetuning(cfg, data, None, tmp_path)
    assert "finetuning on 4 training samples" in caplog.text
    assert len(log.split("val")) == 1
    ckpt = read_checkpoint(tmp_path / "best.ckpt")
    assert ckpt.store.provenance == "random" and ckpt.extra["num_classes"] == 3


def test_finetuning_refuses_random_when_not_allowed():
    data = generate_synthetic_dataset(10, (32, 32), 3, seed=2)
    cfg = TrainConfig.finetune_defaults(epochs=1, **{k: v for k, v in TOY.items()
                                                     if k != "subimage_size"})
    with pytest.raises(ValueError, match="random"):
        run_finetuning(cfg, data, None, allow_random=False)
