import pytest
import torch

from subimage_overlap.models import (
    DualEncoderOverlapModel,
    ModelSpec,
    ParameterStore,
    ResNetEncoder,
    ViTOverlapModel,
    build_downstream_segmenter,
    build_joint_sequence,
    export_encoder,
    joint_sequence_length,
    load_external_encoder,
    num_patches,
)
from subimage_overlap.models.vit import SEGMENT_SEP, SEGMENT_SUB

TINY = dict(patch_size=8, dim=32, depth=2, num_heads=2, pos_grid=4)


def tiny_spec(**kw):
    return ModelSpec(arch="vit", patch_size=8, dim=32, depth=2, num_heads=2, pos_grid=4, **kw)


def test_patch_counts():
    assert num_patches(224, 224, 14) == 256
    assert num_patches(56, 56, 14) == 16
    with pytest.raises(ValueError):
        num_patches(225, 224, 14)


def test_joint_sequence_lengths():
    assert joint_sequence_length((224, 224), (56, 56), 14) == 273
    assert joint_sequence_length((224, 224), (112, 112), 14) == 321


def test_joint_sequence_layout_and_dim_check():
    full, sub, sep = torch.zeros(2, 256, 8), torch.ones(2, 16, 8), torch.full((8,), 2.0)
    seq = build_joint_sequence(full, sub, sep)
    assert len(seq) == 273
    assert (seq.layout == SEGMENT_SEP).sum() == 1 and seq.sep_index == 256
    assert torch.equal(seq.segment(SEGMENT_SUB), sub)
    with pytest.raises(ValueError):
        build_joint_sequence(full, torch.ones(2, 16, 9), sep)


def test_model_sequence_length_matches_law():
    torch.manual_seed(0)
    model = ViTOverlapModel(**TINY)
    for sub in (8, 16, 24):
        seq = model.joint_sequence(torch.rand(1, 3, 32, 32), torch.rand(1, 3, sub, sub))
        assert len(seq) == 16 + 1 + (sub // 8) ** 2


def test_vit_output_shape_and_finite():
    torch.manual_seed(0)
    model = ViTOverlapModel(**TINY)
    out = model(torch.rand(2, 3, 32, 48), torch.rand(2, 3, 16, 8))
    assert out.shape == (2, 2, 32, 48)
    assert torch.isfinite(out).all()


def test_subimage_token_order_changes_logits():
    torch.manual_seed(0)
    model = ViTOverlapModel(**TINY).eval()
    full, sub = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        a = model(full, sub)
        b = model(full, sub, sub_order=torch.tensor([3, 2, 1, 0]))
    assert not torch.allclose(a, b)


def test_sep_token_receives_gradient():
    torch.manual_seed(0)
    model = ViTOverlapModel(**TINY)
    nonzero = False
    for _ in range(5):
        model.zero_grad()
        out = model(torch.rand(2, 3, 32, 32), torch.rand(2, 3, 16, 16))
        torch.nn.functional.cross_entropy(out, torch.randint(0, 2, (2, 32, 32))).backward()
        nonzero |= bool(model.sep_token.grad.abs().sum() > 0)
    assert nonzero


def test_dual_cnn_feature_grids():
    enc = ResNetEncoder("resnet18").eval()
    with torch.no_grad():
        assert enc(torch.rand(1, 3, 224, 224)).shape[-2:] == (7, 7)
        assert enc(torch.rand(1, 3, 56, 56)).shape[-2:] == (2, 2)


def test_dual_cnn_fusion_and_output():
    torch.manual_seed(0)
    model = DualEncoderOverlapModel("resnet18").eval()
    assert model.fusion.reduce[0].in_channels == 2 * model.full_encoder.out_channels
    with torch.no_grad():
        out = model(torch.rand(1, 3, 224, 224), torch.rand(1, 3, 56, 56))
    assert out.shape == (1, 2, 224, 224) and torch.isfinite(out).all()


def test_vit_export_drops_sep_and_head():
    model = ViTOverlapModel(**TINY)
    store = ParameterStore.from_module(model, "vit", "subimage-pretrained", tiny_spec())
    exported = export_encoder(store, "vit")
    assert "sep_token" in store and "sep_token" not in exported
    assert all(n.startswith("encoder.") for n in exported.names())


def test_dual_export_keeps_only_full_encoder():
    model = DualEncoderOverlapModel("resnet18")
    store = ParameterStore.from_module(model, "dual_cnn", "subimage-pretrained",
                                       ModelSpec(arch="dual_cnn", cnn_depth="resnet18"))
    exported = export_encoder(store, "dual_cnn")
    names = exported.names()
    assert names and all(n.startswith("encoder.") for n in names)
    assert not any(n.startswith(("sub_encoder.", "fusion.", "full_encoder.")) for n in names)


@pytest.mark.parametrize("arch", ["vit", "dual_cnn"])
def test_transfer_is_bit_identical(arch):
    torch.manual_seed(1)
    if arch == "vit":
        spec, model = tiny_spec(), ViTOverlapModel(**TINY)
    else:
        spec = ModelSpec(arch="dual_cnn", cnn_depth="resnet18")
        model = DualEncoderOverlapModel("resnet18")
    exported = export_encoder(ParameterStore.from_module(model, arch, "subimage-pretrained", spec),
                              arch)
    net = build_downstream_segmenter(exported, arch, num_classes=5, model=spec)
    state = net.state_dict()
    for name, tensor in exported.tensors.items():
        assert torch.equal(state[name], tensor), name
    assert not net.transfer_report.unconsumed and not net.transfer_report.mismatched
    assert all(p.requires_grad for p in net.parameters())
    x = torch.rand(1, 3, 64, 64)
    assert net(x).shape == (1, 5, 64, 64)


def test_downstream_head_is_fresh_and_sized():
    net = build_downstream_segmenter(None, "vit", num_classes=5, model=tiny_spec())
    assert net.decode_head.conv2.out_channels == 5


def test_arch_mismatch_rejected():
    store = export_encoder(ParameterStore.from_module(ViTOverlapModel(**TINY), "vit",
                                                      "subimage-pretrained", tiny_spec()), "vit")
    with pytest.raises(ValueError):
        build_downstream_segmenter(store, "dual_cnn", 5)


def test_external_vit_weights_are_adapted(tmp_path):
    source = ViTOverlapModel(**TINY).encoder.state_dict()
    raw = {k: v for k, v in source.items()}
    raw["cls_token"] = torch.zeros(1, 1, 32)
    raw["pos_embed"] = torch.randn(1, 1 + 36, 32)  # class slot + 6x6 grid
    raw["mask_token"] = torch.zeros(1, 32)
    path = tmp_path / "dino.pth"
    torch.save(raw, path)
    store = load_external_encoder(path, "vit", tiny_spec(), "lvd142m")
    assert store.provenance == "lvd142m"
    assert store.tensors["encoder.pos_embed"].shape == (1, 16, 32)
    assert "encoder.cls_token" not in store and "encoder.mask_token" not in store
    net = build_downstream_segmenter(store, "vit", 3, tiny_spec())
    # only the freshly initialised head is absent from the external weights
    assert all(k.startswith("decode_head.") for k in net.transfer_report.missing)
