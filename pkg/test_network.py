import logging
import os

import numpy as np
import pytest
import torch
import torch.nn as nn
from pydantic import ValidationError

from blocks import ShapeError
from network import (
    PROB_EPS,
    AFIUConfig,
    CheckpointError,
    CheckpointMetadata,
    LineageEntry,
    build_model,
    load_checkpoint,
    predict,
    read_checkpoint,
    save_checkpoint,
)
from store import read_container, write_container
from training import bce_loss


@torch.no_grad()
def calibrate(model, size, batch=4, seed=0):
    """Set batch-norm running statistics from one train-mode pass so eval mode sees normalised features."""
    torch.manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.BatchNorm2d):
            module.reset_running_stats()
            module.momentum = None
    model.train()
    model(torch.randn(batch, 3, size, size, dtype=next(model.parameters()).dtype))
    return model.eval()


def _metadata(model, stage="sod-pretrained"):
    return CheckpointMetadata(
        stage=stage, epochs=3, iterations=12, seed=7, config_digest="abc123",
        lineage=[LineageEntry(stage=stage, epochs=3)], model=model.config,
    )


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValidationError):
        AFIUConfig(input_size=(300, 300))
    with pytest.raises(ValidationError):
        AFIUConfig(rsu_depths={1: 2, 2: 2, 3: 3, 4: 4, 5: 1})
    with pytest.raises(ValidationError):
        AFIUConfig(dilated_levels=[6])


def test_dilated_levels():
    assert AFIUConfig().resolved_dilated_levels() == [4, 5]
    assert AFIUConfig.tiny().resolved_dilated_levels() == [2, 3, 4, 5]
    assert AFIUConfig(dilated_levels=[1]).resolved_dilated_levels() == [1, 4, 5]
    tiny = AFIUConfig.tiny()
    assert tiny.interaction_width == 8 and tiny.input_size == (64, 64)
    assert max(tiny.rsu_depths.values()) == 3


# ---------------------------------------------------------------------------
# backbone / encode / decode
# ---------------------------------------------------------------------------

@torch.no_grad()
def test_backbone_pyramid_strides():
    model = build_model(AFIUConfig.tiny(), seed=0).eval()
    pyramid = model.backbone_extract(torch.rand(1, 3, 320, 320))
    assert pyramid.E1.shape == (1, 64, 160, 160)
    assert pyramid.E2.shape == (1, 256, 80, 80)
    assert pyramid.E3.shape == (1, 512, 40, 40)
    assert pyramid.E4.shape == (1, 1024, 20, 20)
    assert pyramid.E5.shape == (1, 2048, 10, 10)
    assert model.backbone_extract(torch.rand(2, 3, 64, 64)).E5.shape == (2, 2048, 2, 2)
    with pytest.raises(ShapeError):
        model.backbone_extract(torch.rand(1, 3, 300, 300))


@torch.no_grad()
def test_encode_decode_shapes_default_width():
    model = build_model(AFIUConfig(), seed=0).eval()
    encoded = model.encode(model.backbone_extract(torch.rand(1, 3, 320, 320)))
    assert [tuple(ec.shape) for ec in encoded] == [
        (1, 64, 160, 160), (1, 64, 80, 80), (1, 64, 40, 40), (1, 64, 20, 20), (1, 64, 10, 10)
    ]
    assert model.decoder[4](encoded[4]).shape == (1, 64, 10, 10)
    assert model.decoder[4].spec.dilated
    assert model.decode(encoded).shape == (1, 64, 160, 160)
    with pytest.raises(ShapeError):
        model.decode(encoded[:4])


def test_gradients_reach_the_image_from_every_level():
    model = build_model(AFIUConfig.tiny(), seed=0).train()
    for level in range(5):
        image = torch.randn(2, 3, 64, 64, requires_grad=True)
        model.encode(model.backbone_extract(image))[level].sum().backward()
        assert image.grad is not None and image.grad.norm() > 0


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("size,batch", [(64, 3), (128, 2), (320, 1)])
def test_forward_shape_and_range(size, batch):
    # freshly built, default batch-norm statistics: the head saturates without the clamp
    model = build_model(AFIUConfig(input_size=(size, size)), seed=0)
    out = predict(model, torch.randn(batch, 3, size, size))
    assert out.shape == (batch, 1, size, size)
    assert torch.all(out > 0) and torch.all(out < 1)


def test_tiny_forward_shape_and_range():
    model = build_model(AFIUConfig.tiny(), seed=1)
    out = predict(model, torch.randn(3, 3, 64, 64) * 50)
    assert out.shape == (3, 1, 64, 64)
    assert torch.all(out > 0) and torch.all(out < 1)
    assert out.min() >= PROB_EPS and out.max() <= 1 - PROB_EPS


def test_saturated_head_stays_inside_unit_interval():
    model = build_model(AFIUConfig.tiny(), seed=0)
    for bias in (1e4, -1e4):
        with torch.no_grad():
            model.head.bias.fill_(bias)
        out = predict(model, torch.randn(2, 3, 64, 64))
        assert torch.all(out > 0) and torch.all(out < 1)


@torch.no_grad()
def test_dilation_plan_follows_configured_size():
    model = build_model(AFIUConfig(), seed=0).eval()
    assert [rsu.spec.dilated for rsu in model.decoder] == [False, False, False, True, True]
    # a smaller input keeps the plan built for 320
    assert model(torch.randn(1, 3, 64, 64)).shape == (1, 1, 64, 64)
    assert not model.decoder[2].spec.dilated


def test_zeroed_head_predicts_one_half():
    model = build_model(AFIUConfig.tiny(), seed=0)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    out = predict(model, torch.randn(2, 3, 64, 64))
    assert torch.all(out == 0.5)


def test_predict_restores_training_mode():
    model = build_model(AFIUConfig.tiny(), seed=0).train()
    predict(model, torch.randn(1, 3, 64, 64))
    assert model.training


def test_end_to_end_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = build_model(AFIUConfig.tiny(), seed=0).double().train()
    image = torch.randn(2, 3, 64, 64, dtype=torch.float64)
    gt = (torch.rand(2, 1, 64, 64) > 0.5).double()

    def loss():
        return bce_loss(model(image), gt)

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    rng = np.random.default_rng(0)
    eps = 1e-6
    failures = []
    with torch.no_grad():
        for _ in range(100):
            p = params[int(rng.integers(len(params)))]
            flat = p.view(-1)
            index = int(rng.integers(flat.numel()))
            analytic = float(p.grad.view(-1)[index])
            original = float(flat[index])
            flat[index] = original + eps
            plus = float(loss())
            flat[index] = original - eps
            minus = float(loss())
            flat[index] = original
            numeric = (plus - minus) / (2 * eps)
            if abs(analytic - numeric) > max(1e-3 * max(abs(analytic), abs(numeric)), 1e-8):
                failures.append((analytic, numeric))
    # a perturbation may straddle a ReLU or max-pool kink
    assert len(failures) <= 2, failures


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = calibrate(build_model(AFIUConfig.tiny(), seed=3), 64)
    image = torch.randn(1, 3, 64, 64)
    before = predict(model, image)
    path = save_checkpoint(model, str(tmp_path / "m.ckpt"), _metadata(model))

    fresh = build_model(AFIUConfig.tiny(), seed=4).eval()
    metadata = load_checkpoint(path, fresh)
    for name, value in model.state_dict().items():
        loaded = fresh.state_dict()[name]
        assert loaded.dtype == value.dtype and torch.equal(loaded, value), name
    assert torch.equal(predict(fresh, image), before)
    assert metadata.stage == "sod-pretrained"
    assert metadata.epochs == 3 and metadata.iterations == 12 and metadata.seed == 7
    assert metadata.config_digest == "abc123"
    assert metadata.model == AFIUConfig.tiny()


def test_checkpoint_round_trip_double_precision(tmp_path):
    model = build_model(AFIUConfig.tiny(), seed=0).double()
    path = save_checkpoint(model, str(tmp_path / "d.ckpt"), _metadata(model))
    tensors, _ = read_checkpoint(path)
    assert tensors["head.weight"].dtype == torch.float64
    assert torch.equal(tensors["head.weight"], model.head.weight.detach())


def test_checkpoint_with_renamed_tensor_is_rejected(tmp_path):
    model = build_model(AFIUConfig.tiny(), seed=0)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(model, path, _metadata(model))
    tensors, text = read_container(path)
    tensors["head.kernel"] = tensors.pop("head.weight")
    write_container(path, tensors, text)
    with pytest.raises(CheckpointError) as excinfo:
        load_checkpoint(path, build_model(AFIUConfig.tiny(), seed=0))
    assert "head.weight" in str(excinfo.value)
    assert "head.kernel" in str(excinfo.value)


def test_checkpoint_for_other_architecture_is_rejected(tmp_path):
    tiny = build_model(AFIUConfig.tiny(), seed=0)
    path = save_checkpoint(tiny, str(tmp_path / "m.ckpt"), _metadata(tiny))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, build_model(AFIUConfig.tiny().model_copy(update={"interaction_width": 4}), seed=0))


def test_corrupt_checkpoints_are_rejected(tmp_path):
    model = build_model(AFIUConfig.tiny(), seed=0)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(model, path, _metadata(model))
    with open(path, "rb") as fh:
        data = fh.read()

    cases = {
        "magic": b"NOTACKPT" + data[8:],
        "truncated": data[:-100],
        "flipped": data[:-1] + bytes([data[-1] ^ 0xFF]),
    }
    for name, blob in cases.items():
        broken = str(tmp_path / f"{name}.ckpt")
        with open(broken, "wb") as fh:
            fh.write(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(broken, model)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "missing.ckpt"), model)


def test_lineage_must_end_with_stage():
    with pytest.raises(ValidationError):
        CheckpointMetadata(stage="dbd-finetuned", lineage=[LineageEntry(stage="sod-pretrained", epochs=1)])


def test_stage_tag_is_logged_on_load(tmp_path, caplog):
    model = build_model(AFIUConfig.tiny(), seed=0)
    path = save_checkpoint(model, str(tmp_path / "m.ckpt"), _metadata(model))
    caplog.set_level(logging.INFO, logger="network")
    load_checkpoint(path, model)
    assert any("sod-pretrained" in record.getMessage() for record in caplog.records)
    assert os.path.getsize(path) > 0


if __name__ == '__main__':
    import sys
    sys.exit(pytest.main([__file__, '-q']))
