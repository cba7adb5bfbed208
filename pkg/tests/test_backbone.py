import json

import numpy as np
import pytest
import torch

from catair._validation import ConfigError
from catair.backbone import (CatAIR, CatAIRBlock, Downsample, ModelConfig, PromptBlock, Upsample, load_checkpoint,
                             save_checkpoint)
from catair.channel_blocks import SE, TRANSPOSED
from catair.spatial_blocks import INFER, TRAIN
from conftest import finite_difference_error


@pytest.fixture(scope="module")
def full_model():
    torch.manual_seed(0)
    return CatAIR(ModelConfig()).eval()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(enc_blocks=(2, 4, 4))
    with pytest.raises(ConfigError):
        ModelConfig(tau=1.3)
    cfg = ModelConfig()
    assert [cfg.level_channels(l) for l in (1, 2, 3, 4)] == [16, 32, 64, 128]
    assert cfg.num_spatial_blocks == 24
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_indivisible_input_names_level():
    cfg = ModelConfig()
    with pytest.raises(ConfigError, match="level 4"):
        cfg.check_input(96, 96)
    with pytest.raises(ConfigError, match="level 1"):
        cfg.check_input(60, 64)


def test_down_up_shapes():
    z = torch.randn(1, 6, 16, 16)
    down = Downsample(6)(z)
    assert down.shape == (1, 12, 8, 8)
    assert Upsample(12)(down).shape == z.shape


def test_pixel_unshuffle_definition():
    z = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert torch.nn.functional.pixel_unshuffle(z, 2).flatten().tolist() == [1.0, 2.0, 3.0, 4.0]


def test_prompt_weights_and_shapes():
    bank = PromptBlock(8, 3, size=16)
    z = torch.randn(2, 8, 12, 12)
    w = bank.weights(z)
    assert w.shape == (2, 3) and (w.sum(-1) - 1).abs().max() < 1e-6
    assert bank(z).shape == z.shape


def test_single_task_prompt_is_its_component():
    bank = PromptBlock(4, 1, size=8)
    z = torch.randn(1, 4, 8, 8)
    assert torch.equal(bank.weights(z), torch.ones(1, 1))
    torch.testing.assert_close(bank.generate(z), bank.components[0][None])


def test_forward_shapes_and_decisions(full_model):
    img = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        out = full_model(img, gamma=0.5, mode=INFER)
    assert out.latent.shape == (1, 128, 8, 8)
    assert out.restored.shape == img.shape
    assert len(out.gammas) == len(out.decisions) == len(out.block_ids) == 24
    assert out.block_ids[0] == "enc1_0" and out.block_ids[-1] == "dec1_1"


def test_level_schedule(full_model):
    dims = {bid: blk.spatial_attn.channels for bid, blk in full_model.blocks()}
    assert dims["enc1_0"] == 16 and dims["enc2_0"] == 32 and dims["enc3_0"] == 64 and dims["enc4_0"] == 128
    assert dims["dec3_0"] == 64 and dims["dec1_0"] == 16
    variants = {bid: blk.variant for bid, blk in full_model.blocks()}
    assert all(v == (TRANSPOSED if bid.startswith("enc4") else SE) for bid, v in variants.items())
    assert [len(b.components) for b in full_model.prompts] == [3, 3, 3]
    assert [b.components[0].shape[0] for b in full_model.prompts] == [64, 32, 16]


def test_zero_output_conv_is_identity(small_config):
    model = CatAIR(small_config)
    with torch.no_grad():
        model.output.weight.zero_()
        model.output.bias.zero_()
    img = torch.rand(2, 3, 32, 32)
    for mode in (INFER, TRAIN):
        assert torch.equal(model(img, mode=mode).restored, img)


def test_every_block_residual(small_config):
    model = CatAIR(small_config).zero_output_projections()
    img = torch.rand(1, 3, 32, 32)
    for bid, blk in model.blocks():
        c = blk.spatial_attn.channels
        level = int(bid[3])
        z = torch.randn(1, c, 32 >> (level - 1), 32 >> (level - 1))
        out, _ = blk(z, img, 0.5, INFER)
        assert torch.equal(out, z), bid
    assert torch.equal(model(img).restored, img)


def test_block_shape_preserved(small_config):
    blk = CatAIRBlock(8, SE, small_config)
    z = torch.randn(1, 8, 16, 16)
    assert blk(z, torch.rand(1, 3, 32, 32))[0].shape == z.shape


def test_end_to_end_gradient_check(tiny_config):
    torch.manual_seed(0)
    model = CatAIR(tiny_config).double()
    with torch.no_grad():
        for m in model.spatial_layers():
            m.router.mask_head[-1].weight.normal_(0, 0.3)
        model.output.weight.normal_(0, 0.3)
    model.set_routing(noise=False, straight_through=False)
    img = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    target = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    err, name = finite_difference_error(
        model, lambda: ((model(img, 0.5, TRAIN).restored - target) ** 2).sum(), fraction=0.01, seed=1)
    assert err < 1e-3, name


def test_inference_deterministic(small_config):
    model = CatAIR(small_config).eval()
    img = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(model(img).restored, model(img).restored)


def test_checkpoint_roundtrip(tmp_path, small_config):
    torch.manual_seed(1)
    model = CatAIR(small_config).eval()
    save_checkpoint(model, tmp_path / "ck", {"note": 1})
    manifest = json.loads((tmp_path / "ck/manifest.json").read_text())
    assert set(manifest[0]) == {"name", "shape", "dtype", "byte_offset"}
    assert manifest[0]["byte_offset"] == 0 and all(e["dtype"] == "f32" for e in manifest)
    first = manifest[0]
    raw = np.frombuffer((tmp_path / "ck/weights.bin").read_bytes(), "<f4", count=int(np.prod(first["shape"])))
    assert np.array_equal(raw, model.state_dict()[first["name"]].numpy().ravel())
    loaded = load_checkpoint(tmp_path / "ck")
    img = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        a = model(img).restored.numpy().tobytes()
        b = loaded(img).restored.numpy().tobytes()
    assert a == b
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nowhere")


def test_add_tasks_keeps_old_rows(small_config):
    model = CatAIR(small_config)
    before = [b.bank.clone() for b in model.prompts]
    mix = [(b.mix.weight.clone(), b.mix.bias.clone()) for b in model.prompts]
    model.add_tasks(["deblur"])
    assert model.config.tasks[-1] == "deblur"
    for bank, old, (w, bias) in zip(model.prompts, before, mix):
        assert bank.bank.shape[0] == 4
        assert torch.equal(bank.bank[:3], old)
        assert torch.equal(bank.mix.weight[:3], w) and torch.equal(bank.mix.bias[:3], bias)
    with pytest.raises(ValueError):
        model.add_tasks(["denoise"])
