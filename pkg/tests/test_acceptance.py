"""Acceptance suite: one pass/fail line per criterion.

Run ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py`` (lines printed as they finish).
"""

import functools
import math
import sys
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from catair.backbone import CatAIR, ModelConfig, load_checkpoint, save_checkpoint
from catair.cli import mask_images
from catair.costmodel import (count_exact, count_se, count_transposed, flops_bottleneck, flops_cross_layer,
                              flops_se, flops_spatial)
from catair.degrade import build_dataset, gen_noise, synth_clean
from catair.metrics import evaluate
from catair.spatial_blocks import INFER, TRAIN, CrossFeatureSpatialAttention, from_patches, hard_count, route
from catair.training import EMA, ExtensionPlan, build_model, ema_update, extend, loss, train

from conftest import finite_difference_error

# tolerances pinned from the acceptance criteria
ROUTING_SECONDS = 1.0
PARTITION_DECISIONS = 1000
GRAD_TOL_BLOCK = 1e-4
GRAD_TOL_E2E = 1e-3
GRAD_SECONDS = 120.0
EMA_TOL = 1e-10
OVERFIT_L1 = 0.02
OVERFIT_STEPS = 500
OVERFIT_SECONDS = 600.0
EXTENSION_DB = 0.5

RESULTS = {}


def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                RESULTS[number] = (False, title, f"{type(exc).__name__}: {exc}".splitlines()[0])
                print(format_line(number), flush=True)
                raise
            RESULTS[number] = (True, title, detail or "")
            print(format_line(number), flush=True)
        return run
    return wrap


def format_line(number):
    ok, title, detail = RESULTS[number]
    return f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")


def summary_lines():
    return [format_line(n) for n in sorted(RESULTS)]


@criterion(1, "routing equivalence at gamma 1 and 0")
def test_01_routing_equivalence():
    torch.manual_seed(0)
    layer = CrossFeatureSpatialAttention(16, window=8, tau=1.5)
    with torch.no_grad():
        layer.router.mask_head[-1].weight.normal_()
    z, img = torch.randn(1, 16, 32, 32), torch.rand(1, 3, 32, 32)
    start = time.perf_counter()
    with torch.no_grad():
        x = layer.norm(z)
        every = torch.arange(16)
        out1, _ = layer(z, img, 1.0, INFER)
        ref1 = layer.proj_out(from_patches(layer.attn_branch(x, every), z.shape, 8)) + z
        out0, _ = layer(z, img, 0.0, INFER)
        ref0 = layer.proj_out(from_patches(layer.conv_branch(x, every), z.shape, 8)) + z
    elapsed = time.perf_counter() - start
    assert torch.equal(out1, ref1) and torch.equal(out0, ref0)
    assert elapsed < ROUTING_SECONDS
    return f"{elapsed:.3f}s"


@criterion(2, "partition invariant over 1000 router decisions")
def test_02_partition():
    gen = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    gammas = (0, 0.25, 0.5, 0.75, 1)
    for i in range(PARTITION_DECISIONS):
        b, hp, wp = (int(v) for v in rng.integers(1, 7, size=3))
        gamma = gammas[i % 5]
        mode = INFER if i % 2 == 0 else TRAIN
        d = route(torch.randn(b, hp, wp, generator=gen), gamma, mode, generator=gen)
        both = torch.cat([d.idx_hard, d.idx_easy])
        assert both.numel() == b * hp * wp
        assert torch.equal(both.sort().values, torch.arange(b * hp * wp))
        if mode == INFER:
            assert d.idx_hard.numel() == b * hard_count(gamma, hp * wp)
            assert hard_count(gamma, hp * wp) == math.floor(gamma * hp * wp + 0.5)
    return f"{PARTITION_DECISIONS} decisions"


def _perturb(module, scale, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


@criterion(3, "finite-difference gradient suite at float64")
def test_03_gradients():
    from catair.channel_blocks import GatedFFN, SEChannelAttention, TransposedChannelAttention

    start = time.perf_counter()
    worst_block = 0.0
    for k, make in enumerate((lambda: SEChannelAttention(4), lambda: TransposedChannelAttention(4),
                              lambda: GatedFFN(4))):
        blk = _perturb(make().double(), 0.3, k)
        z = torch.rand(1, 4, 2, 2, dtype=torch.float64) * 2 - 1
        w = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        err, name = finite_difference_error(blk, lambda: (blk(z) * w).sum())
        assert err < GRAD_TOL_BLOCK, (type(blk).__name__, name, err)
        worst_block = max(worst_block, err)

    torch.manual_seed(0)
    layer = _perturb(CrossFeatureSpatialAttention(4, window=2, tau=1.5, global_channels=2).double(), 0.2, 7)
    layer.gumbel_noise, layer.straight_through = False, False
    z = torch.rand(1, 4, 4, 4, dtype=torch.float64) * 2 - 1
    img = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    w = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    err_sp, name = finite_difference_error(layer, lambda: (layer(z, img, 0.5, TRAIN)[0] * w).sum())
    assert err_sp < GRAD_TOL_E2E, (name, err_sp)

    cfg = ModelConfig(channels=4, enc_blocks=(1, 1, 1, 1), dec_blocks=(1, 1, 1), window=2, tau=1.5,
                      prompt_size=4, global_channels=2)
    model = CatAIR(cfg).double()
    with torch.no_grad():
        for m in model.spatial_layers():
            m.router.mask_head[-1].weight.normal_(0, 0.3)
        model.output.weight.normal_(0, 0.3)
    model.set_routing(noise=False, straight_through=False)
    img = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    target = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    err_e2e, name = finite_difference_error(
        model, lambda: ((model(img, 0.5, TRAIN).restored - target) ** 2).sum(), fraction=0.01, seed=1)
    assert err_e2e < GRAD_TOL_E2E, (name, err_e2e)
    elapsed = time.perf_counter() - start
    assert elapsed < GRAD_SECONDS
    return f"blocks {worst_block:.1e}, spatial {err_sp:.1e}, end-to-end {err_e2e:.1e}, {elapsed:.1f}s"


@criterion(4, "FLOPs closed forms and exact counter")
def test_04_flops():
    assert flops_se(128, 128, 48) == 125_829_120
    assert flops_bottleneck(16, 16, 128) == 43_450_368
    mixed, complex_ = flops_cross_layer(1, 1, 48)
    assert (mixed, complex_) == (51_498, 165_690)
    assert mixed / complex_ == Fraction(51_498, 165_690)
    assert flops_spatial(1, 1, 48, 1.5, 8, 0.5, 3) == (10_992, 20_736)
    for C in (2, 16, 48, 128):
        assert sum(count_se(128 * 128, C)) == flops_se(128, 128, C)
        assert sum(count_transposed(16 * 16, C)) == flops_bottleneck(16, 16, C)
    model = CatAIR(ModelConfig())
    rep = count_exact(model, (128, 128), 0.5, convention="table", channels="constant")
    assert rep.subtotal("channel_se") == Fraction(13, 2) * flops_se(128, 128, 16)
    assert rep.subtotal("channel_transposed") == Fraction(1, 16) * flops_bottleneck(128, 128, 16)
    return f"reduction {float(1 - mixed / complex_):.4f}"


@criterion(5, "identity network and per-block residual structure")
def test_05_identity():
    torch.manual_seed(0)
    model = CatAIR(ModelConfig(channels=8, enc_blocks=(1, 1, 1, 1), dec_blocks=(1, 1, 1), window=4))
    model.zero_output_projections()
    img = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        for mode in (INFER, TRAIN):
            assert torch.equal(model(img, mode=mode).restored, img)
        for bid, blk in model.blocks():
            lvl = int(bid[3])
            z = torch.randn(1, blk.spatial_attn.channels, 32 >> (lvl - 1), 32 >> (lvl - 1))
            # each of the four sublayers is the identity on its own
            assert torch.equal(blk.channel_attn(z), z) and torch.equal(blk.ffn1(z), z)
            assert torch.equal(blk.spatial_attn(z, img[:1], 0.5, INFER)[0], z) and torch.equal(blk.ffn2(z), z)
            assert torch.equal(blk(z, img[:1], 0.5, INFER)[0], z)
    return f"{sum(1 for _ in model.blocks())} blocks"


@criterion(6, "EMA law")
def test_06_ema():
    shadow = [torch.tensor([1.0], dtype=torch.float64)]
    ema_update(shadow, [torch.tensor([0.0], dtype=torch.float64)], 0.999)
    assert shadow[0].item() == 0.999
    theta = torch.randn(16, dtype=torch.float64)
    s0 = torch.randn(16, dtype=torch.float64)
    shadow = [s0.clone()]
    for _ in range(10):
        ema_update(shadow, [theta], 0.999)
    err = (shadow[0] - (theta + 0.999 ** 10 * (s0 - theta))).abs().max().item()
    assert err < EMA_TOL
    model = torch.nn.Linear(3, 3).double()
    ema = EMA(model, 0.999)
    ema.update(model)
    assert torch.equal(ema.shadow["weight"], model.weight.detach())
    return f"max error {err:.1e}"


@criterion(7, "loss law")
def test_07_loss():
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    assert loss(x, x, [0.5], 0.5).total.item() == 0.0
    assert loss(x, x, [0.6], 0.5).ratio_reg.item() == (0.6 - 0.5) ** 2
    t = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
    # a float64 mean of 192 copies of 0.1 is exact up to its rounding: allow 4 ulp
    assert abs(loss(t + 0.1, t, [0.5], 0.5).l1.item() - 0.1) <= 4 * math.ulp(0.1)
    parts = loss(torch.rand(2, 3, 8, 8, dtype=torch.float64), x, [0.1, 0.7, 0.4], 0.5)
    assert parts.total.item() == parts.l1.item() + (parts.mean_gamma.item() - 0.5) ** 2
    return ""


OVERFIT_CONFIG = ModelConfig(channels=16, enc_blocks=(1, 1, 1, 1), dec_blocks=(1, 1, 1), window=8)
TOY_CONFIG = ModelConfig(channels=16, enc_blocks=(1, 1, 1, 1), dec_blocks=(1, 1, 1), window=4)
TOY_TASKS = ("denoise", "derain", "dehaze")


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return {
        "train": build_dataset(root / "train", {t: 16 for t in TOY_TASKS}, size=64, seed=0),
        "held": build_dataset(root / "held", {t: 4 for t in TOY_TASKS}, size=64, seed=1, prefix="ho_"),
        "train4": build_dataset(root / "train4", weights={"denoise": 1, "derain": 1, "dehaze": 1, "deblur": 2},
                                total=80, size=64, seed=2, prefix="x_"),
        "held_new": build_dataset(root / "held_new", {"deblur": 8}, size=64, seed=3, prefix="hb_"),
    }


@pytest.fixture(scope="module")
def toy_model(toy_data):
    res = train(build_model(TOY_CONFIG, 0), toy_data["train"], TOY_STEPS, lr=1e-3, seed=0, use_ema=False,
                batch_size=4, crop=32)
    return res.model


TOY_STEPS = 1000
EXTEND_STEPS = 800
EXTEND_LR = 5e-4
EXTEND_BETA = 0.99


@criterion(8, "toy training: overfit and held-out denoising")
def test_08_toy_training(toy_data, toy_model):
    pairs = []
    for i in range(8):
        c = synth_clean(64, 0, f"img{i}")
        pairs.append((gen_noise(c, 25, seed=i).degraded, c.pixels))
    start = time.perf_counter()
    res = train(build_model(OVERFIT_CONFIG, 0), pairs, OVERFIT_STEPS, lr=2e-3, seed=0, use_ema=False,
                batch_size=4, crop=64, augment=False)
    elapsed = time.perf_counter() - start
    final = res.log[-1]["l1"]
    assert len(res.log) == OVERFIT_STEPS and res.log[-1]["step"] == OVERFIT_STEPS
    assert final < OVERFIT_L1, final
    assert elapsed < OVERFIT_SECONDS, elapsed

    score = evaluate(toy_model, toy_data["held"]).tasks["denoise"]
    assert score.psnr_mean > score.degraded_psnr_mean, (score.psnr_mean, score.degraded_psnr_mean)
    return (f"overfit l1 {final:.4f} in {elapsed:.0f}s; held-out denoise "
            f"{score.psnr_mean:.2f} dB vs degraded {score.degraded_psnr_mean:.2f} dB")


@criterion(9, "smooth extension from 3 to 4 tasks")
def test_09_extension(toy_data, toy_model):
    before = evaluate(toy_model, toy_data["held"])
    plan = ExtensionPlan(["deblur"], TOY_TASKS, lr_base=EXTEND_LR, ema_beta=EXTEND_BETA)

    grown = extend(toy_model, plan, toy_data["train4"], 0, seed=0, crop=32)
    for old, new in zip(toy_model.prompts, grown.model.prompts):
        assert new.bank.shape[0] == 4 and torch.equal(new.bank[:3], old.bank)

    res = extend(toy_model, plan, toy_data["train4"], EXTEND_STEPS, seed=0, batch_size=4, crop=32)
    after = evaluate(res.best, toy_data["held"])
    drops = {t: before.tasks[t].psnr_mean - after.tasks[t].psnr_mean for t in TOY_TASKS}
    assert all(d <= EXTENSION_DB for d in drops.values()), drops
    new = evaluate(res.best, toy_data["held_new"]).tasks["deblur"]
    assert new.psnr_mean > new.degraded_psnr_mean, (new.psnr_mean, new.degraded_psnr_mean)
    worst = max(drops, key=drops.get)
    return (f"worst old-task change {-drops[worst]:+.2f} dB ({worst}); deblur {new.psnr_mean:.2f} dB "
            f"vs degraded {new.degraded_psnr_mean:.2f} dB")


@criterion(10, "mask contract and byte-identical checkpoint round trip")
def test_10_masks_and_checkpoint(tmp_path):
    torch.manual_seed(0)
    model = CatAIR(ModelConfig(channels=8, enc_blocks=(1, 1, 1, 1), dec_blocks=(1, 1, 1), window=4)).eval()
    with torch.no_grad():
        model.output.weight.normal_(0, 0.1)
    img = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        for gamma, value in ((1.0, 255), (0.0, 0)):
            masks = mask_images(model(img, gamma, INFER), (32, 32))
            assert len(masks) == 7
            assert all(m.shape == (32, 32) and (m == value).all() for m in masks.values())
        save_checkpoint(model, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        a = model(img, 0.5, INFER).restored.numpy().tobytes()
        b = loaded(img, 0.5, INFER).restored.numpy().tobytes()
    assert a == b
    return ""


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print("\n".join(summary_lines()))
    sys.exit(code)
