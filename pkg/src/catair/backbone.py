"""Four-level U-shaped restoration network with alternating attention blocks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ConfigError
from .channel_blocks import GatedFFN, init_weights, make_channel_attention, select_channel_variant
from .spatial_blocks import INFER, TRAIN, CrossFeatureSpatialAttention

DEFAULT_TASKS = ("denoise", "derain", "dehaze")


@dataclass
class ModelConfig:
    channels: int = 16
    enc_blocks: tuple = (2, 4, 4, 4)
    dec_blocks: tuple = (4, 4, 2)  # decoder levels 3, 2, 1
    window: int = 8
    tau: float = 1.5
    gamma0: float = 0.5
    bottleneck_heads: int = 1
    tasks: tuple = DEFAULT_TASKS
    prompt_size: int = 16
    kernel: int = 3
    router_temperature: float = 1.0
    global_channels: int = 8

    def __post_init__(self):
        self.enc_blocks = tuple(int(b) for b in self.enc_blocks)
        self.dec_blocks = tuple(int(b) for b in self.dec_blocks)
        self.tasks = tuple(self.tasks)
        if len(self.enc_blocks) != 4 or len(self.dec_blocks) != 3:
            raise ConfigError("enc_blocks needs 4 entries and dec_blocks 3")
        if any(b < 0 for b in self.enc_blocks + self.dec_blocks):
            raise ConfigError("block counts must be non-negative")
        if self.channels < 2 or self.channels % 2:
            raise ConfigError(f"channels must be even and >= 2, got {self.channels}")
        if (8 * self.channels) % self.bottleneck_heads:
            raise ConfigError(f"bottleneck_heads={self.bottleneck_heads} must divide {8 * self.channels}")
        if not 0.0 <= self.gamma0 <= 1.0:
            raise ConfigError("gamma0 must lie in [0, 1]")
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"tasks must be non-empty and unique, got {self.tasks}")
        kv = self.tau * self.window
        if self.tau < 1 or abs(kv - round(kv)) > 1e-9:
            raise ConfigError(f"tau * window = {kv} must be an integer >= window")

    def level_channels(self, level):
        return self.channels * 2 ** (level - 1)

    @property
    def input_multiple(self):
        """Input sides must be multiples of this so every level tiles into windows."""
        return self.window * 8

    def check_input(self, height, width):
        for level in range(1, 5):
            h, w = height >> (level - 1), width >> (level - 1)
            if height % 2 ** (level - 1) or width % 2 ** (level - 1) or h % self.window or w % self.window:
                raise ConfigError(
                    f"input {height}x{width} gives a {height / 2 ** (level - 1):g}x{width / 2 ** (level - 1):g} "
                    f"map at level {level}, not divisible by window {self.window}")

    @property
    def num_spatial_blocks(self):
        return sum(self.enc_blocks) + sum(self.dec_blocks)

    def to_dict(self):
        d = asdict(self)
        for k in ("enc_blocks", "dec_blocks", "tasks"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class CatAIRBlock(nn.Module):
    """Channel attention, FFN, routed spatial attention, FFN; every sublayer residual."""

    def __init__(self, dim, variant, config: ModelConfig):
        super().__init__()
        self.variant = variant
        self.channel_attn = make_channel_attention(variant, dim, config.bottleneck_heads)
        self.ffn1 = GatedFFN(dim)
        self.spatial_attn = CrossFeatureSpatialAttention(
            dim, config.window, config.tau, config.kernel, config.global_channels, config.router_temperature)
        self.ffn2 = GatedFFN(dim)

    def forward(self, z, image, gamma=0.5, mode=INFER, generator=None):
        z = self.ffn1(self.channel_attn(z))
        z, decision = self.spatial_attn(z, image, gamma, mode, generator)
        return self.ffn2(z), decision

    def output_projections(self):
        return [m for sub in (self.channel_attn, self.ffn1, self.spatial_attn, self.ffn2)
                for m in sub.output_projections()]


class Downsample(nn.Module):
    """Pixel-unshuffle by 2 then a pointwise conv: ``(C, H, W) -> (2C, H/2, W/2)``."""

    def __init__(self, dim):
        super().__init__()
        self.proj = nn.Conv2d(4 * dim, 2 * dim, 1, bias=False)

    def forward(self, z):
        return self.proj(F.pixel_unshuffle(z, 2))


class Upsample(nn.Module):
    """Pointwise conv then pixel-shuffle by 2: ``(C, H, W) -> (C/2, 2H, 2W)``."""

    def __init__(self, dim):
        super().__init__()
        self.proj = nn.Conv2d(dim, 2 * dim, 1, bias=False)

    def forward(self, z):
        return F.pixel_shuffle(self.proj(z), 2)


class PromptBlock(nn.Module):
    """Task prompt bank: feature-conditioned softmax mix of ``T`` learnable components."""

    def __init__(self, dim, num_tasks, size=16):
        super().__init__()
        self.components = nn.ParameterList(
            [nn.Parameter(torch.rand(dim, size, size)) for _ in range(num_tasks)])
        self.mix = nn.Linear(dim, num_tasks)
        self.fuse = nn.Conv2d(2 * dim, dim, 3, padding=1, bias=False)

    @property
    def bank(self):
        """All components stacked: ``(T, C, size, size)``."""
        return torch.stack(list(self.components))

    @property
    def num_tasks(self):
        return len(self.components)

    def weights(self, z):
        return torch.softmax(self.mix(z.mean(dim=(2, 3))), dim=-1)

    def generate(self, z):
        prompt = torch.einsum("bt,tchw->bchw", self.weights(z), self.bank)
        return F.interpolate(prompt, size=z.shape[-2:], mode="bilinear", align_corners=False)

    def forward(self, z):
        return self.fuse(torch.cat([z, self.generate(z)], dim=1))

    @torch.no_grad()
    def grow(self, extra, logit_offset=4.0):
        """Append ``extra`` components; old rows and mixing rows are kept bit-exactly.

        New components start at the mean of the old ones and new mixing logits
        start ``logit_offset`` below the mean old bias, so the initial mixture
        barely moves.
        """
        old = self.bank
        for _ in range(extra):
            self.components.append(nn.Parameter(old.mean(0).clone()))
        mix = nn.Linear(self.mix.in_features, self.mix.out_features + extra).to(old)
        mix.weight.zero_()
        mix.weight[: self.mix.out_features] = self.mix.weight
        mix.bias.fill_(float(self.mix.bias.mean()) - logit_offset)
        mix.bias[: self.mix.out_features] = self.mix.bias
        self.mix = mix


@dataclass
class ModelOutput:
    restored: torch.Tensor
    decisions: list
    latent: torch.Tensor | None = None
    block_ids: list = field(default_factory=list)

    @property
    def gammas(self):
        return [d.gamma_j for d in self.decisions]


class CatAIR(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        dims = [cfg.level_channels(level) for level in range(1, 5)]
        self.shallow = nn.Conv2d(3, cfg.channels, 3, padding=1)
        self.encoder = nn.ModuleList(
            nn.ModuleList(CatAIRBlock(dims[i], select_channel_variant(i + 1, "encoder"), cfg)
                          for _ in range(cfg.enc_blocks[i]))
            for i in range(4))
        self.down = nn.ModuleList(Downsample(dims[i]) for i in range(3))
        # decoder lists run level 3, 2, 1
        self.up = nn.ModuleList(Upsample(dims[i + 1]) for i in (2, 1, 0))
        self.skip_fuse = nn.ModuleList(nn.Conv2d(2 * dims[i], dims[i], 1, bias=False) for i in (2, 1, 0))
        self.prompts = nn.ModuleList(PromptBlock(dims[i], len(cfg.tasks), cfg.prompt_size) for i in (2, 1, 0))
        self.decoder = nn.ModuleList(
            nn.ModuleList(CatAIRBlock(dims[i], select_channel_variant(i + 1, "decoder"), cfg)
                          for _ in range(n))
            for i, n in zip((2, 1, 0), cfg.dec_blocks))
        self.output = nn.Conv2d(cfg.channels, 3, 3, padding=1)
        init_weights(self)
        for m in self.spatial_layers():
            nn.init.zeros_(m.router.mask_head[-1].weight)
        # start as the identity on I_D through the global residual
        nn.init.zeros_(self.output.weight)

    def blocks(self):
        """``(block_id, block)`` pairs in execution order; ids look like ``enc1_0``."""
        for i, level in enumerate(self.encoder):
            for j, blk in enumerate(level):
                yield f"enc{i + 1}_{j}", blk
        for level_no, level in zip((3, 2, 1), self.decoder):
            for j, blk in enumerate(level):
                yield f"dec{level_no}_{j}", blk

    def spatial_layers(self):
        return [blk.spatial_attn for _, blk in self.blocks()]

    def set_routing(self, noise=None, straight_through=None, temperature=None):
        for layer in self.spatial_layers():
            if noise is not None:
                layer.gumbel_noise = noise
            if straight_through is not None:
                layer.straight_through = straight_through
            if temperature is not None:
                layer.router.temperature = temperature

    def forward(self, image, gamma=None, mode=None, generator=None):
        cfg = self.config
        gamma = cfg.gamma0 if gamma is None else gamma
        mode = mode or (TRAIN if self.training else INFER)
        cfg.check_input(*image.shape[-2:])
        decisions, ids = [], []

        def run(blocks, z, prefix):
            for j, blk in enumerate(blocks):
                z, d = blk(z, image, gamma, mode, generator)
                decisions.append(d)
                ids.append(f"{prefix}_{j}")
            return z

        z = self.shallow(image)
        skips = []
        for i, level in enumerate(self.encoder):
            z = run(level, z, f"enc{i + 1}")
            if i < 3:
                skips.append(z)
                z = self.down[i](z)
        latent = z
        for k, level_no in enumerate((3, 2, 1)):
            z = self.up[k](z)
            z = self.skip_fuse[k](torch.cat([z, skips[level_no - 1]], dim=1))
            z = self.prompts[k](z)
            z = run(self.decoder[k], z, f"dec{level_no}")
        restored = self.output(z) + image
        return ModelOutput(restored, decisions, latent, ids)

    def output_projections(self):
        projs = [m for _, blk in self.blocks() for m in blk.output_projections()]
        return projs + [self.output]

    @torch.no_grad()
    def zero_output_projections(self):
        for m in self.output_projections():
            m.weight.zero_()
            if m.bias is not None:
                m.bias.zero_()
        return self

    @torch.no_grad()
    def add_tasks(self, names, logit_offset=4.0):
        clash = set(names) & set(self.config.tasks)
        if clash or len(set(names)) != len(names):
            raise ValueError(f"task names collide with existing tasks: {sorted(clash) or names}")
        for bank in self.prompts:
            bank.grow(len(names), logit_offset)
        self.config.tasks = tuple(self.config.tasks) + tuple(names)
        return self


def save_checkpoint(model: CatAIR, path, extra: dict | None = None):
    """Write ``manifest.json``, ``weights.bin`` (little-endian float32) and ``config.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / "weights.bin", "wb") as fh:
        for name, tensor in model.state_dict().items():
            data = tensor.detach().cpu().numpy().astype("<f4").tobytes()
            entries.append({"name": name, "shape": list(tensor.shape), "dtype": "f32", "byte_offset": offset})
            fh.write(data)
            offset += len(data)
    (path / "manifest.json").write_text(json.dumps(entries, indent=1))
    config = model.config.to_dict()
    if extra:
        config["extra"] = extra
    (path / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> CatAIR:
    path = Path(path)
    for name in ("manifest.json", "weights.bin", "config.json"):
        if not (path / name).exists():
            raise FileNotFoundError(f"checkpoint {path} is missing {name}")
    config = json.loads((path / "config.json").read_text())
    config.pop("extra", None)
    model = CatAIR(ModelConfig.from_dict(config))
    raw = (path / "weights.bin").read_bytes()
    state = {}
    for e in json.loads((path / "manifest.json").read_text()):
        if e["dtype"] != "f32":
            raise ValueError(f"unsupported dtype {e['dtype']} for {e['name']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=e["byte_offset"])
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    model.load_state_dict(state)
    return model.eval()
