"""Content-aware spatial attention.

A patch router scores every ``q x q`` patch of a feature map. Hard patches go
through windowed self-attention whose keys and values come from a larger,
co-centred ``tau*q`` window; easy patches go through a cheap linear +
depthwise-conv modulation. Patches are indexed row-major and flattened across
the batch, so patch ``i`` of image ``b`` has flat index ``b * P + i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import ConfigError
from .channel_blocks import LayerNorm2d

TRAIN = "train"
INFER = "infer"


def positional_grid(height, width, dtype=torch.float32, device=None):
    """``(H, W, 2)`` grid with channel 0 = ``2h/H - 1`` and channel 1 = ``2w/W - 1``."""
    h = torch.arange(height, dtype=dtype, device=device) * 2 / height - 1
    w = torch.arange(width, dtype=dtype, device=device) * 2 / width - 1
    return torch.stack(torch.meshgrid(h, w, indexing="ij"), dim=-1)


def hard_count(gamma, num_patches):
    """Number of hard patches at inference, ``gamma * P`` rounded half up."""
    return int(math.floor(gamma * num_patches + 0.5))


def to_patches(z, q):
    """``(B, C, H, W)`` -> ``(B*P, q*q, C)`` with patches and tokens in row-major order."""
    b, c, h, w = z.shape
    x = z.reshape(b, c, h // q, q, w // q, q).permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b * (h // q) * (w // q), q * q, c)


def from_patches(patches, shape, q):
    """Inverse of :func:`to_patches` for an output of ``shape = (B, C, H, W)``."""
    b, c, h, w = shape
    x = patches.reshape(b, h // q, w // q, q, q, c).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, h, w)


def gather_patches(z, idx, q):
    return to_patches(z, q)[idx]


def scatter_patches(parts, shape, q):
    """Assemble ``[(idx, values), ...]`` into a ``(B, C, H, W)`` map; each patch must be written once."""
    b, c, h, w = shape
    total = b * (h // q) * (w // q)
    ref = next(v for _, v in parts)
    out = ref.new_zeros(total, q * q, c)
    for idx, values in parts:
        if idx.numel():
            out = out.index_copy(0, idx, values)
    return from_patches(out, shape, q)


def window_padding(q, window):
    """Zero padding ``(before, after)`` that centres a ``window`` on each ``q`` patch."""
    extra = window - q
    return (extra + 1) // 2, extra // 2


def kv_windows(z, q, window):
    """Overlapping ``window x window`` neighbourhoods, stride ``q``: ``(B*P, window**2, C)``."""
    b, c, h, w = z.shape
    before, after = window_padding(q, window)
    padded = F.pad(z, (before, after, before, after))
    cols = F.unfold(padded, kernel_size=window, stride=q)
    p = cols.shape[-1]
    return cols.reshape(b, c, window * window, p).permute(0, 3, 2, 1).reshape(b * p, window * window, c)


@dataclass
class RouterDecision:
    logits: torch.Tensor      # (B, H/q, W/q)
    hard_prob: torch.Tensor   # soft probability of "hard", same shape
    hard: torch.Tensor        # 0/1 decision; straight-through in train mode
    idx_hard: torch.Tensor    # ascending flat patch indices
    idx_easy: torch.Tensor
    gamma_j: torch.Tensor     # realized hard fraction (scalar tensor)
    mode: str

    @property
    def num_patches(self):
        return self.logits.numel()

    def mask(self):
        """Boolean ``(B, H/q, W/q)`` array of hard patches."""
        m = torch.zeros(self.num_patches, dtype=torch.bool)
        m[self.idx_hard.cpu()] = True
        return m.reshape(self.logits.shape)


def route(logits, gamma=0.5, mode=INFER, temperature=1.0, noise=True,
          straight_through=True, generator=None):
    """Turn per-patch logits ``(B, Hp, Wp)`` into a hard/easy partition.

    ``infer`` picks the top ``round(gamma * P)`` patches of each image by logit,
    ties going to the lower patch index. ``train`` draws a two-class
    Gumbel-softmax sample per patch and uses the straight-through estimator.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    b = logits.shape[0]
    flat = logits.reshape(b, -1)
    per_image = flat.shape[1]
    soft_logit = flat
    if mode == INFER:
        n = hard_count(gamma, per_image)
        order = torch.argsort(-flat.detach(), dim=1, stable=True)[:, :n]
        hard = torch.zeros_like(flat)
        hard.scatter_(1, order, 1.0)
        prob = torch.sigmoid(flat)
    elif mode == TRAIN:
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        if noise:
            u = torch.rand((2,) + flat.shape, generator=generator, dtype=flat.dtype, device=flat.device)
            g = -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))
            soft_logit = flat + g[0] - g[1]
        prob = torch.sigmoid(soft_logit / temperature)
        bits = (soft_logit > 0).to(flat.dtype)
        hard = bits - prob.detach() + prob if straight_through else prob
    else:
        raise ValueError(f"mode must be {TRAIN!r} or {INFER!r}, got {mode!r}")

    chosen = hard.detach() > 0.5 if (mode == INFER or straight_through) else soft_logit.detach() > 0
    offsets = torch.arange(b, device=flat.device)[:, None] * per_image
    flat_ids = (torch.arange(per_image, device=flat.device)[None, :] + offsets).reshape(-1)
    chosen = chosen.reshape(-1)
    return RouterDecision(
        logits=logits,
        hard_prob=prob.reshape(logits.shape),
        hard=hard.reshape(logits.shape),
        idx_hard=flat_ids[chosen],
        idx_easy=flat_ids[~chosen],
        gamma_j=hard.mean(),
        mode=mode,
    )


class PatchRouter(nn.Module):
    """Predicts one logit per patch from ``[Z, global(I_D), positional grid]``."""

    def __init__(self, channels, window=8, global_channels=8, hidden=16, temperature=1.0):
        super().__init__()
        if temperature <= 0:
            raise ConfigError("router temperature must be positive")
        self.window = window
        self.temperature = temperature
        self.global_encoder = nn.Sequential(
            nn.Conv2d(3, global_channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(global_channels, global_channels, 3, padding=1),
        )
        self.mask_head = nn.Sequential(
            nn.Conv2d(channels + global_channels + 2, hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, 1, 3, padding=1),
        )

    def logits(self, z, image):
        b, _, h, w = z.shape
        q = self.window
        if h % q or w % q:
            raise ConfigError(f"feature map {h}x{w} is not divisible by window {q}")
        if image.shape[-2:] != (h, w):
            image = F.interpolate(image, size=(h, w), mode="bilinear", align_corners=False,
                                  antialias=image.shape[-1] > w)
        pos = positional_grid(h, w, z.dtype, z.device).permute(2, 0, 1).expand(b, 2, h, w)
        m = self.mask_head(torch.cat([z, self.global_encoder(image), pos], dim=1))
        return F.avg_pool2d(m, q)[:, 0]

    def forward(self, z, image, gamma=0.5, mode=INFER, noise=True, straight_through=True, generator=None):
        return route(self.logits(z, image), gamma, mode, self.temperature, noise, straight_through, generator)


class CrossFeatureSpatialAttention(nn.Module):
    """Routed spatial attention sublayer; returns ``(proj(mix) + Z, decision)``."""

    def __init__(self, channels, window=8, tau=1.5, kernel=3, global_channels=8, temperature=1.0):
        super().__init__()
        kv = tau * window
        if tau < 1 or abs(kv - round(kv)) > 1e-9:
            raise ConfigError(f"tau={tau} with window={window} must give an integral window >= {window}")
        self.channels = channels
        self.window = window
        self.kv_window = int(round(kv))
        self.kernel = kernel
        self.norm = LayerNorm2d(channels)
        self.router = PatchRouter(channels, window, global_channels, temperature=temperature)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.log_alpha = nn.Parameter(torch.tensor(0.5 * math.log(channels)))
        self.to_easy = nn.Linear(channels, channels, bias=False)
        self.easy_dw = nn.Conv2d(channels, channels, kernel, padding=kernel // 2, groups=channels, bias=False)
        self.proj_out = nn.Conv2d(channels, channels, 1, bias=False)
        self.gumbel_noise = True
        self.straight_through = True

    @property
    def alpha(self):
        return self.log_alpha.exp()

    def attention_map(self, x, idx):
        q = self.to_q(gather_patches(x, idx, self.window))
        k = self.to_k(kv_windows(x, self.window, self.kv_window)[idx])
        return torch.softmax(q @ k.transpose(-2, -1) / self.alpha, dim=-1)

    def attn_branch(self, x, idx):
        """Self-attention for patches ``idx`` of the normalised map ``x``: ``(n, q*q, C)``."""
        attn = self.attention_map(x, idx)
        v = self.to_v(kv_windows(x, self.window, self.kv_window)[idx])
        return attn @ v

    def conv_branch(self, x, idx):
        """Linear map then elementwise modulation by a per-patch depthwise conv: ``(n, q*q, C)``."""
        q = self.window
        v = self.to_easy(gather_patches(x, idx, q))
        n, _, c = v.shape
        grid = v.transpose(1, 2).reshape(n, c, q, q)
        return v * self.easy_dw(grid).reshape(n, c, q * q).transpose(1, 2)

    def forward(self, z, image, gamma=0.5, mode=INFER, generator=None):
        x = self.norm(z)
        decision = self.router(x, image, gamma, mode, self.gumbel_noise, self.straight_through, generator)
        if mode == INFER:
            mixed = scatter_patches(
                [(decision.idx_hard, self.attn_branch(x, decision.idx_hard)),
                 (decision.idx_easy, self.conv_branch(x, decision.idx_easy))],
                z.shape, self.window)
        else:
            every = torch.arange(decision.num_patches, device=z.device)
            h = decision.hard.reshape(-1, 1, 1)
            blend = h * self.attn_branch(x, every) + (1 - h) * self.conv_branch(x, every)
            mixed = from_patches(blend, z.shape, self.window)
        return self.proj_out(mixed) + z, decision

    def output_projections(self):
        return [self.proj_out]
