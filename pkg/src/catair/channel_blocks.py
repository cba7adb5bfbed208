"""Channel attention sublayers and the gated feed-forward network.

All tensors are ``(B, C, H, W)``. Each sublayer returns ``f(Z) + Z``.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

SE = "se"
TRANSPOSED = "transposed"


class LayerNorm2d(nn.Module):
    """Per-pixel layer norm over the channel axis."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def layer_norm(z, scale=None, shift=None, eps=1e-6):
    """Functional form of :class:`LayerNorm2d` for ``(B, C, H, W)`` input."""
    ln = LayerNorm2d(z.shape[1], eps).to(z)
    with torch.no_grad():
        if scale is not None:
            ln.weight.copy_(torch.as_tensor(scale))
        if shift is not None:
            ln.bias.copy_(torch.as_tensor(shift))
    return ln(z)


def _pw(cin, cout, bias=False):
    return nn.Conv2d(cin, cout, 1, bias=bias)


def _dw(channels, k=3):
    return nn.Conv2d(channels, channels, k, padding=k // 2, groups=channels, bias=False)


class SEChannelAttention(nn.Module):
    """Lightweight shallow-level channel attention.

    Pointwise then depthwise projection, a simple gate that multiplies the two
    channel halves, squeeze-and-excitation scaling, and a pointwise output
    projection back to ``C`` channels.
    """

    def __init__(self, channels):
        super().__init__()
        if channels < 2 or channels % 2:
            raise ValueError(f"SE channel attention needs an even channel count, got {channels}")
        self.channels = channels
        self.norm = LayerNorm2d(channels)
        self.pw = _pw(channels, channels)
        self.dw = _dw(channels)
        self.excite = nn.Conv2d(channels // 2, channels // 2, 1, bias=True)
        self.proj_out = _pw(channels // 2, channels)

    def forward(self, z):
        v = self.dw(self.pw(self.norm(z)))
        a, b = v.chunk(2, dim=1)
        v = a * b
        scale = self.excite(v.mean(dim=(2, 3), keepdim=True))
        return self.proj_out(v * scale) + z

    def output_projections(self):
        return [self.proj_out]


class TransposedChannelAttention(nn.Module):
    """Bottleneck attention with a ``C x C`` (per head) map over channels.

    Query and key are L2-normalised along the flattened spatial axis before the
    product; ``alpha`` is a learnable positive temperature per head.
    """

    def __init__(self, channels, heads=1):
        super().__init__()
        if heads < 1 or channels % heads:
            raise ValueError(f"heads={heads} does not divide channels={channels}")
        self.channels = channels
        self.heads = heads
        self.norm = LayerNorm2d(channels)
        self.pw_q, self.pw_k, self.pw_v = (_pw(channels, channels) for _ in range(3))
        self.dw_q, self.dw_k, self.dw_v = (_dw(channels) for _ in range(3))
        self.log_alpha = nn.Parameter(torch.zeros(heads, 1, 1))
        self.proj_out = _pw(channels, channels)
        self.last_attn = None

    @property
    def alpha(self):
        return self.log_alpha.exp()

    def attend(self, z):
        """Return ``(mixed values, attention map)`` before the output projection."""
        b, c, h, w = z.shape
        x = self.norm(z)
        q = self.dw_q(self.pw_q(x)).reshape(b, self.heads, c // self.heads, h * w)
        k = self.dw_k(self.pw_k(x)).reshape(b, self.heads, c // self.heads, h * w)
        v = self.dw_v(self.pw_v(x)).reshape(b, self.heads, c // self.heads, h * w)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.alpha, dim=-1)
        return (attn @ v).reshape(b, c, h, w), attn

    def forward(self, z):
        out, attn = self.attend(z)
        self.last_attn = attn.detach()
        return self.proj_out(out) + z

    def output_projections(self):
        return [self.proj_out]


class GatedFFN(nn.Module):
    """Expand to ``2C``, depthwise 3x3, multiply halves, contract back to ``C``."""

    def __init__(self, channels):
        super().__init__()
        self.norm = LayerNorm2d(channels)
        self.expand = _pw(channels, 2 * channels)
        self.dw = _dw(2 * channels)
        self.contract = _pw(channels, channels)

    def forward(self, z):
        a, b = self.dw(self.expand(self.norm(z))).chunk(2, dim=1)
        return self.contract(a * b) + z

    def output_projections(self):
        return [self.contract]


def select_channel_variant(level, side="encoder"):
    """SE at levels 1-3 on either side, transposed attention at the level-4 bottleneck."""
    if level not in (1, 2, 3, 4):
        raise ValueError(f"level must be 1..4, got {level}")
    if side not in ("encoder", "decoder"):
        raise ValueError(f"side must be 'encoder' or 'decoder', got {side!r}")
    if level == 4 and side == "decoder":
        raise ValueError("the decoder has no level 4")
    return TRANSPOSED if level == 4 else SE


def make_channel_attention(variant, channels, heads=1):
    if variant == SE:
        return SEChannelAttention(channels)
    if variant == TRANSPOSED:
        return TransposedChannelAttention(channels, heads)
    raise ValueError(f"unknown channel attention variant {variant!r}")


def init_weights(module):
    """Truncated-normal init for convs and linears used across the network."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            nn.init.trunc_normal_(m.weight, std=1.0 / math.sqrt(fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
