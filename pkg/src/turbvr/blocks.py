"""Building blocks for the restoration network.

All blocks operate on 5D feature volumes (B, C, T, H, W) with the temporal
extent fixed at T=2 (previous + current). Residual-branch output
projections and flow heads are zero-initialized by default so a freshly
built block is an exact identity; pass ``zero_init=False`` to get a fully
random initialization (used by gradient tests).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .video import warp_tensor


@dataclass
class BlockConfig:
    """Shared width/shape settings for all blocks.

    channels_per_scale lists the feature width at scales L1 (full
    resolution), L2 (half) and L3 (quarter); attention_heads must divide
    every width it is applied to.
    """

    channels_per_scale: list[int] = field(default_factory=lambda: [40, 80, 160])
    attention_heads: int = 4
    ffn_expansion: float = 2.66
    norm_epsilon: float = 1e-5

    def __post_init__(self) -> None:
        cs = self.channels_per_scale
        if len(cs) != 3:
            raise ValueError(f"channels_per_scale needs exactly 3 entries, got {cs}")
        if not (cs[0] <= cs[1] <= cs[2]):
            raise ValueError(f"channel widths must be non-decreasing, got {cs}")
        for c in cs:
            if c % self.attention_heads != 0:
                raise ValueError(
                    f"attention_heads={self.attention_heads} does not divide channel width {c}"
                )
        if self.ffn_expansion < 1.0:
            raise ValueError(f"ffn_expansion must be >= 1, got {self.ffn_expansion}")
        if self.norm_epsilon <= 0:
            raise ValueError(f"norm_epsilon must be > 0, got {self.norm_epsilon}")


def zero_module(module: nn.Module) -> nn.Module:
    """Zero all parameters of a module in place and return it."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class LayerNorm3d(nn.Module):
    """LayerNorm over the channel dimension at every (t, h, w) location."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t, h, w = x.shape[-3:]
        x = rearrange(x, "b c t h w -> b (t h w) c")
        x = self.norm(x)
        return rearrange(x, "b (t h w) c -> b c t h w", t=t, h=h, w=w)


class ChannelAttention(nn.Module):
    """Channel-transposed multi-head self-attention.

    Q/K/V are pointwise projections; each head attends over C/heads channel
    descriptors pooled along the flattened (t h w) token axis, so the
    attention matrix is (heads, C/heads, C/heads) and cost stays O(C^2)
    instead of O((THW)^2). Purely pointwise, hence equivariant to any
    permutation of token positions.
    """

    def __init__(self, channels: int, heads: int, zero_init: bool = True):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"heads={heads} does not divide channels={channels}")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv3d(channels, channels * 3, kernel_size=1, bias=False)
        self.project_out = nn.Conv3d(channels, channels, kernel_size=1)
        if zero_init:
            zero_module(self.project_out)

    def _attend(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t, h, w = x.shape[-3:]
        q, k, v = self.qkv(x).chunk(3, dim=1)
        q = rearrange(q, "b (head c) t h w -> b head c (t h w)", head=self.heads)
        k = rearrange(k, "b (head c) t h w -> b head c (t h w)", head=self.heads)
        v = rearrange(v, "b (head c) t h w -> b head c (t h w)", head=self.heads)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = (q @ k.transpose(-2, -1)) * self.temperature
        attn = attn.softmax(dim=-1)
        out = rearrange(attn @ v, "b head c (t h w) -> b (head c) t h w", t=t, h=h, w=w)
        return out, attn

    def attention_matrix(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic attention weights, shape (B, heads, C/h, C/h)."""
        return self._attend(x)[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self._attend(x)
        return self.project_out(out)


class FeedForward(nn.Module):
    """Gated feed-forward with a depthwise 3x3x3 conv for local mixing."""

    def __init__(self, channels: int, expansion: float, zero_init: bool = True):
        super().__init__()
        hidden = int(channels * expansion)
        self.project_in = nn.Conv3d(channels, hidden * 2, kernel_size=1)
        self.dwconv = nn.Conv3d(
            hidden * 2, hidden * 2, kernel_size=3, padding=1, groups=hidden * 2
        )
        self.project_out = nn.Conv3d(hidden, channels, kernel_size=1)
        if zero_init:
            zero_module(self.project_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: attention then feed-forward."""

    def __init__(
        self,
        channels: int,
        heads: int,
        ffn_expansion: float = 2.66,
        norm_epsilon: float = 1e-5,
        zero_init: bool = True,
    ):
        super().__init__()
        self.norm1 = LayerNorm3d(channels, eps=norm_epsilon)
        self.attn = ChannelAttention(channels, heads, zero_init=zero_init)
        self.norm2 = LayerNorm3d(channels, eps=norm_epsilon)
        self.ffn = FeedForward(channels, ffn_expansion, zero_init=zero_init)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x


class Downsample3d(nn.Module):
    """3D conv downsampling one scale step: H, W halved, T preserved."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv3d(
            in_channels, out_channels, kernel_size=3, stride=(1, 2, 2), padding=1
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"spatial dims must be even to downsample, got {h}x{w}")
        return self.conv(x)


class Upsample3d(nn.Module):
    """Transposed 3D conv doubling H and W only; temporal extent unchanged."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.ConvTranspose3d(
            in_channels, out_channels, kernel_size=(1, 2, 2), stride=(1, 2, 2)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class FlowWarpAlign(nn.Module):
    """Predict a flow between two feature slices and warp one onto the other.

    The predicted field is exported alongside the aligned features so it
    can be accumulated across steps and supervised by the flow loss. The
    flow head is zero-initialized: a fresh module predicts zero flow, and
    warping by zero flow is the identity.
    """

    def __init__(self, channels: int, zero_init: bool = True):
        super().__init__()
        hidden = max(8, channels // 2)
        self.predictor = nn.Sequential(
            nn.Conv2d(channels * 2, hidden, kernel_size=3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(hidden, hidden, kernel_size=3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(hidden, 2, kernel_size=3, padding=1),
        )
        if zero_init:
            zero_module(self.predictor[-1])

    def forward(
        self, f_ref: torch.Tensor, f_src: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Align ``f_src`` toward ``f_ref``; both (B, C, H, W).

        Returns (aligned features, flow (B, 2, H, W) in pixels).
        """
        if f_ref.shape != f_src.shape:
            raise ValueError(
                f"feature shapes do not match: {tuple(f_ref.shape)} vs {tuple(f_src.shape)}"
            )
        flow = self.predictor(torch.cat([f_ref, f_src], dim=1))
        aligned = warp_tensor(f_src, flow)
        return aligned, flow
