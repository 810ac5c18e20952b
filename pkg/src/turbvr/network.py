"""The restoration network: one recurrent step from (current, previous) to
a restored frame plus the per-scale alignment flows.

The network is a 3-scale encoder/decoder over (B, C, 2, H, W) volumes.
Encoding: a conv stem, then per scale a stack of transformer blocks and a
strided 3D conv to the next-coarser scale. Decoding runs coarse to fine;
at each scale the previous-frame slice is aligned to the current slice by
a flow/warp module, decoded by transformer blocks, upsampled and fused
with the skip feature. Two refinement blocks and a zero-initialized head
produce a residual that is added to the current degraded frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    BlockConfig,
    Downsample3d,
    FlowWarpAlign,
    TransformerBlock,
    Upsample3d,
    zero_module,
)

SCALE_STRIDE = {"L1": 1, "L2": 2, "L3": 4}


@dataclass
class ModelConfig:
    """Architecture hyperparameters and the structural ablation toggles.

    Defaults are tuned to land the full network near 2.6M parameters.
    ``decoder_warp=False`` removes alignment from the whole decoder;
    ``multiscale_warp=False`` keeps it only at the coarsest scale.
    """

    channels_per_scale: list[int] = field(default_factory=lambda: [40, 80, 160])
    attention_heads: int = 4
    ffn_expansion: float = 2.66
    norm_epsilon: float = 1e-5
    num_encoder_blocks_per_scale: int = 2
    num_refinement_blocks: int = 2
    decoder_warp: bool = True
    multiscale_warp: bool = True

    def __post_init__(self) -> None:
        self.block_config()  # validates widths/heads/expansion
        if self.num_encoder_blocks_per_scale < 1:
            raise ValueError("num_encoder_blocks_per_scale must be >= 1")
        if self.num_refinement_blocks < 1:
            raise ValueError("num_refinement_blocks must be >= 1")

    def block_config(self) -> BlockConfig:
        return BlockConfig(
            channels_per_scale=list(self.channels_per_scale),
            attention_heads=self.attention_heads,
            ffn_expansion=self.ffn_expansion,
            norm_epsilon=self.norm_epsilon,
        )


@dataclass
class RecurrentInput:
    """The two-frame input of one recurrent step.

    ``packed`` stacks previous and current along a temporal axis of length
    2, index 0 = previous restored output, index 1 = current degraded
    frame. Frames are (3, H, W); values are expected in [0, 1] for
    external inputs (the unclamped previous output may exceed the range
    slightly during training).
    """

    current: torch.Tensor
    previous: torch.Tensor

    def __post_init__(self) -> None:
        if self.current.shape != self.previous.shape:
            raise ValueError(
                f"current {tuple(self.current.shape)} and previous "
                f"{tuple(self.previous.shape)} dims do not match"
            )
        if self.current.ndim != 3 or self.current.shape[0] != 3:
            raise ValueError(f"frames must be (3, H, W), got {tuple(self.current.shape)}")
        if not (torch.isfinite(self.current).all() and torch.isfinite(self.previous).all()):
            raise ValueError("recurrent input contains non-finite values")

    @property
    def packed(self) -> torch.Tensor:
        """(1, 3, 2, H, W) tensor, temporal index 0 = previous, 1 = current."""
        return torch.stack([self.previous, self.current], dim=1).unsqueeze(0)


@dataclass
class StepOutput:
    """Result of one restoration step.

    ``flows`` maps scale name to the flow predicted at that scale (native
    resolution); ``flow_full`` is the finest flow brought to full frame
    resolution (bilinear upsampling with values scaled by the resolution
    ratio), or None when the decoder ran without alignment.
    """

    restored: torch.Tensor
    flows: dict[str, torch.Tensor]
    flow_full: torch.Tensor | None


def _block_stack(channels: int, count: int, cfg: ModelConfig, zero_init: bool) -> nn.Sequential:
    return nn.Sequential(
        *[
            TransformerBlock(
                channels,
                cfg.attention_heads,
                ffn_expansion=cfg.ffn_expansion,
                norm_epsilon=cfg.norm_epsilon,
                zero_init=zero_init,
            )
            for _ in range(count)
        ]
    )


class RestorationNet(nn.Module):
    """Two-frame recurrent restoration network, one step per forward call."""

    def __init__(self, config: ModelConfig | None = None, zero_init: bool = True):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        c1, c2, c3 = cfg.channels_per_scale
        n = cfg.num_encoder_blocks_per_scale

        self.stem = nn.Conv3d(3, c1, kernel_size=3, padding=1)
        self.enc1 = _block_stack(c1, n, cfg, zero_init)
        self.down1 = Downsample3d(c1, c2)
        self.enc2 = _block_stack(c2, n, cfg, zero_init)
        self.down2 = Downsample3d(c2, c3)
        self.enc3 = _block_stack(c3, n, cfg, zero_init)

        if cfg.decoder_warp:
            self.align3 = FlowWarpAlign(c3, zero_init=zero_init)
            if cfg.multiscale_warp:
                self.align2 = FlowWarpAlign(c2, zero_init=zero_init)
                self.align1 = FlowWarpAlign(c1, zero_init=zero_init)
        self.dec3 = _block_stack(c3, n, cfg, zero_init)
        self.up3 = Upsample3d(c3, c2)
        self.fuse2 = nn.Conv3d(c2 * 2, c2, kernel_size=1)
        self.dec2 = _block_stack(c2, n, cfg, zero_init)
        self.up2 = Upsample3d(c2, c1)
        self.fuse1 = nn.Conv3d(c1 * 2, c1, kernel_size=1)
        self.dec1 = _block_stack(c1, n, cfg, zero_init)

        self.refine = _block_stack(c1, cfg.num_refinement_blocks, cfg, zero_init)
        self.head = zero_module(nn.Conv2d(c1, 3, kernel_size=3, padding=1))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Multi-scale features of the packed (B, 3, 2, H, W) input.

        H and W must be divisible by 4 (forward() pads before calling).
        """
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"encode needs dims divisible by 4, got {h}x{w}")
        f1 = self.enc1(self.stem(x))
        f2 = self.enc2(self.down1(f1))
        f3 = self.enc3(self.down2(f2))
        return [f1, f2, f3]

    def _align(self, module: FlowWarpAlign, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        prev, cur = x[:, :, 0], x[:, :, 1]
        aligned, flow = module(cur, prev)
        return torch.stack([aligned, cur], dim=2), flow

    def decode(self, features: list[torch.Tensor]) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Coarse-to-fine decoding with per-scale alignment of the previous slice."""
        f1, f2, f3 = features
        cfg = self.config
        flows: dict[str, torch.Tensor] = {}

        x = f3
        if cfg.decoder_warp:
            x, flows["L3"] = self._align(self.align3, x)
        x = self.up3(self.dec3(x))
        x = self.fuse2(torch.cat([x, f2], dim=1))
        if cfg.decoder_warp and cfg.multiscale_warp:
            x, flows["L2"] = self._align(self.align2, x)
        x = self.up2(self.dec2(x))
        x = self.fuse1(torch.cat([x, f1], dim=1))
        if cfg.decoder_warp and cfg.multiscale_warp:
            x, flows["L1"] = self._align(self.align1, x)
        x = self.dec1(x)
        return x, flows

    def forward(
        self, packed: torch.Tensor, clamp: bool = False
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor], torch.Tensor | None]:
        """One restoration step on a packed (B, 3, 2, H, W) input.

        Returns (restored (B, 3, H, W), per-scale flows, full-resolution
        flow or None). Inputs whose dims are not divisible by 4 are
        reflect-padded internally and cropped after the residual add.
        """
        if packed.ndim != 5 or packed.shape[1] != 3 or packed.shape[2] != 2:
            raise ValueError(f"expected (B, 3, 2, H, W) input, got {tuple(packed.shape)}")
        h, w = packed.shape[-2:]
        pad_h = (-h) % 4
        pad_w = (-w) % 4
        x = packed
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h, 0, 0), mode="reflect")

        feats = self.encode(x)
        decoded, flows = self.decode(feats)
        refined = self.refine(decoded)
        restored = x[:, :, 1] + self.head(refined[:, :, 1])
        restored = restored[:, :, :h, :w]
        if clamp:
            restored = restored.clamp(0.0, 1.0)

        flow_full = self._full_resolution_flow(flows, h, w)
        if "L1" in flows:
            flows["L1"] = flows["L1"][:, :, :h, :w]
        return restored, flows, flow_full

    @staticmethod
    def _full_resolution_flow(
        flows: dict[str, torch.Tensor], h: int, w: int
    ) -> torch.Tensor | None:
        for scale in ("L1", "L2", "L3"):
            if scale in flows:
                flow = flows[scale]
                factor = SCALE_STRIDE[scale]
                if factor > 1:
                    flow = (
                        F.interpolate(
                            flow, scale_factor=factor, mode="bilinear", align_corners=False
                        )
                        * factor
                    )
                return flow[:, :, :h, :w]
        return None

    def restore_step(
        self, current: torch.Tensor, previous: torch.Tensor, clamp: bool = False
    ) -> StepOutput:
        """Unbatched convenience wrapper around forward()."""
        inp = RecurrentInput(current=current, previous=previous)
        restored, flows, flow_full = self.forward(inp.packed, clamp=clamp)
        return StepOutput(
            restored=restored[0],
            flows={k: v[0] for k, v in flows.items()},
            flow_full=None if flow_full is None else flow_full[0],
        )


def build_network(
    config: ModelConfig | None = None, seed: int | None = None, zero_init: bool = True
) -> RestorationNet:
    """Construct a network, optionally with seeded parameter initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return RestorationNet(config, zero_init=zero_init)


def parameter_count(config: ModelConfig | None = None) -> int:
    """Total learnable scalar parameters of a network built from ``config``."""
    return RestorationNet(config or ModelConfig()).parameter_count()
