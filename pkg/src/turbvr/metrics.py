"""Quantitative evaluation: PSNR, SSIM, a warped-l1 temporal-consistency
score, y-t slice diagnostics, and the JSON evaluation report.

A learned perceptual metric can be plugged in through
:func:`set_perceptual_hook`; reports carry ``lpips_mean: null`` when no
hook is installed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .video import FlowField, VideoSequence, warp_tensor

PSNR_CAP = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

_perceptual_hook: Callable[[torch.Tensor, torch.Tensor], float] | None = None


def set_perceptual_hook(fn: Callable[[torch.Tensor, torch.Tensor], float] | None) -> None:
    """Install (or clear) a learned perceptual metric fn(a, b) -> float."""
    global _perceptual_hook
    _perceptual_hook = fn


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1] frames, capped at 100."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(dtype: torch.dtype, device: torch.device) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype, device=device) - (SSIM_WINDOW - 1) / 2
    g = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) on [0, 1].

    Computed per channel over the valid (un-padded) region and averaged.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W) frames, got {tuple(a.shape)}")
    h, w = a.shape[-2:]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")

    x = a.double().unsqueeze(0)
    y = b.double().unsqueeze(0)
    c = x.shape[1]
    window = _gaussian_window(x.dtype, x.device).expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, groups=c)

    mu_x = filt(x)
    mu_y = filt(y)
    sigma_x = filt(x * x) - mu_x * mu_x
    sigma_y = filt(y * y) - mu_y * mu_y
    sigma_xy = filt(x * y) - mu_x * mu_y

    ssim_map = ((2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)) / (
        (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    )
    return float(ssim_map.mean())


def temporal_consistency(
    seq: VideoSequence, flows: list[FlowField | torch.Tensor]
) -> float:
    """Mean warped-l1 between consecutive frames; lower is smoother.

    ``flows[t]`` must map frame t+1 coordinates back into frame t, i.e. the
    step flow from frame t to t+1.
    """
    if len(flows) != len(seq) - 1:
        raise ValueError(f"need {len(seq) - 1} flows for {len(seq)} frames, got {len(flows)}")
    if len(flows) == 0:
        return 0.0
    total = 0.0
    for t in range(1, len(seq)):
        flow = flows[t - 1]
        flow_t = flow.flow if isinstance(flow, FlowField) else flow
        warped_prev = warp_tensor(seq.frames[t - 1], flow_t)
        total += float((seq.frames[t] - warped_prev).abs().mean())
    return total / (len(seq) - 1)


def zero_flows_for(seq: VideoSequence) -> list[torch.Tensor]:
    """Zero step flows for a sequence; turns temporal_consistency into a
    raw frame-to-frame flicker measure."""
    return [
        torch.zeros(2, seq.height, seq.width, dtype=seq.frames.dtype)
        for _ in range(len(seq) - 1)
    ]


def yt_slice(seq: VideoSequence, x_column: int, frame_range: tuple[int, int]) -> torch.Tensor:
    """Stack one pixel column over time into a (3, H, t1 - t0) image."""
    t0, t1 = frame_range
    if not 0 <= x_column < seq.width:
        raise ValueError(f"x_column {x_column} out of range [0, {seq.width - 1}]")
    if not (0 <= t0 < t1 <= len(seq)):
        raise ValueError(f"frame range {frame_range} invalid for length {len(seq)}")
    return seq.frames[t0:t1, :, :, x_column].permute(1, 2, 0).clone()


@dataclass
class EvalReport:
    """Per-frame and aggregate quality scores with run metadata."""

    per_frame: list[dict[str, float]]
    aggregate: dict[str, float | None]
    metadata: dict[str, object] = field(default_factory=dict)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(asdict(self), indent=indent, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        return cls(
            per_frame=data["per_frame"],
            aggregate=data["aggregate"],
            metadata=data.get("metadata", {}),
        )


def evaluate_pair(
    restored: VideoSequence,
    reference: VideoSequence,
    flows: list[FlowField | torch.Tensor] | None = None,
    metadata: dict[str, object] | None = None,
) -> EvalReport:
    """Score a restored sequence against its reference.

    Temporal consistency is computed on the restored sequence using the
    given step flows, or zero flows (raw flicker) when none are supplied.
    """
    if len(restored) != len(reference):
        raise ValueError(
            f"length mismatch: {len(restored)} restored vs {len(reference)} reference"
        )
    per_frame = []
    for t in range(len(restored)):
        per_frame.append(
            {
                "psnr": psnr(restored.frames[t], reference.frames[t]),
                "ssim": ssim(restored.frames[t], reference.frames[t]),
            }
        )
    tc_flows = flows if flows is not None else zero_flows_for(restored)
    lpips_mean = None
    if _perceptual_hook is not None:
        lpips_mean = sum(
            _perceptual_hook(restored.frames[t], reference.frames[t])
            for t in range(len(restored))
        ) / len(restored)
    aggregate = {
        "psnr_mean": sum(f["psnr"] for f in per_frame) / len(per_frame),
        "ssim_mean": sum(f["ssim"] for f in per_frame) / len(per_frame),
        "temporal_consistency": temporal_consistency(restored, tc_flows),
        "lpips_mean": lpips_mean,
    }
    return EvalReport(per_frame=per_frame, aggregate=aggregate, metadata=metadata or {})
