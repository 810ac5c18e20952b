"""Frames, sequences, flow fields and the warping/composition primitives.

Conventions used across the package:

* a frame is a ``(3, H, W)`` float tensor with values in ``[0, 1]``
* a video sequence stacks frames into a ``(T, 3, H, W)`` tensor
* a flow field is a ``(2, H, W)`` tensor of pixel displacements,
  channel 0 horizontal (dx), channel 1 vertical (dy); warping samples the
  source at ``p + flow(p)``
* frames on disk are 8-bit RGB PNGs named ``frame_%05d.png`` with
  contiguous indices starting at 0
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

FRAME_PATTERN = re.compile(r"^frame_(\d{5})\.png$")

SCALES = ("L1", "L2", "L3")

# spatial downsampling factor of each scale relative to the input frame
SCALE_FACTOR = {"L1": 1, "L2": 2, "L3": 4}

MIN_FRAME_SIZE = 8


def validate_frame(pixels: torch.Tensor) -> None:
    """Check the (3, H, W) shape, size floor and finiteness invariants."""
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"frame must have shape (3, H, W), got {tuple(pixels.shape)}")
    if pixels.shape[1] < MIN_FRAME_SIZE or pixels.shape[2] < MIN_FRAME_SIZE:
        raise ValueError(
            f"frame must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}, "
            f"got {pixels.shape[1]}x{pixels.shape[2]}"
        )
    if not torch.isfinite(pixels).all():
        raise ValueError("frame contains non-finite values")


@dataclass
class VideoSequence:
    """Ordered stack of same-sized frames with a role tag.

    Attributes:
        frames: (T, 3, H, W) float tensor.
        role: one of "degraded", "clean", "restored".
        frame_rate: optional frames per second, informational only.
    """

    frames: torch.Tensor
    role: str
    frame_rate: float | None = None

    ROLES = ("degraded", "clean", "restored")

    def __post_init__(self) -> None:
        if self.role not in self.ROLES:
            raise ValueError(f"role must be one of {self.ROLES}, got {self.role!r}")
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(
                f"frames must have shape (T, 3, H, W), got {tuple(self.frames.shape)}"
            )
        if len(self) < 1:
            raise ValueError("sequence must contain at least one frame")
        validate_frame(self.frames[0])

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    def frame(self, t: int) -> torch.Tensor:
        return self.frames[t]


@dataclass
class FlowField:
    """Per-pixel 2D displacement map at a given pyramid scale.

    ``flow`` is (2, H, W): channel 0 is dx (horizontal), channel 1 is dy
    (vertical), both in pixels at this scale's resolution.
    """

    flow: torch.Tensor
    scale: str = "L1"

    def __post_init__(self) -> None:
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if self.flow.ndim != 3 or self.flow.shape[0] != 2:
            raise ValueError(f"flow must have shape (2, H, W), got {tuple(self.flow.shape)}")
        if not torch.isfinite(self.flow).all():
            raise ValueError("flow contains non-finite values")

    @property
    def height(self) -> int:
        return self.flow.shape[1]

    @property
    def width(self) -> int:
        return self.flow.shape[2]


@dataclass
class BoundingBox:
    """Axis-aligned box in pixel coordinates, x_max/y_max exclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_label: str = "person"
    confidence: float | torch.Tensor | None = None

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clamped(self, height: int, width: int) -> "BoundingBox":
        return BoundingBox(
            x_min=max(0.0, min(float(self.x_min), width)),
            y_min=max(0.0, min(float(self.y_min), height)),
            x_max=max(0.0, min(float(self.x_max), width)),
            y_max=max(0.0, min(float(self.y_max), height)),
            class_label=self.class_label,
            confidence=self.confidence,
        )


def load_sequence(directory: str | Path, role: str) -> VideoSequence:
    """Load a frame directory into a sequence, pixels normalized to [0, 1].

    Frames must be named ``frame_%05d.png`` with contiguous indices starting
    at 0. Non-frame files are skipped with a warning.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {directory}")

    indexed: dict[int, Path] = {}
    for entry in sorted(directory.iterdir()):
        if not entry.is_file():
            continue
        m = FRAME_PATTERN.match(entry.name)
        if m is None:
            logger.warning("ignoring non-frame file %s", entry)
            continue
        indexed[int(m.group(1))] = entry
    if not indexed:
        raise FileNotFoundError(f"no frame files in {directory}")

    indices = sorted(indexed)
    if indices[0] != 0 or indices[-1] != len(indices) - 1:
        raise ValueError(
            f"non-contiguous frame indices in {directory}: "
            f"found {indices[0]}..{indices[-1]} with {len(indices)} files"
        )

    frames = []
    shape = None
    for idx in indices:
        path = indexed[idx]
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise ValueError(f"unreadable frame file {path}: {exc}") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(
                f"inconsistent frame dimensions: {path} is {arr.shape[:2]}, "
                f"expected {shape[:2]}"
            )
        frames.append(torch.from_numpy(arr).permute(2, 0, 1))

    return VideoSequence(frames=torch.stack(frames), role=role)


def save_sequence(seq: VideoSequence, directory: str | Path) -> None:
    """Write a sequence as 8-bit RGB PNGs under the standard naming scheme."""
    if len(seq) < 1:
        raise ValueError("cannot save an empty sequence")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc}") from exc

    for t in range(len(seq)):
        frame = seq.frames[t].clamp(0.0, 1.0)
        arr = (frame.permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(directory / f"frame_{t:05d}.png")


def crop_patch_pair(
    degraded: VideoSequence,
    clean: VideoSequence,
    size: int,
    rng_seed: int,
) -> tuple[VideoSequence, VideoSequence]:
    """Crop the same random spatial window from every frame of both sequences.

    The window offset is drawn uniformly from the valid range with a seeded
    generator, so the crop is deterministic given the seed.
    """
    if len(degraded) != len(clean):
        raise ValueError(
            f"sequence length mismatch: {len(degraded)} degraded vs {len(clean)} clean"
        )
    if degraded.frames.shape[2:] != clean.frames.shape[2:]:
        raise ValueError("degraded and clean sequences must share spatial dims")
    h, w = degraded.height, degraded.width
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds frame dims {h}x{w}")

    rng = np.random.default_rng(rng_seed)
    y0 = int(rng.integers(0, h - size + 1))
    x0 = int(rng.integers(0, w - size + 1))

    def crop(seq: VideoSequence) -> VideoSequence:
        return VideoSequence(
            frames=seq.frames[:, :, y0 : y0 + size, x0 : x0 + size].clone(),
            role=seq.role,
            frame_rate=seq.frame_rate,
        )

    return crop(degraded), crop(clean)


def warp_tensor(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp: ``out(p) = src(p + flow(p))``.

    Samples outside the frame replicate the border. Differentiable with
    respect to both ``src`` and ``flow``. Accepts (C, H, W) with (2, H, W)
    flow or batched (B, C, H, W) with (B, 2, H, W).
    """
    squeeze = src.ndim == 3
    if squeeze:
        src = src.unsqueeze(0)
        flow = flow.unsqueeze(0)
    if src.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError("expected src (B, C, H, W) and flow (B, 2, H, W)")
    if src.shape[2:] != flow.shape[2:] or src.shape[0] != flow.shape[0]:
        raise ValueError(
            f"src {tuple(src.shape)} and flow {tuple(flow.shape)} dims do not match"
        )

    b, c, h, w = src.shape
    device, dtype = src.device, src.dtype
    gy, gx = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype),
        torch.arange(w, device=device, dtype=dtype),
        indexing="ij",
    )
    px = (gx.unsqueeze(0) + flow[:, 0]).clamp(0, w - 1)
    py = (gy.unsqueeze(0) + flow[:, 1]).clamp(0, h - 1)

    x0 = px.floor()
    y0 = py.floor()
    fx = (px - x0).unsqueeze(1)
    fy = (py - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)

    # lerp form: exact identity for zero flow and for constant fields
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    out = top + fy * (bottom - top)
    return out.squeeze(0) if squeeze else out


def warp_frame(src: torch.Tensor, flow: FlowField | torch.Tensor) -> torch.Tensor:
    """Warp a frame or feature map by a flow field (see :func:`warp_tensor`)."""
    flow_t = flow.flow if isinstance(flow, FlowField) else flow
    return warp_tensor(src, flow_t)


def compose_tensor_flows(f_ab: torch.Tensor, f_bc: torch.Tensor) -> torch.Tensor:
    """Chain two displacement fields: ``out(p) = f_bc(p) + f_ab(p + f_bc(p))``.

    Warping by the result is equivalent (up to interpolation error) to
    warping by ``f_ab`` and then by ``f_bc``.
    """
    if f_ab.shape != f_bc.shape:
        raise ValueError(
            f"flow dims do not match: {tuple(f_ab.shape)} vs {tuple(f_bc.shape)}"
        )
    return f_bc + warp_tensor(f_ab, f_bc)


def compose_flows(f_ab: FlowField, f_bc: FlowField) -> FlowField:
    """Chain two flow fields of the same scale (see :func:`compose_tensor_flows`)."""
    if f_ab.scale != f_bc.scale:
        raise ValueError(f"flow scales do not match: {f_ab.scale} vs {f_bc.scale}")
    return FlowField(flow=compose_tensor_flows(f_ab.flow, f_bc.flow), scale=f_ab.scale)


def zero_flow(height: int, width: int, scale: str = "L1", **kwargs) -> FlowField:
    return FlowField(flow=torch.zeros(2, height, width, **kwargs), scale=scale)
