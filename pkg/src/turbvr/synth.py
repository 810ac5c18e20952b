"""Synthetic clean/degraded pair generation.

Degrades video with the two dominant turbulence effects at desk scale:
a zero-mean, temporally correlated tilt (per-pixel geometric displacement)
followed by a per-frame Gaussian blur. The tilt field evolves as an AR(1)
process on spatially smoothed white noise and is rescaled so every frame
has exactly the requested RMS displacement; the ground-truth tilt fields
are returned so alignment modules can be tested without training.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .video import FlowField, VideoSequence, warp_tensor

# severity presets: (tilt_strength px, spatial_corr px, temporal_corr, blur range px)
SEVERITY_PRESETS = {
    "mild": (0.8, 16.0, 0.9, (0.2, 0.6)),
    "medium": (1.5, 12.0, 0.85, (0.5, 1.2)),
    "severe": (3.0, 8.0, 0.8, (1.0, 2.0)),
}


@dataclass
class TurbulenceParams:
    """Degradation knobs.

    Attributes:
        tilt_strength: per-frame RMS displacement magnitude in pixels.
        spatial_corr: Gaussian smoothing sigma of the tilt field, pixels.
        temporal_corr: AR(1) coefficient in [0, 1); 0 gives independent
            frames, values near 1 give slow quasi-periodic drift.
        blur_sigma_range: (min, max) of the per-frame blur sigma, pixels.
        seed: RNG seed; identical params give bit-identical output.
    """

    tilt_strength: float = 1.5
    spatial_corr: float = 12.0
    temporal_corr: float = 0.85
    blur_sigma_range: tuple[float, float] = (0.5, 1.2)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tilt_strength < 0:
            raise ValueError(f"tilt_strength must be >= 0, got {self.tilt_strength}")
        if not 0.0 <= self.temporal_corr < 1.0:
            raise ValueError(f"temporal_corr must be in [0, 1), got {self.temporal_corr}")
        lo, hi = self.blur_sigma_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid blur_sigma_range {self.blur_sigma_range}")
        if self.spatial_corr < 0:
            raise ValueError(f"spatial_corr must be >= 0, got {self.spatial_corr}")

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "TurbulenceParams":
        if name not in SEVERITY_PRESETS:
            raise ValueError(f"unknown severity preset {name!r}; choose from {sorted(SEVERITY_PRESETS)}")
        strength, corr, rho, blur = SEVERITY_PRESETS[name]
        return cls(
            tilt_strength=strength,
            spatial_corr=corr,
            temporal_corr=rho,
            blur_sigma_range=blur,
            seed=seed,
        )


def _smoothed_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    """Unit-RMS spatially smoothed white noise, shape (2, h, w)."""
    noise = rng.standard_normal((2, h, w))
    if sigma > 0:
        noise = np.stack([gaussian_filter(noise[i], sigma=sigma) for i in range(2)])
    rms = np.sqrt(np.mean(noise**2))
    if rms > 0:
        noise = noise / rms
    return noise


def generate_tilt_series(params: TurbulenceParams, T: int, H: int, W: int) -> list[FlowField]:
    """Generate T correlated tilt fields with exact per-frame RMS magnitude.

    The internal state follows d_t = rho * d_{t-1} + sqrt(1 - rho^2) * e_t
    with unit-RMS smoothed innovations e_t; each output frame is rescaled
    to RMS displacement equal to ``tilt_strength``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    rng = np.random.default_rng(params.seed)
    rho = params.temporal_corr
    innovation_gain = float(np.sqrt(1.0 - rho**2))

    fields: list[FlowField] = []
    state: np.ndarray | None = None
    for _ in range(T):
        e = _smoothed_noise(rng, H, W, params.spatial_corr)
        state = e if state is None else rho * state + innovation_gain * e
        rms = np.sqrt(np.mean(state**2))
        if params.tilt_strength == 0.0 or rms == 0.0:
            out = np.zeros_like(state)
        else:
            out = state * (params.tilt_strength / rms)
        fields.append(FlowField(flow=torch.from_numpy(out.astype(np.float32)), scale="L1"))
    return fields


def _gaussian_blur(frame: torch.Tensor, sigma: float) -> torch.Tensor:
    """Per-channel 2D Gaussian blur; sigma 0 is the identity."""
    if sigma <= 0:
        return frame
    arr = frame.numpy()
    blurred = np.stack([gaussian_filter(arr[c], sigma=sigma) for c in range(arr.shape[0])])
    return torch.from_numpy(blurred)


def degrade_sequence(
    clean: VideoSequence, params: TurbulenceParams
) -> tuple[VideoSequence, list[FlowField]]:
    """Apply tilt then blur to every frame; returns the ground-truth tilts.

    The returned flows satisfy degraded_t ~= blur(warp(clean_t, flow_t)),
    i.e. each flow maps degraded-frame coordinates back into the clean frame.
    """
    if len(clean) < 1:
        raise ValueError("clean sequence is empty")
    tilts = generate_tilt_series(params, len(clean), clean.height, clean.width)
    blur_rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0x5B]))
    lo, hi = params.blur_sigma_range

    frames = []
    for t in range(len(clean)):
        frame = clean.frames[t]
        if params.tilt_strength > 0:
            frame = warp_tensor(frame, tilts[t].flow)
        sigma = float(blur_rng.uniform(lo, hi))
        frames.append(_gaussian_blur(frame, sigma))

    degraded = VideoSequence(frames=torch.stack(frames), role="degraded", frame_rate=clean.frame_rate)
    return degraded, tilts


@dataclass
class ManifestRecord:
    """One clean/degraded pair in a JSON-lines dataset manifest."""

    clean_dir: str
    degraded_dir: str
    seed: int
    params: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        data = json.loads(line)
        return cls(
            clean_dir=data["clean_dir"],
            degraded_dir=data["degraded_dir"],
            seed=data["seed"],
            params=data["params"],
        )


def params_to_dict(params: TurbulenceParams) -> dict:
    d = asdict(params)
    d["blur_sigma_range"] = list(d["blur_sigma_range"])
    return d


def params_from_dict(data: dict) -> TurbulenceParams:
    return TurbulenceParams(
        tilt_strength=data["tilt_strength"],
        spatial_corr=data["spatial_corr"],
        temporal_corr=data["temporal_corr"],
        blur_sigma_range=tuple(data["blur_sigma_range"]),
        seed=data["seed"],
    )


def write_manifest(records: list[ManifestRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ManifestRecord.from_json(line))
    return records
