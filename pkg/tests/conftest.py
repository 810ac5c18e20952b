import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from turbvr.losses import LossConfig
from turbvr.network import ModelConfig


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        channels_per_scale=[8, 16, 32],
        attention_heads=2,
        ffn_expansion=2.0,
        num_encoder_blocks_per_scale=1,
        num_refinement_blocks=1,
    )


@pytest.fixture
def micro_model_config() -> ModelConfig:
    """Smallest workable network, for finite-difference sweeps."""
    return ModelConfig(
        channels_per_scale=[4, 8, 16],
        attention_heads=2,
        ffn_expansion=1.5,
        num_encoder_blocks_per_scale=1,
        num_refinement_blocks=1,
    )


@pytest.fixture
def fast_loss_config() -> LossConfig:
    return LossConfig(ramp_epochs=2, history_k=2)


def make_frames(t: int, h: int, w: int, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(t, 3, h, w, generator=g, dtype=dtype)


def smooth_scene(h: int, w: int, seed: int = 0) -> torch.Tensor:
    """A single smooth, full-range (3, h, w) frame; learnable test content."""
    from oracles import smooth_random_field

    field = smooth_random_field((3, h, w), sigma=3.0, seed=seed, dtype=torch.float32)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo)


def build_dataset(root, clean_sequences, params_list):
    """Write clean/degraded pairs plus a manifest; returns the manifest path."""
    from turbvr.synth import ManifestRecord, degrade_sequence, params_to_dict, write_manifest
    from turbvr.video import save_sequence

    root = Path(root)
    records = []
    for i, (clean, params) in enumerate(zip(clean_sequences, params_list)):
        degraded, _ = degrade_sequence(clean, params)
        clean_dir = root / f"pair_{i:03d}" / "clean"
        degraded_dir = root / f"pair_{i:03d}" / "degraded"
        save_sequence(clean, clean_dir)
        save_sequence(degraded, degraded_dir)
        records.append(
            ManifestRecord(
                clean_dir=str(clean_dir),
                degraded_dir=str(degraded_dir),
                seed=params.seed,
                params=params_to_dict(params),
            )
        )
    manifest = root / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest
