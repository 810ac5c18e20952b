import numpy as np
import pytest
import torch
from PIL import Image

from conftest import make_frames
from oracles import check_grad, finite_diff_grad, shift_right, smooth_random_field
from turbvr.video import (
    FlowField,
    VideoSequence,
    compose_flows,
    compose_tensor_flows,
    crop_patch_pair,
    load_sequence,
    save_sequence,
    warp_frame,
    warp_tensor,
    zero_flow,
)


def write_png(path, array_u8):
    Image.fromarray(array_u8, mode="RGB").save(path)


class TestLoadSave:
    def test_load_numbered_frames(self, tmp_path):
        seq = VideoSequence(make_frames(5, 64, 64), "clean")
        save_sequence(seq, tmp_path)
        loaded = load_sequence(tmp_path, "clean")
        assert len(loaded) == 5
        assert loaded.height == 64 and loaded.width == 64

    def test_non_contiguous_indices_error(self, tmp_path):
        arr = np.zeros((16, 16, 3), dtype=np.uint8)
        for idx in (0, 1, 3):
            write_png(tmp_path / f"frame_{idx:05d}.png", arr)
        with pytest.raises(ValueError, match="non-contiguous"):
            load_sequence(tmp_path, "degraded")

    def test_all_white_normalizes_to_one(self, tmp_path):
        write_png(tmp_path / "frame_00000.png", np.full((8, 8, 3), 255, dtype=np.uint8))
        loaded = load_sequence(tmp_path, "clean")
        assert torch.equal(loaded.frames, torch.ones(1, 3, 8, 8))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_sequence(tmp_path / "nope", "clean")

    def test_inconsistent_dims_error(self, tmp_path):
        write_png(tmp_path / "frame_00000.png", np.zeros((16, 16, 3), dtype=np.uint8))
        write_png(tmp_path / "frame_00001.png", np.zeros((16, 20, 3), dtype=np.uint8))
        with pytest.raises(ValueError, match="inconsistent"):
            load_sequence(tmp_path, "clean")

    def test_non_frame_files_ignored_with_warning(self, tmp_path, caplog):
        write_png(tmp_path / "frame_00000.png", np.zeros((8, 8, 3), dtype=np.uint8))
        (tmp_path / "notes.txt").write_text("hi")
        with caplog.at_level("WARNING"):
            loaded = load_sequence(tmp_path, "clean")
        assert len(loaded) == 1
        assert any("notes.txt" in rec.message for rec in caplog.records)

    def test_roundtrip_quantization_bound(self, tmp_path):
        seq = VideoSequence(make_frames(3, 16, 16, seed=7), "restored")
        save_sequence(seq, tmp_path)
        loaded = load_sequence(tmp_path, "restored")
        assert (loaded.frames - seq.frames).abs().max() <= 1.0 / 255 + 1e-7

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError, match="at least one frame"):
            VideoSequence(torch.zeros(0, 3, 8, 8), "clean")

    def test_zeros_roundtrip_bit_exact(self, tmp_path):
        seq = VideoSequence(torch.zeros(1, 3, 8, 8), "clean")
        save_sequence(seq, tmp_path)
        loaded = load_sequence(tmp_path, "clean")
        assert torch.equal(loaded.frames, seq.frames)


class TestBoundingBox:
    def test_degenerate_rejected(self):
        import pytest

        from turbvr.video import BoundingBox

        with pytest.raises(ValueError, match="degenerate"):
            BoundingBox(5, 5, 5, 10)

    def test_clamped_to_frame_bounds(self):
        from turbvr.video import BoundingBox

        box = BoundingBox(-3.0, 2.0, 40.0, 18.0, "person", confidence=0.7)
        clamped = box.clamped(height=16, width=32)
        assert (clamped.x_min, clamped.y_min, clamped.x_max, clamped.y_max) == (0.0, 2.0, 32.0, 16.0)
        assert clamped.class_label == "person" and clamped.confidence == 0.7


class TestCropPatchPair:
    def test_shapes_and_shared_window(self):
        frames = make_frames(10, 32, 32, seed=3)
        degraded = VideoSequence(frames, "degraded")
        clean = VideoSequence(frames.clone(), "clean")
        d, c = crop_patch_pair(degraded, clean, 16, rng_seed=7)
        assert d.frames.shape == (10, 3, 16, 16)
        assert torch.equal(d.frames, c.frames)

    def test_window_is_a_subwindow_at_one_offset(self):
        frames = make_frames(2, 12, 12, seed=5)
        degraded = VideoSequence(frames, "degraded")
        clean = VideoSequence(frames.clone(), "clean")
        d, c = crop_patch_pair(degraded, clean, 8, rng_seed=11)
        hits = [
            (y, x)
            for y in range(5)
            for x in range(5)
            if torch.equal(frames[:, :, y : y + 8, x : x + 8], d.frames)
        ]
        assert len(hits) >= 1
        y, x = hits[0]
        assert torch.equal(frames[:, :, y : y + 8, x : x + 8], c.frames)

    def test_identity_crop(self):
        frames = make_frames(4, 16, 16)
        d, c = crop_patch_pair(
            VideoSequence(frames, "degraded"), VideoSequence(frames.clone(), "clean"), 16, 0
        )
        assert torch.equal(d.frames, frames)

    def test_deterministic_given_seed(self):
        frames = make_frames(3, 24, 24, seed=9)
        degraded = VideoSequence(frames, "degraded")
        clean = VideoSequence(frames.clone(), "clean")
        a1, _ = crop_patch_pair(degraded, clean, 12, rng_seed=42)
        a2, _ = crop_patch_pair(degraded, clean, 12, rng_seed=42)
        assert torch.equal(a1.frames, a2.frames)

    def test_size_too_large(self):
        frames = make_frames(2, 16, 16)
        with pytest.raises(ValueError, match="exceeds"):
            crop_patch_pair(
                VideoSequence(frames, "degraded"), VideoSequence(frames.clone(), "clean"), 32, 0
            )

    def test_length_mismatch(self):
        a = VideoSequence(make_frames(3, 16, 16), "degraded")
        b = VideoSequence(make_frames(2, 16, 16), "clean")
        with pytest.raises(ValueError, match="length mismatch"):
            crop_patch_pair(a, b, 8, 0)


class TestWarp:
    def test_zero_flow_identity_bit_exact(self):
        src = make_frames(1, 16, 16, seed=2)[0]
        out = warp_frame(src, zero_flow(16, 16))
        assert torch.equal(out, src)

    def test_integer_shift_recovery(self):
        base = make_frames(1, 8, 8, seed=4, dtype=torch.float64)[0]
        shifted = shift_right(base, 3)
        flow = torch.zeros(2, 8, 8, dtype=torch.float64)
        flow[0] = 3.0
        out = warp_tensor(shifted, flow)
        assert torch.equal(out[:, :, : 8 - 3], base[:, :, : 8 - 3])

    def test_single_pixel_border_replication(self):
        src = torch.tensor([[[0.37]], [[0.52]], [[0.9]]])
        flow = torch.full((2, 1, 1), 5.0)
        assert torch.equal(warp_tensor(src, flow), src)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="do not match"):
            warp_tensor(torch.zeros(3, 8, 8), torch.zeros(2, 4, 4))

    def test_gradient_wrt_flow_matches_finite_differences(self):
        torch.manual_seed(0)
        src = torch.rand(3, 8, 8, dtype=torch.float64)
        flow = ((torch.rand(2, 8, 8, dtype=torch.float64) - 0.5) * 0.8).requires_grad_(True)

        loss = warp_tensor(src, flow).mean()
        loss.backward()
        numeric = finite_diff_grad(lambda: warp_tensor(src, flow.detach()).mean(), flow.detach())
        check_grad(flow.grad, numeric)

    def test_gradient_wrt_src_matches_finite_differences(self):
        torch.manual_seed(1)
        src = torch.rand(1, 8, 8, dtype=torch.float64).requires_grad_(True)
        flow = (torch.rand(2, 8, 8, dtype=torch.float64) - 0.5) * 0.8

        loss = warp_tensor(src, flow).mean()
        loss.backward()
        numeric = finite_diff_grad(lambda: warp_tensor(src.detach(), flow).mean(), src.detach())
        check_grad(src.grad, numeric)


class TestComposeFlows:
    def test_compose_zero_zero(self):
        z = zero_flow(8, 8)
        assert torch.equal(compose_flows(z, z).flow, z.flow)

    def test_translation_additivity(self):
        a = FlowField(torch.full((2, 12, 12), 2.0))
        b = FlowField(torch.full((2, 12, 12), 3.0))
        out = compose_flows(a, b).flow
        interior = out[:, :, : 12 - 5]
        assert torch.allclose(interior, torch.full_like(interior, 5.0))

    def test_compose_matches_two_step_warp(self):
        # band-limited image keeps the per-warp bilinear error well under the bound
        import math

        n = 64
        ys, xs = torch.meshgrid(
            torch.arange(n, dtype=torch.float64),
            torch.arange(n, dtype=torch.float64),
            indexing="ij",
        )
        img = (
            0.5
            + 0.25
            * torch.sin(2 * math.pi * xs / 96 + 1.0)
            * torch.sin(2 * math.pi * ys / 96 + 0.5)
        ).expand(3, n, n).clone()
        f_ab = smooth_random_field((2, n, n), sigma=14.0, seed=100)
        f_bc = smooth_random_field((2, n, n), sigma=14.0, seed=200)
        f_ab = f_ab / f_ab.abs().max() * 0.8
        f_bc = f_bc / f_bc.abs().max() * 0.8

        two_step = warp_tensor(warp_tensor(img, f_ab), f_bc)
        composed = warp_tensor(img, compose_tensor_flows(f_ab, f_bc))
        interior = (slice(None), slice(4, -4), slice(4, -4))
        assert (two_step[interior] - composed[interior]).abs().max() <= 1e-3

    def test_associative_on_constant_flows(self):
        a = FlowField(torch.full((2, 16, 16), 1.0))
        b = FlowField(torch.full((2, 16, 16), -2.0))
        c = FlowField(torch.full((2, 16, 16), 0.5))
        left = compose_flows(a, compose_flows(b, c)).flow
        right = compose_flows(compose_flows(a, b), c).flow
        interior = (slice(None), slice(4, -4), slice(4, -4))
        assert (left[interior] - right[interior]).abs().max() <= 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            compose_tensor_flows(torch.zeros(2, 8, 8), torch.zeros(2, 4, 4))
