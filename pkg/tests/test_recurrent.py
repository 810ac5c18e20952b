import pytest
import torch

from conftest import make_frames
from oracles import smooth_random_field
from turbvr.network import build_network
from turbvr.recurrent import (
    HistoryBuffer,
    RecurrentEngine,
    run_sequence,
    update_buffer,
    warp_history,
)
from turbvr.synth import TurbulenceParams, generate_tilt_series
from turbvr.video import VideoSequence, warp_tensor


def const_flow(value: float, h: int = 8, w: int = 8) -> torch.Tensor:
    return torch.full((2, h, w), value)


class TestHistoryBuffer:
    def test_first_insert(self):
        buf = HistoryBuffer(capacity=3)
        out = torch.rand(3, 8, 8)
        buf = update_buffer(buf, out, const_flow(1.0))
        assert len(buf) == 1
        assert torch.equal(buf.entries[0][0], out)
        assert torch.equal(buf.entries[0][1], const_flow(1.0))

    def test_ring_eviction(self):
        buf = HistoryBuffer(capacity=2)
        for i in range(3):
            buf = update_buffer(buf, torch.full((3, 8, 8), float(i)), const_flow(0.0))
        assert len(buf) == 2
        assert float(buf.entries[0][0][0, 0, 0]) == 2.0
        assert float(buf.entries[1][0][0, 0, 0]) == 1.0

    def test_translation_flows_accumulate(self):
        buf = HistoryBuffer(capacity=4)
        buf = update_buffer(buf, torch.rand(3, 8, 8), const_flow(1.0))
        buf = update_buffer(buf, torch.rand(3, 8, 8), const_flow(2.0))
        # entry k=2 now carries 1 + 2 = 3 px of displacement
        assert torch.allclose(buf.entries[1][1], const_flow(3.0))

    def test_warp_history_zero_flows_identity(self):
        outputs = [torch.rand(3, 8, 8) for _ in range(3)]
        buf = HistoryBuffer(capacity=4)
        for out in outputs:
            buf = update_buffer(buf, out, const_flow(0.0))
        warped = warp_history(buf, (8, 8))
        for got, expected in zip(warped, reversed(outputs)):
            assert torch.equal(got, expected)

    def test_empty_history(self):
        assert warp_history(HistoryBuffer(capacity=4), (8, 8)) == []

    def test_dims_mismatch(self):
        buf = update_buffer(HistoryBuffer(capacity=2), torch.rand(3, 8, 8), const_flow(0.0))
        with pytest.raises(ValueError):
            warp_history(buf, (16, 16))

    def test_static_scene_ground_truth_flow_oracle(self):
        # a smooth static scene, each observation tilted by a known field;
        # warping an observation by the negated tilt recovers the scene
        base = smooth_random_field((3, 32, 32), sigma=3.0, seed=31, dtype=torch.float32)
        base = (base - base.min()) / (base.max() - base.min())
        params = TurbulenceParams(
            tilt_strength=1.0, spatial_corr=8.0, blur_sigma_range=(0.0, 0.0), seed=17
        )
        tilts = generate_tilt_series(params, 4, 32, 32)
        buf = HistoryBuffer(capacity=4)
        observations = [warp_tensor(base, t.flow) for t in tilts]
        buf.entries = [(obs, -t.flow) for obs, t in zip(observations, tilts)]
        for warped in warp_history(buf, (32, 32)):
            assert float((warped - base).abs().mean()) <= 0.02


class TestEngine:
    def test_single_frame_bootstrap(self, tiny_model_config):
        net = build_network(tiny_model_config, seed=0, zero_init=False)
        seq = VideoSequence(make_frames(1, 16, 16, seed=1), "degraded")
        restored, traces = run_sequence(net, seq)
        assert len(restored) == 1
        assert traces[0].warped_history == []

    def test_identity_network_passthrough(self, tiny_model_config):
        net = build_network(tiny_model_config, seed=0)
        seq = VideoSequence(make_frames(5, 16, 16, seed=2), "degraded")
        restored, _ = run_sequence(net, seq)
        assert torch.equal(restored.frames, seq.frames)

    def test_prefix_property(self, tiny_model_config):
        net = build_network(tiny_model_config, seed=0, zero_init=False)
        frames = make_frames(6, 16, 16, seed=3)
        full, _ = run_sequence(net, VideoSequence(frames, "degraded"))
        for t in (1, 3, 5):
            prefix, _ = run_sequence(net, VideoSequence(frames[: t + 1], "degraded"))
            assert torch.equal(prefix.frames[t], full.frames[t])

    def test_bit_identical_repeat(self, tiny_model_config):
        net = build_network(tiny_model_config, seed=0, zero_init=False)
        seq = VideoSequence(make_frames(4, 16, 16, seed=4), "degraded")
        a, _ = run_sequence(net, seq)
        b, _ = run_sequence(net, seq)
        assert torch.equal(a.frames, b.frames)

    def test_non_recurrent_mode_feeds_degraded_previous(self, tiny_model_config):
        net = build_network(tiny_model_config, seed=0, zero_init=False)
        frames = make_frames(4, 16, 16, seed=5)
        restored, _ = run_sequence(net, VideoSequence(frames, "degraded"), use_prev_output=False)
        with torch.no_grad():
            expected = [net.restore_step(frames[0], frames[0], clamp=True).restored]
            for t in range(1, 4):
                expected.append(net.restore_step(frames[t], frames[t - 1], clamp=True).restored)
        assert torch.equal(restored.frames, torch.stack(expected))

    def test_buffer_bounded_and_flows_accumulated(self, tiny_model_config):
        net = build_network(tiny_model_config, seed=0, zero_init=False)
        engine = RecurrentEngine(net, history_size=3, clamp=True)
        frames = make_frames(7, 16, 16, seed=6)
        with torch.no_grad():
            for t in range(7):
                trace = engine.step(frames[t])
                assert len(engine.buffer) == min(t, 3)
                assert len(trace.warped_history) == min(t, 3)

    def test_memory_is_constant_in_sequence_length(self, tiny_model_config):
        net = build_network(tiny_model_config, seed=0)
        peaks = []
        for length in (20, 60):
            engine = RecurrentEngine(net, history_size=4, clamp=True)
            with torch.no_grad():
                for t in range(length):
                    engine.step(torch.rand(3, 16, 16))
            peaks.append(engine.peak_retained_tensors)
        assert peaks[0] == peaks[1] <= 2 * 4 + 2

    def test_training_step_carries_gradients(self, tiny_model_config):
        net = build_network(tiny_model_config, seed=0, zero_init=False)
        engine = RecurrentEngine(net, history_size=2, clamp=False)
        frames = make_frames(3, 16, 16, seed=7)
        for t in range(3):
            trace = engine.step(frames[t])
            assert trace.restored.requires_grad
        # warped history must carry gradient through the current step flow
        assert trace.warped_history[0].grad_fn is not None
        trace.restored.mean().backward()
