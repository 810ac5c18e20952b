"""Frame-by-frame recurrent driving of the restoration network.

The engine feeds each degraded frame together with the previously restored
output, maintains a bounded buffer of the K most recent outputs, and keeps
an accumulated flow from each buffered output to the current frame by
composing the per-step flows. Warping the buffer through those flows
yields the aligned history consumed by the temporal-consistency loss.

State per stream is O(K) regardless of sequence length; the engine tracks
its peak number of retained tensors so tests can assert the bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .network import RestorationNet
from .video import VideoSequence, compose_tensor_flows, warp_tensor


@dataclass
class HistoryBuffer:
    """The K most recent restored outputs with flows onto the current frame.

    ``entries[k-1]`` holds the output from k steps back together with the
    accumulated flow that maps current-frame coordinates into it.
    """

    capacity: int
    entries: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.entries)

    def detached(self) -> "HistoryBuffer":
        return HistoryBuffer(
            capacity=self.capacity,
            entries=[(o.detach(), f.detach()) for o, f in self.entries],
        )


def update_buffer(
    buffer: HistoryBuffer, new_output: torch.Tensor, step_flow: torch.Tensor
) -> HistoryBuffer:
    """Advance the buffer by one step.

    Every stored flow (which maps into the previous frame) is composed with
    ``step_flow`` so it maps into the current frame; ``new_output`` (the
    previous restored frame) enters at position k=1 with ``step_flow``
    itself; the oldest entry beyond capacity is dropped.
    """
    if new_output.shape[-2:] != step_flow.shape[-2:]:
        raise ValueError(
            f"output dims {tuple(new_output.shape[-2:])} and flow dims "
            f"{tuple(step_flow.shape[-2:])} do not match"
        )
    entries = [(new_output, step_flow)]
    for output, flow in buffer.entries:
        entries.append((output, compose_tensor_flows(flow, step_flow)))
    return HistoryBuffer(capacity=buffer.capacity, entries=entries[: buffer.capacity])


def warp_history(buffer: HistoryBuffer, dims: tuple[int, int]) -> list[torch.Tensor]:
    """Warp every buffered output to the current frame's geometry."""
    h, w = dims
    warped = []
    for output, flow in buffer.entries:
        if output.shape[-2:] != (h, w):
            raise ValueError(
                f"buffered output dims {tuple(output.shape[-2:])} do not match "
                f"current dims {(h, w)}"
            )
        warped.append(warp_tensor(output, flow))
    return warped


@dataclass
class StepTrace:
    """Everything one step produces for losses, metrics and diagnostics."""

    restored: torch.Tensor
    flows: dict[str, torch.Tensor]
    flow_full: torch.Tensor | None
    warped_history: list[torch.Tensor]


class RecurrentEngine:
    """Stateful per-stream driver; one instance restores one video stream.

    Args:
        net: the restoration network (parameters are only read).
        history_size: K, how many past outputs feed the temporal loss.
        use_prev_output: when False the previous *degraded* frame is fed
            instead of the previous output (the non-recurrent ablation).
        clamp: clamp restored frames to [0, 1]; keep False while training
            so gradients survive.
    """

    def __init__(
        self,
        net: RestorationNet,
        history_size: int = 4,
        use_prev_output: bool = True,
        clamp: bool = True,
    ):
        if history_size < 0:
            raise ValueError(f"history_size must be >= 0, got {history_size}")
        self.net = net
        self.history_size = history_size
        self.use_prev_output = use_prev_output
        self.clamp = clamp
        self.peak_retained_tensors = 0
        self.reset()

    def reset(self) -> None:
        self.buffer = HistoryBuffer(capacity=self.history_size)
        self._last_output: torch.Tensor | None = None
        self._last_input: torch.Tensor | None = None
        self._t = 0

    @property
    def retained_tensor_count(self) -> int:
        count = 2 * len(self.buffer)
        count += self._last_output is not None
        count += self._last_input is not None
        return count

    def step(self, frame: torch.Tensor, detach_state: bool = True) -> StepTrace:
        """Restore one frame and advance the recurrent state.

        With ``detach_state`` the stored output/buffer are cut from the
        autograd graph, limiting backpropagation to the current step; the
        returned trace still carries gradients for this step's parameters.
        """
        if self._t == 0:
            previous = frame
        elif self.use_prev_output:
            previous = self._last_output
        else:
            previous = self._last_input

        out = self.net.restore_step(frame, previous, clamp=self.clamp)
        if out.flow_full is not None:
            step_flow = out.flow_full
        else:
            step_flow = torch.zeros(
                2, frame.shape[-2], frame.shape[-1], dtype=frame.dtype, device=frame.device
            )

        if self._t > 0:
            self.buffer = update_buffer(self.buffer, self._last_output, step_flow)
        warped = warp_history(self.buffer, (frame.shape[-2], frame.shape[-1]))

        trace = StepTrace(
            restored=out.restored,
            flows=out.flows,
            flow_full=out.flow_full,
            warped_history=warped,
        )

        if detach_state:
            self.buffer = self.buffer.detached()
            self._last_output = out.restored.detach()
        else:
            self._last_output = out.restored
        self._last_input = frame.detach() if detach_state else frame
        self._t += 1
        self.peak_retained_tensors = max(self.peak_retained_tensors, self.retained_tensor_count)
        return trace

    def run(self, degraded: VideoSequence) -> tuple[VideoSequence, list[StepTrace]]:
        """Restore a whole sequence under no_grad; resets state first."""
        self.reset()
        traces: list[StepTrace] = []
        frames: list[torch.Tensor] = []
        with torch.no_grad():
            for t in range(len(degraded)):
                trace = self.step(degraded.frames[t])
                traces.append(trace)
                frames.append(trace.restored)
        restored = VideoSequence(
            frames=torch.stack(frames), role="restored", frame_rate=degraded.frame_rate
        )
        return restored, traces


def run_sequence(
    net: RestorationNet,
    degraded: VideoSequence,
    history_size: int = 4,
    use_prev_output: bool = True,
    clamp: bool = True,
) -> tuple[VideoSequence, list[StepTrace]]:
    """One-shot restoration of a sequence with a fresh engine."""
    engine = RecurrentEngine(
        net, history_size=history_size, use_prev_output=use_prev_output, clamp=clamp
    )
    return engine.run(degraded)
