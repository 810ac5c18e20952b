"""Training loop: Adam with stepped learning-rate halving, per-clip
recurrent loss assembly, validation and best-score checkpointing.

Each clip is cropped to a shared patch, run through the recurrent engine,
and every step contributes the weighted loss suite; the detection term is
evaluated once per clip on the final restored frame, scored against blob
detections on the corresponding clean frame. Backpropagation through the
recurrence is truncated to ``bptt_window`` steps (default: the current
step only).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .checkpoint import Checkpoint, apply_parameters, load_checkpoint, save_checkpoint
from .detect import Detector, create_detector
from .losses import LossConfig, detection_loss, ramp_weight, total_loss
from .metrics import EvalReport, evaluate_pair
from .network import ModelConfig, RestorationNet, build_network
from .recurrent import RecurrentEngine
from .synth import ManifestRecord, read_manifest
from .video import VideoSequence, crop_patch_pair, load_sequence

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss or other unrecoverable training failure."""


@dataclass
class TrainConfig:
    """Everything the training loop needs, including the nested model and
    loss settings and the recurrence ablation switch."""

    epochs: int = 100
    batch_size: int = 1
    patch_size: int = 256
    lr_initial: float = 1e-4
    lr_step_epochs: int = 5
    lr_gamma: float = 0.5
    seed: int = 0
    clip_length: int = 12
    bptt_window: int = 1
    grad_clip: float = 1.0
    recurrent: bool = True
    detector: str = "blob"
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ValueError(f"lr_gamma must be in (0, 1], got {self.lr_gamma}")
        if self.patch_size % 4:
            raise ValueError(f"patch_size must be divisible by 4, got {self.patch_size}")
        if self.lr_initial <= 0:
            raise ValueError(f"lr_initial must be > 0, got {self.lr_initial}")
        if self.lr_step_epochs < 1:
            raise ValueError(f"lr_step_epochs must be >= 1, got {self.lr_step_epochs}")
        if self.clip_length < 1:
            raise ValueError(f"clip_length must be >= 1, got {self.clip_length}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.bptt_window < 1:
            raise ValueError(f"bptt_window must be >= 1, got {self.bptt_window}")
        if self.grad_clip < 0:
            raise ValueError(f"grad_clip must be >= 0, got {self.grad_clip}")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Stateless schedule: the rate is halved every lr_step_epochs epochs,
    so resuming at any epoch reproduces the uninterrupted schedule."""
    return config.lr_initial * config.lr_gamma ** (epoch // config.lr_step_epochs)


@dataclass
class ClipBatch:
    degraded: VideoSequence
    clean: VideoSequence
    source: str


def _load_pairs(manifest: str | Path | list[ManifestRecord]) -> list[tuple[VideoSequence, VideoSequence, str]]:
    records = manifest if isinstance(manifest, list) else read_manifest(manifest)
    pairs = []
    for rec in records:
        degraded = load_sequence(rec.degraded_dir, "degraded")
        clean = load_sequence(rec.clean_dir, "clean")
        pairs.append((degraded, clean, rec.degraded_dir))
    if not pairs:
        raise TrainingError("manifest contains no usable clean/degraded pairs")
    return pairs


def _split_clips(
    pairs: list[tuple[VideoSequence, VideoSequence, str]], clip_length: int
) -> Iterable[ClipBatch]:
    for degraded, clean, source in pairs:
        t = len(degraded)
        if len(clean) != t:
            raise ValueError(f"pair {source}: degraded has {t} frames, clean {len(clean)}")
        for start in range(0, t, clip_length):
            end = min(start + clip_length, t)
            yield ClipBatch(
                degraded=VideoSequence(degraded.frames[start:end], "degraded"),
                clean=VideoSequence(clean.frames[start:end], "clean"),
                source=f"{source}[{start}:{end}]",
            )


def _clip_seed(seed: int, epoch: int, clip_index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, clip_index]).generate_state(1)[0])


def train_clip(
    net: RestorationNet,
    clip: ClipBatch,
    epoch: int,
    config: TrainConfig,
    detector: Detector | None,
) -> dict[str, float]:
    """Accumulate gradients for one clip; returns the averaged loss terms."""
    engine = RecurrentEngine(
        net,
        history_size=config.loss.history_k,
        use_prev_output=config.recurrent,
        clamp=False,
    )
    steps = len(clip.degraded)
    sums = {"loss_charb": 0.0, "loss_dwt": 0.0, "loss_flow": 0.0}
    det_value = 0.0
    total_value = 0.0
    pending = None
    for t in range(steps):
        boundary = ((t + 1) % config.bptt_window == 0) or (t == steps - 1)
        trace = engine.step(clip.degraded.frames[t], detach_state=boundary)

        loss, breakdown = total_loss(
            trace.restored,
            clip.clean.frames[t],
            trace.warped_history,
            None,
            epoch,
            config.loss,
        )
        step_loss = loss / steps
        # per-step terms are averaged over the clip; the detection term is
        # evaluated once, on the final restored frame, and added unscaled
        if t == steps - 1 and config.loss.detection and detector is not None:
            gt = detector.detect(clip.clean.frames[t]).boxes
            l_det = detection_loss(trace.restored, gt, detector)
            det_value = float(l_det.detach())
            w_det = ramp_weight(config.loss.lambda_det_max, epoch, config.loss.ramp_epochs)
            step_loss = step_loss + w_det * l_det

        if not (math.isfinite(breakdown["loss_total"]) and math.isfinite(det_value)):
            raise TrainingError(
                f"non-finite loss at epoch {epoch} on {clip.source} step {t}: "
                f"{breakdown}, loss_det={det_value}"
            )
        for key in sums:
            sums[key] += breakdown[key]
        total_value += float(step_loss.detach())

        pending = step_loss if pending is None else pending + step_loss
        if boundary:
            pending.backward()
            pending = None

    return {
        "loss_total": total_value,
        "loss_charb": sums["loss_charb"] / steps,
        "loss_dwt": sums["loss_dwt"] / steps,
        "loss_flow": sums["loss_flow"] / steps,
        "loss_det": det_value,
    }


def validate(
    net: RestorationNet,
    val_manifest: str | Path | list[ManifestRecord],
    config: TrainConfig,
) -> tuple[EvalReport, float]:
    """Full-resolution recurrent restoration of every validation pair.

    Returns the frame-averaged report and the combined score
    psnr_mean / 50 + ssim_mean used for checkpoint selection.
    """
    pairs = _load_pairs(val_manifest)
    net.eval()
    per_frame: list[dict[str, float]] = []
    tc_values: list[float] = []
    ids: list[str] = []
    for degraded, clean, source in pairs:
        engine = RecurrentEngine(
            net,
            history_size=config.loss.history_k,
            use_prev_output=config.recurrent,
            clamp=True,
        )
        restored, traces = engine.run(degraded)
        flows = []
        for t in range(1, len(restored)):
            flow = traces[t].flow_full
            if flow is None:
                flow = torch.zeros(2, restored.height, restored.width)
            flows.append(flow)
        report = evaluate_pair(restored, clean, flows=flows)
        per_frame.extend(report.per_frame)
        tc_values.append(report.aggregate["temporal_consistency"])
        ids.append(source)
    net.train()

    aggregate = {
        "psnr_mean": sum(f["psnr"] for f in per_frame) / len(per_frame),
        "ssim_mean": sum(f["ssim"] for f in per_frame) / len(per_frame),
        "temporal_consistency": sum(tc_values) / len(tc_values),
        "lpips_mean": None,
    }
    config_hash = hashlib.sha256(repr(config).encode("utf-8")).hexdigest()[:16]
    report = EvalReport(
        per_frame=per_frame,
        aggregate=aggregate,
        metadata={"sequence_ids": ids, "config_hash": config_hash},
    )
    return report, combined_score(aggregate["psnr_mean"], aggregate["ssim_mean"])


def combined_score(psnr_mean: float, ssim_mean: float) -> float:
    """Checkpoint selection score; /50 puts PSNR on the SSIM scale."""
    return psnr_mean / 50.0 + ssim_mean


def train(
    train_manifest: str | Path | list[ManifestRecord],
    val_manifest: str | Path | list[ManifestRecord],
    config: TrainConfig,
    out_dir: str | Path,
    config_snapshot: dict | None = None,
    resume_from: str | Path | None = None,
) -> Checkpoint:
    """Run the full training protocol; returns the best checkpoint.

    Writes ``train_log.jsonl`` (one record per optimizer step),
    ``val_log.jsonl`` (one record per epoch) and ``best.ckpt`` under
    ``out_dir``. ``config_snapshot`` is stored verbatim in checkpoints so
    restoration can rebuild the network without the original config file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    net = build_network(config.model)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr_initial)
    start_epoch = 0
    best_score = float("-inf")
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        apply_parameters(net, ckpt.parameters)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.rng_state is not None:
            torch.set_rng_state(ckpt.rng_state)
        start_epoch = ckpt.epoch + 1
        best_score = ckpt.best_score
        logger.info("resumed from %s at epoch %d", resume_from, start_epoch)

    detector = create_detector(config.detector) if config.loss.detection else None
    pairs = _load_pairs(train_manifest)
    snapshot = config_snapshot or {}
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "train_log.jsonl"
    val_log_path = out_dir / "val_log.jsonl"

    global_step = 0
    mode = "a" if resume_from is not None else "w"
    with open(log_path, mode, encoding="utf-8") as log_fh, open(
        val_log_path, mode, encoding="utf-8"
    ) as val_fh:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at_epoch(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr

            optimizer.zero_grad()
            accumulated = 0
            group_terms: list[dict[str, float]] = []
            for clip_index, clip in enumerate(_split_clips(pairs, config.clip_length)):
                try:
                    seed = _clip_seed(config.seed, epoch, clip_index)
                    size = min(config.patch_size, clip.degraded.height, clip.degraded.width)
                    degraded_patch, clean_patch = crop_patch_pair(
                        clip.degraded, clip.clean, size, seed
                    )
                except ValueError as exc:
                    logger.warning("skipping clip %s: %s", clip.source, exc)
                    continue

                terms = train_clip(
                    net,
                    ClipBatch(degraded_patch, clean_patch, clip.source),
                    epoch,
                    config,
                    detector,
                )
                group_terms.append(terms)
                accumulated += 1
                if accumulated == config.batch_size:
                    if config.batch_size > 1:
                        for p in net.parameters():
                            if p.grad is not None:
                                p.grad /= config.batch_size
                    if config.grad_clip > 0:
                        torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
                    optimizer.step()
                    optimizer.zero_grad()
                    record = {
                        "epoch": epoch,
                        "step": global_step,
                        "lr": lr,
                    }
                    for key in ("loss_total", "loss_charb", "loss_dwt", "loss_flow", "loss_det"):
                        record[key] = sum(t[key] for t in group_terms) / len(group_terms)
                    log_fh.write(json.dumps(record) + "\n")
                    global_step += 1
                    accumulated = 0
                    group_terms = []
            # drop any ragged remainder of an accumulation group
            optimizer.zero_grad()

            report, score = validate(net, val_manifest, config)
            val_fh.write(
                json.dumps(
                    {
                        "epoch": epoch,
                        "psnr_mean": report.aggregate["psnr_mean"],
                        "ssim_mean": report.aggregate["ssim_mean"],
                        "temporal_consistency": report.aggregate["temporal_consistency"],
                        "combined_score": score,
                    }
                )
                + "\n"
            )
            log_fh.flush()
            val_fh.flush()
            if score > best_score:
                best_score = score
                save_checkpoint(
                    Checkpoint(
                        parameters=net.state_dict(),
                        config=snapshot,
                        epoch=epoch,
                        best_score=best_score,
                        optimizer_state=optimizer.state_dict(),
                        rng_state=torch.get_rng_state(),
                        metadata={"combined_score": score},
                    ),
                    best_path,
                )
                logger.info("epoch %d: new best combined score %.4f", epoch, score)

    if not best_path.is_file():
        raise TrainingError("training finished without saving any checkpoint")
    return load_checkpoint(best_path)
