"""The training loss suite: Charbonnier, wavelet sub-band, temporal flow
consistency and detection-guided terms, plus their weighted combination
with a ramped schedule for the temporal and detection weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .detect import DetectionResult, Detector, DetectorError
from .video import BoundingBox

LOG_FLOOR = 1e-7


@dataclass
class LossConfig:
    """Loss weights, wavelet settings and the per-term ablation switches.

    ``lambda_flow_max`` and ``lambda_det_max`` are reached after
    ``ramp_epochs`` epochs of linear ramping; ``lambda_dwt`` is constant.
    ``history_k`` is the temporal buffer depth K.
    """

    epsilon: float = 1e-3
    lambda_dwt: float = 0.1
    lambda_flow_max: float = 0.2
    lambda_det_max: float = 0.05
    ramp_epochs: int = 50
    wavelet_family: str = "haar"
    wavelet_levels: int = 1
    history_k: int = 4
    wavelet: bool = True
    detection: bool = True
    flow: bool = True

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        for name in ("lambda_dwt", "lambda_flow_max", "lambda_det_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.wavelet_levels < 1:
            raise ValueError(f"wavelet_levels must be >= 1, got {self.wavelet_levels}")
        if self.wavelet_family.lower() != "haar":
            raise ValueError(
                f"unsupported wavelet family {self.wavelet_family!r}; only 'haar' is available"
            )
        if self.history_k < 0:
            raise ValueError(f"history_k must be >= 0, got {self.history_k}")
        if self.ramp_epochs < 0:
            raise ValueError(f"ramp_epochs must be >= 0, got {self.ramp_epochs}")


def charbonnier(pred: torch.Tensor, target: torch.Tensor, epsilon: float = 1e-3) -> torch.Tensor:
    """Mean of sqrt(d^2 + eps^2) over elements; a smooth l1 with floor eps."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    return torch.sqrt(diff * diff + epsilon * epsilon).mean()


def haar_subbands(x: torch.Tensor, levels: int = 1) -> list[torch.Tensor]:
    """Orthonormal Haar decomposition of the last two dims.

    Returns 3*levels detail bands (LH, HL, HH per level, coarse first is
    not — finest level first) followed by the final LL band. The transform
    is orthonormal: total squared coefficient energy equals input energy.
    """
    h, w = x.shape[-2:]
    div = 1 << levels
    if h % div or w % div:
        raise ValueError(f"dims {h}x{w} not divisible by 2^{levels}")
    bands: list[torch.Tensor] = []
    cur = x
    for _ in range(levels):
        a = cur[..., 0::2, 0::2]
        b = cur[..., 0::2, 1::2]
        c = cur[..., 1::2, 0::2]
        d = cur[..., 1::2, 1::2]
        ll = (a + b + c + d) / 2
        lh = (a + b - c - d) / 2
        hl = (a - b + c - d) / 2
        hh = (a - b - c + d) / 2
        bands.extend([lh, hl, hh])
        cur = ll
    bands.append(cur)
    return bands


def wavelet_loss(pred: torch.Tensor, target: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """Sum of per-sub-band Charbonnier distances between the decompositions."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    bands_pred = haar_subbands(pred, config.wavelet_levels)
    bands_target = haar_subbands(target, config.wavelet_levels)
    total = pred.new_zeros(())
    for bp, bt in zip(bands_pred, bands_target):
        total = total + charbonnier(bp, bt, config.epsilon)
    return total


def flow_consistency_loss(current: torch.Tensor, history: list[torch.Tensor]) -> torch.Tensor:
    """Sum over k of 0.5^k times the mean l1 gap to the k-th warped output."""
    total = current.new_zeros(())
    for k, warped in enumerate(history, start=1):
        if warped.shape != current.shape:
            raise ValueError(
                f"warped history entry {k} has shape {tuple(warped.shape)}, "
                f"expected {tuple(current.shape)}"
            )
        total = total + 0.5**k * (current - warped).abs().mean()
    return total


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two axis-aligned boxes."""
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _match_boxes(
    predictions: list[BoundingBox], gts: list[BoundingBox]
) -> list[tuple[int, int, float]]:
    """Greedy descending-IoU matching; each side used at most once."""
    pairs = [
        (box_iou(p, g), i, j)
        for i, p in enumerate(predictions)
        for j, g in enumerate(gts)
    ]
    pairs.sort(key=lambda t: t[0], reverse=True)
    used_p: set[int] = set()
    used_g: set[int] = set()
    matches = []
    for iou, i, j in pairs:
        if iou <= 0.0 or i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((i, j, iou))
    return matches


def _bce(confidence: torch.Tensor, y: int) -> torch.Tensor:
    """Binary cross-entropy with the log argument floored away from zero."""
    if y == 1:
        return -torch.log(confidence.clamp(min=LOG_FLOOR))
    return -torch.log((1.0 - confidence).clamp(min=LOG_FLOOR))


def detection_loss(
    restored_last: torch.Tensor,
    gt_boxes: list[BoundingBox],
    detector: Detector,
) -> torch.Tensor:
    """IoU regression plus objectness confidence loss on one frame.

    Ground truth is filtered to the "person" class. Matched ground-truth
    boxes contribute 1 - IoU, unmatched ones contribute 1, averaged over
    ground truth; confidences are scored against y = 1 iff a person is
    present, averaged over predictions.
    """
    try:
        result = detector.detect(restored_last)
    except DetectorError:
        raise
    except Exception as exc:
        raise DetectorError(f"detector raised {type(exc).__name__}: {exc}") from exc
    if not isinstance(result, DetectionResult):
        raise DetectorError(f"detector returned {type(result).__name__}, expected DetectionResult")

    persons = [g for g in gt_boxes if g.class_label == "person"]
    y = 1 if persons else 0
    predictions = result.boxes

    # box/BCE arithmetic runs in float64 so the analytic values are exact
    zero = torch.zeros((), dtype=torch.float64, device=restored_last.device)
    if persons:
        matches = _match_boxes(predictions, persons)
        iou_by_gt = {j: iou for _, j, iou in matches}
        loss_iou = sum(1.0 - iou_by_gt.get(j, 0.0) for j in range(len(persons))) / len(persons)
        loss_iou = zero + loss_iou
    else:
        loss_iou = zero

    if predictions:
        terms = []
        for box in predictions:
            if box.confidence is None:
                raise DetectorError(f"prediction without confidence from {result.source!r}")
            conf = torch.as_tensor(box.confidence, device=restored_last.device)
            terms.append(_bce(conf.to(torch.float64), y))
        loss_conf = torch.stack(terms).mean()
    else:
        loss_conf = zero

    return loss_iou + loss_conf


def ramp_weight(maximum: float, epoch: int, ramp_epochs: int) -> float:
    """Linear ramp from 0 at epoch 0 up to ``maximum`` at ``ramp_epochs``."""
    if ramp_epochs <= 0:
        return maximum
    return maximum * min(1.0, epoch / ramp_epochs)


def total_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    history: list[torch.Tensor],
    detection_inputs: tuple[torch.Tensor, list[BoundingBox], Detector] | None,
    epoch: int,
    config: LossConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted combination of all enabled terms plus a per-term breakdown.

    Disabled terms are skipped entirely and reported as 0. The breakdown
    holds the raw (unweighted) term values for logging.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    l_charb = charbonnier(pred, target, config.epsilon)
    zero = pred.new_zeros(())

    l_dwt = wavelet_loss(pred, target, config) if config.wavelet else zero
    l_flow = flow_consistency_loss(pred, history) if config.flow else zero
    if config.detection and detection_inputs is not None:
        frame, gt_boxes, detector = detection_inputs
        l_det = detection_loss(frame, gt_boxes, detector)
    else:
        l_det = zero

    w_flow = ramp_weight(config.lambda_flow_max, epoch, config.ramp_epochs)
    w_det = ramp_weight(config.lambda_det_max, epoch, config.ramp_epochs)
    total = l_charb + config.lambda_dwt * l_dwt + w_flow * l_flow + w_det * l_det

    breakdown = {
        "loss_total": float(total.detach()),
        "loss_charb": float(l_charb.detach()),
        "loss_dwt": float(l_dwt.detach()),
        "loss_flow": float(l_flow.detach()),
        "loss_det": float(l_det.detach()),
        "weight_dwt": config.lambda_dwt if config.wavelet else 0.0,
        "weight_flow": w_flow if config.flow else 0.0,
        "weight_det": w_det if config.detection else 0.0,
    }
    return total, breakdown
