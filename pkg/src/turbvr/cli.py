"""Batch command-line entry points: synth, train, restore, eval, slice.

Every flag mirrors a config key one-to-one; flag values override config
file values and the effective configuration is echoed into the run log.
Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import struct
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as cfg
from .checkpoint import CheckpointError, apply_parameters, load_checkpoint
from .metrics import evaluate_pair, yt_slice
from .network import build_network
from .recurrent import RecurrentEngine
from .synth import ManifestRecord, degrade_sequence, params_to_dict, write_manifest
from .training import TrainingError, train
from .video import VideoSequence, load_sequence, save_sequence

FLOW_MAGIC = b"TVRF"

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class UsageError(ValueError):
    """Bad arguments or invalid inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: A003 - argparse hook
        raise UsageError(message)


def write_flow_sidecar(path: Path, flow: torch.Tensor) -> None:
    """Binary flow file: magic, uint32 H, uint32 W, float32 dx then dy plane."""
    h, w = flow.shape[-2:]
    arr = flow.detach().cpu().numpy().astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(arr[0].tobytes())
        fh.write(arr[1].tobytes())


def read_flow_sidecar(path: str | Path) -> torch.Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise ValueError(f"{path} is not a flow sidecar (bad magic)")
    h, w = struct.unpack("<II", raw[4:12])
    plane = h * w * 4
    dx = np.frombuffer(raw[12 : 12 + plane], dtype="<f4").reshape(h, w)
    dy = np.frombuffer(raw[12 + plane : 12 + 2 * plane], dtype="<f4").reshape(h, w)
    return torch.from_numpy(np.stack([dx, dy]).copy())


def _add_config_flags(parser: argparse.ArgumentParser, skip: frozenset[str] = frozenset()) -> None:
    for key in cfg.SCHEMA:
        if key.name in skip:
            continue
        parser.add_argument(
            "--" + key.name.replace("_", "-"),
            dest=f"cfg_{key.name}",
            default=None,
            metavar="V",
            help=f"{key.help} (default: {key.default})",
        )


def _effective_config(args: argparse.Namespace) -> dict:
    values = {}
    if getattr(args, "config", None):
        values.update(cfg.load_config_file(args.config))
    for key in cfg.SCHEMA:
        override = getattr(args, f"cfg_{key.name}", None)
        if override is not None:
            values[key.name] = override
    return cfg.validate(values)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="turbvr",
        description="Recurrent video restoration for atmospheric turbulence.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "synth",
        help="generate paired clean/degraded sequences from source images",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--src-dir", required=True, help="directory of source images or frame dirs")
    p.add_argument("--out-dir", required=True, help="output dataset directory")
    p.add_argument("--frames", type=int, default=50, help="frames per generated static sequence")
    p.add_argument("--strength", type=float, default=None, help="tilt strength override, px RMS")
    p.add_argument("--seed", type=int, default=0, help="base RNG seed")
    p.add_argument("--config", default=None, help="config file with turbulence keys")
    _add_config_flags(p, skip={"seed", "tilt_strength"})

    p = sub.add_parser(
        "train",
        help="train the restoration network",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--config", default=None, help="flat key-value config file")
    p.add_argument("--data-manifest", required=True, help="training manifest (JSON lines)")
    p.add_argument("--val-manifest", required=True, help="validation manifest (JSON lines)")
    p.add_argument("--out-dir", required=True, help="checkpoints and logs go here")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _add_config_flags(p)

    p = sub.add_parser(
        "restore",
        help="restore a degraded frame directory with a trained checkpoint",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--input-dir", required=True, help="degraded frame directory")
    p.add_argument("--output-dir", required=True, help="restored frame directory")
    p.add_argument(
        "--emit-flows",
        action="store_true",
        help="write per-step full-resolution flows as binary sidecars",
    )

    p = sub.add_parser(
        "eval",
        help="score a restored sequence against a reference",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--restored-dir", required=True, help="restored frame directory")
    p.add_argument("--reference-dir", required=True, help="reference frame directory")
    p.add_argument("--report", required=True, help="output JSON report path")

    p = sub.add_parser(
        "slice",
        help="render a y-t slice image from a frame directory",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--input-dir", required=True, help="frame directory")
    p.add_argument("--x", type=int, required=True, help="pixel column to slice")
    p.add_argument("--t0", type=int, default=0, help="first frame (inclusive)")
    p.add_argument("--t1", type=int, default=None, help="last frame (exclusive; default: end)")
    p.add_argument("--out", required=True, help="output PNG path")
    return parser


def _list_sources(src_dir: Path) -> list[Path]:
    sources = []
    for entry in sorted(src_dir.iterdir()):
        if entry.is_file() and entry.suffix.lower() in IMAGE_SUFFIXES:
            sources.append(entry)
        elif entry.is_dir() and any(f.suffix == ".png" for f in entry.iterdir()):
            sources.append(entry)
    return sources


def cmd_synth(args: argparse.Namespace) -> int:
    src_dir = Path(args.src_dir)
    out_dir = Path(args.out_dir)
    if not src_dir.is_dir():
        raise UsageError(f"source directory not found: {src_dir}")
    sources = _list_sources(src_dir)
    if not sources:
        raise UsageError(f"no readable images or frame directories in {src_dir}")
    if args.frames < 1:
        raise UsageError(f"--frames must be >= 1, got {args.frames}")
    effective = _effective_config(args)
    effective["seed"] = args.seed
    if args.strength is not None:
        effective["tilt_strength"] = args.strength

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(effective, indent=2, sort_keys=True), encoding="utf-8"
    )
    records = []
    for index, source in enumerate(sources):
        seed = int(np.random.SeedSequence([args.seed, index]).generate_state(1)[0])
        params = cfg.turbulence_params_from(effective, seed=seed)
        if source.is_dir():
            clean = load_sequence(source, "clean")
        else:
            with Image.open(source) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            frame = torch.from_numpy(arr).permute(2, 0, 1)
            clean = VideoSequence(
                frames=frame.unsqueeze(0).repeat(args.frames, 1, 1, 1), role="clean"
            )
        degraded, _ = degrade_sequence(clean, params)

        clean_dir = out_dir / source.stem / "clean"
        degraded_dir = out_dir / source.stem / "degraded"
        save_sequence(clean, clean_dir)
        save_sequence(degraded, degraded_dir)
        records.append(
            ManifestRecord(
                clean_dir=str(clean_dir),
                degraded_dir=str(degraded_dir),
                seed=seed,
                params=params_to_dict(params),
            )
        )
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(records, manifest_path)
    print(f"wrote {len(records)} sequence pairs and {manifest_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    effective = _effective_config(args)
    train_config = _train_config_from(effective)
    for name in ("data_manifest", "val_manifest"):
        path = Path(getattr(args, name))
        if not path.is_file():
            raise UsageError(f"--{name.replace('_', '-')}: manifest not found: {path}")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(effective, indent=2, sort_keys=True), encoding="utf-8"
    )
    train(
        args.data_manifest,
        args.val_manifest,
        train_config,
        out_dir,
        config_snapshot=effective,
        resume_from=args.resume,
    )
    print(f"training finished; best checkpoint at {out_dir / 'best.ckpt'}")
    return 0


def _train_config_from(effective: dict):
    from .training import TrainConfig

    try:
        return TrainConfig(
            epochs=effective["epochs"],
            batch_size=effective["batch_size"],
            patch_size=effective["patch_size"],
            lr_initial=effective["lr_initial"],
            lr_step_epochs=effective["lr_step_epochs"],
            lr_gamma=effective["lr_gamma"],
            seed=effective["seed"],
            clip_length=effective["clip_length"],
            bptt_window=effective["bptt_window"],
            grad_clip=effective["grad_clip"],
            recurrent=effective["recurrent"],
            detector=effective["detector"],
            loss=cfg.loss_config_from(effective),
            model=cfg.model_config_from(effective),
        )
    except ValueError as exc:
        raise cfg.ConfigError(str(exc)) from exc


def cmd_restore(args: argparse.Namespace) -> int:
    input_dir = Path(args.input_dir)
    if not input_dir.is_dir():
        raise UsageError(f"input directory not found: {input_dir}")
    ckpt = load_checkpoint(args.checkpoint)
    effective = cfg.validate(ckpt.config)
    net = build_network(cfg.model_config_from(effective))
    apply_parameters(net, ckpt.parameters)
    net.eval()

    degraded = load_sequence(input_dir, "degraded")
    engine = RecurrentEngine(
        net,
        history_size=effective["history_k"],
        use_prev_output=effective["recurrent"],
        clamp=True,
    )
    out_dir = Path(args.output_dir)
    flows_dir = out_dir / "flows"
    if args.emit_flows:
        flows_dir.mkdir(parents=True, exist_ok=True)

    frames = []
    timings = []
    with torch.no_grad():
        for t in range(len(degraded)):
            start = time.perf_counter()
            trace = engine.step(degraded.frames[t])
            timings.append(time.perf_counter() - start)
            frames.append(trace.restored)
            if args.emit_flows:
                flow = trace.flow_full
                if flow is None:
                    flow = torch.zeros(2, degraded.height, degraded.width)
                write_flow_sidecar(flows_dir / f"flow_{t:05d}.bin", flow)

    restored = VideoSequence(frames=torch.stack(frames), role="restored")
    save_sequence(restored, out_dir)
    mean_s = sum(timings) / len(timings)
    print(
        f"restored {len(restored)} frames ({degraded.width}x{degraded.height}) "
        f"to {out_dir}; mean {mean_s:.4f} s/frame"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    restored_dir = Path(args.restored_dir)
    reference_dir = Path(args.reference_dir)
    for d in (restored_dir, reference_dir):
        if not d.is_dir():
            raise UsageError(f"directory not found: {d}")
    restored = load_sequence(restored_dir, "restored")
    reference = load_sequence(reference_dir, "clean")
    if len(restored) != len(reference):
        raise UsageError(
            f"length mismatch: {len(restored)} restored vs {len(reference)} reference frames"
        )
    report = evaluate_pair(
        restored,
        reference,
        metadata={"sequence_ids": [str(restored_dir)], "config_hash": None},
    )
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(report_path)
    agg = report.aggregate
    print(
        f"psnr_mean={agg['psnr_mean']:.4f} ssim_mean={agg['ssim_mean']:.6f} "
        f"temporal_consistency={agg['temporal_consistency']:.6f}"
    )
    return 0


def cmd_slice(args: argparse.Namespace) -> int:
    input_dir = Path(args.input_dir)
    if not input_dir.is_dir():
        raise UsageError(f"input directory not found: {input_dir}")
    seq = load_sequence(input_dir, "degraded")
    t1 = len(seq) if args.t1 is None else args.t1
    if not 0 <= args.x < seq.width:
        raise UsageError(f"--x {args.x} out of range [0, {seq.width - 1}]")
    if not (0 <= args.t0 < t1 <= len(seq)):
        raise UsageError(
            f"frame range [{args.t0}, {t1}) invalid; sequence has {len(seq)} frames"
        )
    image = yt_slice(seq, args.x, (args.t0, t1))
    arr = (image.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(out_path)
    print(f"wrote {arr.shape[1]}x{arr.shape[0]} slice to {out_path}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "restore": cmd_restore,
    "eval": cmd_eval,
    "slice": cmd_slice,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfg.ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
