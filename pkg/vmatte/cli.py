#!/usr/bin/env python3
"""
Command-line entry point
Subcommands synthesize, train, propagate, matte, evaluate and ablate; results
are printed to stdout as JSON, logs go to stderr
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .ablation import STUDY_NAMES, run_ablation
from .config import env_default, load_config, write_config
from .dataset import load_dataset, load_sample, synthesize_dataset, training_clips
from .errors import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, ConfigError, FormatError, InvalidInputError
from .io import (read_alpha_frames, read_frames, read_manifest, read_motion, read_trimaps, write_alpha_frames,
                 write_trimaps)
from .matting_net import predict_clip
from .metrics import aggregate, evaluate_sequence, evaluation_mask
from .reports import per_frame_sad_csv, plot_per_frame_sad, report_to_json
from .trainer import load_model, train_matting, train_trimap
from .trimap_prop import labeled_frames, propagate_clip

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
USAGE_ERRORS = (InvalidInputError, ConfigError, FormatError, OSError)


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        stream=sys.stderr, force=True)


def _output_dir(value: Optional[str], name: str) -> Path:
    if value:
        return Path(value)
    return Path(env_default("OUTPUT_PATH", "./output")) / name


def _int_list(value: Optional[str]) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise InvalidInputError(f"expected comma-separated integers, got {value!r}") from exc


def _full_trimaps(directory: Path, length: int):
    found = read_trimaps(directory)
    missing = [t for t in range(length) if t not in found]
    if missing:
        raise InvalidInputError(f"{directory} lacks trimaps for frames {missing[:10]}")
    return [found[t] for t in range(length)]


def cmd_synthesize(args) -> Dict[str, Any]:
    overrides = list(args.override)
    for key, value in (("synth.frames", args.frames), ("synth.size", args.size), ("synth.seed", args.seed)):
        if value is not None:
            overrides.append(f"{key}={value}")
    config = load_config(args.config, overrides, preset=args.preset)
    out = _output_dir(args.out, "dataset")
    manifest = synthesize_dataset(out, args.num, config.synth, fg_mode=args.fg_mode,
                                  fg_dir=Path(args.fg_dir) if args.fg_dir else None,
                                  bg_dir=Path(args.bg_dir) if args.bg_dir else None, workers=args.workers)
    return {"success": True, "manifest": str(manifest), "samples": args.num, "seed": config.synth.seed}


def cmd_train(args) -> Dict[str, Any]:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"train.workers={args.workers}")
    config = load_config(args.config, overrides, preset=args.preset, net=args.net)
    out = _output_dir(args.out, args.net)
    if args.resume and not Path(args.resume).is_file():
        raise InvalidInputError(f"checkpoint not found: {args.resume}")
    if args.data:
        samples = [sample for sample, _ in load_dataset(Path(args.data))]
    else:
        samples = training_clips(config.train, config.synth)
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, out / "config.cfg")
    train = train_trimap if args.net == "trimap" else train_matting
    result = train(config, samples, out_dir=out, resume=Path(args.resume) if args.resume else None,
                   device=args.device)
    final = {k: float(v) for k, v in result.history.iloc[-1].items()} if len(result.history) else {}
    return {"success": True, "net": args.net, "checkpoint": str(result.path), "epoch": result.checkpoint.epoch,
            "step": result.checkpoint.step, "final": final}


def cmd_propagate(args) -> Dict[str, Any]:
    clip = read_frames(Path(args.clip_dir))
    available = read_trimaps(Path(args.trimap_dir))
    wanted = _int_list(args.labeled)
    if wanted is None:
        wanted = sorted(labeled_frames(args.setting, len(clip), args.every))
    missing = [t for t in wanted if t not in available]
    if missing:
        raise InvalidInputError(f"no trimap file for labeled frames {missing}")
    net, _ = load_model(Path(args.checkpoint), "trimap")
    trimaps = propagate_clip(net, clip, {t: available[t] for t in wanted}, args.device)
    out = _output_dir(args.out, "trimaps")
    write_trimaps(out, trimaps)
    return {"success": True, "frames": len(trimaps), "labeled": wanted,
            "propagated": len(trimaps) - len(set(wanted)), "output": str(out)}


def cmd_matte(args) -> Dict[str, Any]:
    clip = read_frames(Path(args.clip_dir))
    trimaps = _full_trimaps(Path(args.trimap_dir), len(clip))
    net, _ = load_model(Path(args.checkpoint), "matting")
    alpha = predict_clip(net, clip, trimaps, args.n, args.device)
    out = _output_dir(args.out, "alpha")
    paths = write_alpha_frames(out, alpha.frames, bits=16)
    return {"success": True, "frames": len(paths), "output": str(out)}


def _evaluate_one(job):
    pred, gt, mask, motion, config = job
    return evaluate_sequence(pred, gt, mask, motion, config)


def _evaluation_jobs(args, config) -> List[tuple]:
    """(name, pred, gt, mask) and motion per clip"""
    pred_root = Path(args.pred_dir)
    jobs = []
    if args.data:
        if args.motion == "files":
            raise InvalidInputError("--motion files applies to single-clip evaluation")
        root = Path(args.data)
        for entry in read_manifest(root)["samples"]:
            sample, trimaps = load_sample(root, entry)
            motion = sample.motion if args.motion == "manifest" else None
            jobs.append((entry["name"], read_alpha_frames(pred_root / entry["name"]), sample.alpha, trimaps, motion))
    else:
        if not args.gt_dir or not args.trimap_dir:
            raise InvalidInputError("evaluate needs --data or both --gt-dir and --trimap-dir")
        if args.motion == "manifest":
            raise InvalidInputError("--motion manifest needs --data")
        gt = read_alpha_frames(Path(args.gt_dir))
        motion = None
        if args.motion == "files":
            if not args.motion_file:
                raise InvalidInputError("--motion files needs --motion-file")
            motion = read_motion(Path(args.motion_file))
        jobs.append((pred_root.name, read_alpha_frames(pred_root), gt,
                     _full_trimaps(Path(args.trimap_dir), len(gt)), motion))
    out = []
    for name, pred, gt, trimaps, motion in jobs:
        if pred.frames.shape != gt.frames.shape:
            raise InvalidInputError(f"{name}: prediction {pred.frames.shape} differs from groundtruth "
                                    f"{gt.frames.shape}")
        mask = evaluation_mask(trimaps, gt.frames.shape, config.metrics.mask)
        out.append((name, pred, gt, mask, motion))
    return out


def cmd_evaluate(args) -> Dict[str, Any]:
    if args.motion is None:
        args.motion = "manifest" if args.data else "none"
    config = load_config(args.config, args.override, preset=args.preset)
    clips = _evaluation_jobs(args, config)
    jobs = [(pred, gt, mask, motion, config.metrics) for _, pred, gt, mask, motion in clips]
    if args.workers and args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            reports = list(pool.map(_evaluate_one, jobs))
    else:
        reports = [_evaluate_one(job) for job in jobs]
    out = _output_dir(args.out, "evaluation")
    names = [c[0] for c in clips]
    report = report_to_json(reports, aggregate(reports), names, out / "report.json")
    per_frame_sad_csv([c[1] for c in clips], [c[2] for c in clips], [c[3] for c in clips], names,
                      out / "per_frame_sad.csv", config.metrics.sad_scale)
    if args.plot:
        plot_per_frame_sad(out / "per_frame_sad.csv", out / "per_frame_sad.png")
    return {"success": True, "output": str(out), **report}


def cmd_ablate(args) -> Dict[str, Any]:
    config = load_config(args.config, args.override, preset=args.preset, net="matting")
    variants = args.variants.split(",") if args.variants else None
    seeds = _int_list(args.seeds) or [0]
    out = _output_dir(args.out, "ablation")
    table = run_ablation(args.study, config, variants, seeds, args.eval_count, out, args.device)
    rows = json.loads(table.reset_index().to_json(orient="records"))
    return {"success": True, "study": args.study, "rows": rows, "output": str(out / f"{args.study}.csv")}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=env_default("LOG_LEVEL", "INFO"), help="Logging level")
    common.add_argument("--config", help="Config file in the flat `key = value` grammar")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="Config override, repeatable")
    common.add_argument("--preset", choices=("toy", "paper"), default=None, help="Preset when the config names none")
    common.add_argument("--out", help="Output directory (default under VMATTE_OUTPUT_PATH)")
    common.add_argument("--device", default=env_default("DEVICE", "cpu"), help="Torch device")

    parser = argparse.ArgumentParser(prog="vmatte", description="Video matting with temporal feature aggregation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="Write a synthetic composite dataset")
    p.add_argument("--num", type=int, default=5, help="Number of samples")
    p.add_argument("--frames", type=int, help="Frames per sample")
    p.add_argument("--size", type=int, help="Square frame side in pixels")
    p.add_argument("--seed", type=int, help="Global seed")
    p.add_argument("--fg-mode", choices=("procedural", "files"), default="procedural")
    p.add_argument("--fg-dir", help="RGBA foreground PNGs for --fg-mode files")
    p.add_argument("--bg-dir", help="Background frame sequence(s)")
    p.add_argument("--workers", type=int, default=int(env_default("WORKERS", "0")))
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", parents=[common], help="Train the trimap or matting network")
    p.add_argument("--net", choices=("trimap", "matting"), required=True)
    p.add_argument("--data", help="Dataset directory; procedural clips when omitted")
    p.add_argument("--resume", help="Checkpoint to continue from")
    p.add_argument("--seed", type=int, help="Training seed")
    p.add_argument("--workers", type=int, help="Data loader workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("propagate", parents=[common], help="Propagate user trimaps to every frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip-dir", required=True)
    p.add_argument("--trimap-dir", required=True, help="Trimap PNGs named frame_%%05d.png")
    p.add_argument("--labeled", help="Comma-separated labeled frames; overrides --setting")
    p.add_argument("--setting", default="full", help="full, 1-trimap, N-frame (with --every) or e.g. 20-frame")
    p.add_argument("--every", type=int, help="Spacing of labeled frames for N-frame")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("matte", parents=[common], help="Predict 16-bit alpha for a clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip-dir", required=True)
    p.add_argument("--trimap-dir", required=True)
    p.add_argument("--n", type=int, help="Window half-width, defaults to the checkpoint's")
    p.set_defaults(func=cmd_matte)

    p = sub.add_parser("evaluate", parents=[common], help="Score predicted alpha against groundtruth")
    p.add_argument("--pred-dir", required=True, help="Predicted alpha, one sub-directory per sample with --data")
    p.add_argument("--data", help="Dataset directory with a manifest")
    p.add_argument("--gt-dir", help="Groundtruth alpha of a single clip")
    p.add_argument("--trimap-dir", help="Groundtruth trimaps of a single clip")
    p.add_argument("--motion", choices=("manifest", "none", "files"), default=None,
                   help="MESSDdt motion source, manifest with --data and none otherwise")
    p.add_argument("--motion-file", help="motion.bin for --motion files")
    p.add_argument("--workers", type=int, default=int(env_default("WORKERS", "0")))
    p.add_argument("--plot", action="store_true", help="Also plot per-frame SAD")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="Run an ablation study on the toy set")
    p.add_argument("--study", choices=STUDY_NAMES, required=True)
    p.add_argument("--variants", help="Comma-separated subset of the study's variants")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--eval-count", type=int, default=3)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the vmatte command"""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    configure_logging(args.log_level)

    try:
        result = args.func(args)
        print(json.dumps(result, indent=2, default=str))
        return EXIT_OK
    except USAGE_ERRORS as e:
        logger.error("%s failed: %s", args.command, e)
        print(json.dumps({"success": False, "error": str(e), "command": args.command}, indent=2))
        return EXIT_USAGE
    except Exception as e:
        logger.exception("%s failed", args.command)
        print(json.dumps({"success": False, "error": str(e), "command": args.command}, indent=2))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
