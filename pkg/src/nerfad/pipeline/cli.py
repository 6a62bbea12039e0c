"""Command line: gen-data, train --stage, render, eval."""

from __future__ import annotations

import argparse
import logging
import sys

from ..synthdata import DataConfig, SynthDataError, generate_dataset
from .checkpoint import CheckpointError
from .config import STAGES, ConfigError, RunConfig, load_config
from .evaluate import EvaluationError, evaluate
from .render import RenderRangeError, render_sequence
from .train import TrainingError, train_stage


def _frames(spec: str | None):
    """``"a:b"`` -> range(a, b); ``"3,5,9"`` -> list; None -> all frames."""
    if spec is None:
        return None
    if ":" in spec:
        a, b = spec.split(":", 1)
        return range(int(a or 0), int(b))
    return [int(s) for s in spec.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (dataset directory for gen-data)")
    common.add_argument("--data", help="dataset directory (overrides data.path)")
    common.add_argument("--no-au-loss", action="store_true", help="drop the AU loss from the fusion stage")
    common.add_argument("--no-disentangle", action="store_true",
                        help="condition the field on the full crop and the raw audio feature")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nerfad", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--resume", help="checkpoint to resume from")
    r = sub.add_parser("render", parents=[common], help="render frames with the trained stages")
    r.add_argument("--frames", help="a:b range or comma list (default: all)")
    e = sub.add_parser("eval", parents=[common], help="score rendered frames")
    e.add_argument("--frames", help="frames expected in the render directory")
    e.add_argument("--rendered", help="directory of frame_XXXXX.png files (default: <out>/render)")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.data:
        cfg.data.path = args.data
    if args.out and args.command != "gen-data":
        cfg.out_dir = args.out
    if args.no_au_loss:
        cfg.use_au_loss = False
    if args.no_disentangle:
        cfg.disentangle = False
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            d = cfg.data
            dcfg = DataConfig(n_frames=d.n_frames, resolution=d.resolution, n_identities=d.n_identities,
                              n_au=d.n_au, n_landmarks=d.n_landmarks, audio_dim=d.audio_dim,
                              audio_noise=d.audio_noise, crop_size=d.crop_size, au_step=d.au_step)
            target = args.out or d.path
            generate_dataset(dcfg, cfg.seed, target)
            print(f"wrote {d.n_frames} frames to {target}")
        elif args.command == "train":
            ckpt = train_stage(cfg, args.stage, resume=args.resume)
            print(f"{args.stage}: trained to iteration {ckpt.iteration}")
        elif args.command == "render":
            paths = render_sequence(cfg, _frames(args.frames))
            print(f"rendered {len(paths)} frames")
        elif args.command == "eval":
            rep = evaluate(cfg, args.rendered, _frames(args.frames))
            print(f"frames={rep.n_frames} psnr={rep.psnr:.3f} ssim={rep.ssim:.4f} "
                  f"lmd={rep.lmd:.4f} au_acc={rep.au_acc:.4f}")
    except (ConfigError, SynthDataError, CheckpointError, TrainingError, RenderRangeError,
            EvaluationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
