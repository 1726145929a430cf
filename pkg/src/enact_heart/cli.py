"""``enact-heart`` command line: one subcommand per pipeline stage.

Runtime errors print a single ``error_code: message`` line to stderr and exit
with status 1. Usage errors exit with 2 (argparse's convention).
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import pipeline, synth
from .config import load_config
from .errors import EnactError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set train.epochs=5 (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (shorthand for --set seed=N)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enact-heart",
        description="Heart-sound classification with a CNN + ViT mixture of experts.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-corpus", help="write a synthetic labelled corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("prepare", help="segment, augment and split into a manifest")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="ignore the stage cache")
    _common(p)

    p = sub.add_parser("render", help="render spectrogram and centroid images")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, help="image directory (default: <manifest dir>/images)")
    p.add_argument("--pgm", action="store_true", help="also export PGM files")
    p.add_argument("--force", action="store_true")
    _common(p)

    p = sub.add_parser("train", help="train one expert")
    p.add_argument("--model", choices=("cnn", "vit"), required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--images", type=Path)
    _common(p)

    p = sub.add_parser("sweep", help="pick the ensemble weight on validation data")
    p.add_argument("--vit", type=Path, required=True)
    p.add_argument("--cnn", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, help="output directory (default: manifest dir)")
    p.add_argument("--images", type=Path)
    _common(p)

    p = sub.add_parser("evaluate", help="metric report on the validation split")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--images", type=Path)
    _common(p)

    p = sub.add_parser("predict", help="classify one WAV file")
    p.add_argument("--wav", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--vit", type=Path, required=True)
    p.add_argument("--cnn", type=Path, required=True)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    _common(p)
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _fmt(probs) -> str:
    return "[" + ", ".join(f"{p:.4f}" for p in probs) + "]"


def run(args) -> int:
    cmd = args.command
    if cmd == "synth-corpus":
        synth.write_corpus(args.out, args.per_class, args.seed, args.duration)
        print(f"wrote {5 * args.per_class} recordings to {args.out}")
        return 0

    cfg = _config(args)
    if cmd == "prepare":
        m = pipeline.prepare(args.data, args.out, cfg, force=args.force)
        print(f"{len(m)} clips ({len(m.train)} train, {len(m.validation)} validation) "
              f"-> {args.out / pipeline.MANIFEST_NAME}")
    elif cmd == "render":
        if args.pgm:
            import dataclasses

            cfg = dataclasses.replace(cfg, render=dataclasses.replace(cfg.render, export_pgm=True))
        specs, _ = pipeline.render_manifest(args.manifest, args.out, cfg, force=args.force)
        print(f"rendered {len(specs)} clips x 2 modalities")
    elif cmd == "train":
        res = pipeline.train_expert(args.model, args.manifest, args.out, cfg, args.images)
        print(f"{args.model}: best epoch {res.best_epoch}, val accuracy {res.best_val_accuracy:.4f} -> {args.out}")
    elif cmd == "sweep":
        out = pipeline.run_sweep(args.vit, args.cnn, args.manifest, args.out, cfg, args.images)
        s = out.summary
        print(f"k={s['k']} w_vit={s['w_vit']:.2f} ensemble={s['val_accuracy']['ensemble']:.4f} "
              f"vit={s['val_accuracy']['vit']:.4f} cnn={s['val_accuracy']['cnn']:.4f}")
    elif cmd == "evaluate":
        rep = pipeline.evaluate(args.weights, args.manifest, args.out, cfg, args.images)
        print(rep.to_table(), end="")
    elif cmd == "predict":
        verdict = pipeline.predict_file(args.wav, args.weights, args.vit, args.cnn, cfg)
        if args.json:
            print(json.dumps({
                "clips": [
                    {"segment_index": c.segment_index, "label": c.label.slug, "probs": c.probs.tolist()}
                    for c in verdict.clips
                ],
                "recording": verdict.label.slug,
            }))
        else:
            for c in verdict.clips:
                print(f"clip {c.segment_index}: {c.label.slug} {_fmt(c.probs)}")
            mean = np.mean([c.probs for c in verdict.clips], axis=0)
            print(f"recording: {verdict.label.slug} {_fmt(mean)}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except EnactError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"file_not_found: {exc.filename or exc}", file=sys.stderr)
    except (ValueError, OSError) as exc:
        print(f"{re.sub(r'(?<!^)(?=[A-Z])', '_', type(exc).__name__).lower()}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
