"""Command line entry point: ``cognigraph <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, config_hash, validate_config


def _common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", type=Path, default=None, help="YAML experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cognigraph", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic dyadic corpus with trait labels")
    _common(p)
    p.add_argument("--subjects", type=int, default=None)
    p.add_argument("--delay", type=int, default=None)

    p = sub.add_parser("preprocess", help="normalise and window every subject under --data")
    _common(p)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("search", help="per-subject architecture search")
    _common(p)
    p.add_argument("--windows", type=Path, required=True, help="directory of *.windows.npz")
    p.add_argument("--subject", action="append", default=None, help="restrict to these subject ids")

    p = sub.add_parser("encode-graph", help="checkpoints -> cognition graphs")
    _common(p)
    p.add_argument("--checkpoints", type=Path, required=True)
    p.add_argument("--windows", type=Path, default=None, help="needed for block distillation")

    p = sub.add_parser("train-personality", help="fit the graph regressor")
    _common(p)
    p.add_argument("--graphs", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)

    p = sub.add_parser("evaluate", help="predict traits; cross-validate when labels are given")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--graphs", type=Path, required=True)
    p.add_argument("--labels", type=Path, default=None)

    p = sub.add_parser("pipeline", help="run every stage with caching")
    _common(p, out_required=False)
    return ap


def _load(args) -> dict:
    cfg = validate_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    from . import pipeline as pl

    try:
        if args.command == "synth-data":
            if args.subjects is not None:
                cfg["dataset"]["n_subjects"] = args.subjects
            if args.delay is not None:
                cfg["dataset"]["delay"] = args.delay
            files = pl.synth_dataset(cfg, args.out)
            print(f"wrote {len(files)} files for {cfg['dataset']['n_subjects']} subjects to {args.out}")
        elif args.command == "preprocess":
            subjects = sorted(p for p in args.data.iterdir() if (p / "speaker.landmarks.npy").exists())
            if not subjects:
                raise FileNotFoundError(f"no subject directories under {args.data}")
            for sub in subjects:
                pl.preprocess_subject(sub, args.out / f"{sub.name}.windows.npz", cfg)
            print(f"preprocessed {len(subjects)} subjects")
        elif args.command == "search":
            files = sorted(args.windows.glob("*.windows.npz"))
            if args.subject:
                files = [f for f in files if f.name.split(".")[0] in set(args.subject)]
            if not files:
                raise FileNotFoundError(f"no window files under {args.windows}")
            for f in files:
                path = pl.search_from_file(f, args.out, f.name.split(".")[0], cfg, config_hash(cfg))
                print(path)
        elif args.command == "encode-graph":
            files = sorted(args.checkpoints.glob("*.ckpt.npz"))
            if not files:
                raise FileNotFoundError(f"no checkpoints under {args.checkpoints}")
            for f in files:
                sid = f.name.split(".")[0]
                win = args.windows / f"{sid}.windows.npz" if args.windows else None
                print(pl.encode_subject(f, args.out / f"{sid}.graph.json", cfg, win))
        elif args.command == "train-personality":
            print(pl.train_stage(args.graphs, args.labels, args.out / "model.pt", cfg))
        elif args.command == "evaluate":
            report = pl.evaluate_stage(args.model, args.graphs, args.labels, args.out / "evaluation.json", cfg if args.labels else None)
            print(json.dumps(json.loads(report.read_text()).get("cross_validation", {}), indent=1))
        elif args.command == "pipeline":
            manifest = pl.run_pipeline(cfg, args.out)
            ran = sum(not s["skipped"] for s in manifest["stages"])
            print(f"{len(manifest['stages'])} stages, {ran} executed, {len(manifest['stages']) - ran} cached")
    except Exception as exc:  # any stage failure maps to a nonzero exit
        logging.getLogger("cognigraph").debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
