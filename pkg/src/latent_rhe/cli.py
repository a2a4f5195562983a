"""Command-line entry point: ``run``, ``summarize`` and ``dump-recon``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from latent_rhe.errors import LayoutError, UsageError
from latent_rhe.gridworld import VARIANTS
from latent_rhe.orchestrator import build_run_config, dump_reconstructions, parse_config_text, run, summarize
from latent_rhe.replay import load_episode
from latent_rhe.rssm import RSSM


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-rhe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-episode progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and act; writes per-seed metrics CSVs")
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--variant", choices=[v.name for v in VARIANTS])
    p.add_argument("--seed", type=int, action="append", help="master seed (repeatable); overrides 'seeds'")
    p.add_argument("--episodes", type=int)
    p.add_argument("--profile", choices=["full", "desk"])
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("summarize", help="per-episode mean/std across seeds")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="directory of metrics_seed*.csv files")
    p.add_argument("--out", type=Path, required=True, help="summary CSV to write")

    p = sub.add_parser("dump-recon", help="write actual/reconstructed frame pairs as PPM images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episode", type=Path, required=True, help="episode dump (.npy/.csv stem)")
    p.add_argument("--out", type=Path, required=True)
    return parser


def _run(args: argparse.Namespace) -> int:
    values = parse_config_text(args.config.read_text(encoding="utf-8")) if args.config else {}
    overrides = {
        "variant": None if args.variant is None else next(v for v in VARIANTS if v.name == args.variant),
        "seeds": None if args.seed is None else tuple(args.seed),
        "episodes": args.episodes,
        "profile": args.profile,
        "out": args.out,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    for path in run(build_run_config(values)):
        print(path)
    return 0


def _summarize(args: argparse.Namespace) -> int:
    files = sorted(args.inp.glob("metrics_seed*.csv"))
    if not files:
        raise UsageError(f"no metrics_seed*.csv files in {args.inp}")
    print(summarize(files, args.out))
    return 0


def _dump_recon(args: argparse.Namespace) -> int:
    model = RSSM.load(args.checkpoint)
    paths = dump_reconstructions(model, load_episode(args.episode), args.out)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    handlers = {"run": _run, "summarize": _summarize, "dump-recon": _dump_recon}
    try:
        return handlers[args.command](args)
    except (UsageError, LayoutError, OSError) as exc:
        print(f"latent-rhe: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
