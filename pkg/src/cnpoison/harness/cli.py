"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or missing inputs,
2 failure while running.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .training import IncompleteCheckpoint

COMMANDS = {
    "gen-data": "render the clean shapes corpus",
    "poison": "build the poisoned corpus from the clean one",
    "train-backbone": "pretrain the denoiser on clean data",
    "train-detector": "fit the frozen target detector",
    "train-control": "fine-tune the control branch (poisoned or clean corpus)",
    "sample": "generate a sample grid from the trained pair",
    "eval": "clean/triggered evaluation report",
    "sweep": "single-axis ablation sweep to CSV",
    "verify": "gradient and invariant checks",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cnpoison", description="Edge-conditioned diffusion backdoor experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMANDS.items():
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", help="key = value config file")
        c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        c.add_argument("-v", "--verbose", action="store_true")
        if name == "train-backbone":
            c.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
        if name == "verify":
            c.add_argument("--seeds", type=int, default=10, help="random seeds per op")
    return p


def run(args: argparse.Namespace) -> str:
    cfg = load_config(args.config, args.set)
    if args.command == "verify":
        from .. import verify

        report = verify.run_all(seeds=args.seeds)
        if report.failures:
            raise RuntimeError(f"{len(report.failures)} of {report.count} checks failed:\n" + "\n".join(report.failures))
        return f"verify: {report.count} checks passed"
    cfg.validate()
    lay = pipeline.layout(cfg)
    lay.root.mkdir(parents=True, exist_ok=True)
    (lay.root / "config.txt").write_text(cfg.to_text())
    if args.command == "gen-data":
        out = pipeline.gen_data(cfg)
        stats = pipeline.corpus_stats(pipeline.load_clean(cfg))
        return f"corpus written to {out} {stats}"
    if args.command == "poison":
        out = pipeline.poison(cfg)
        return f"poisoned corpus written to {out} {pipeline.corpus_stats(pipeline.load_training_corpus(cfg))}"
    if args.command == "train-backbone":
        res = pipeline.train_backbone(cfg, resume=args.resume)
        return f"backbone saved to {res.checkpoint}; final loss {res.losses[-1] if res.losses else 'n/a'}"
    if args.command == "train-detector":
        return f"detector saved to {pipeline.train_detector(cfg)}"
    if args.command == "train-control":
        res = pipeline.train_control(cfg)
        last = res.log[-1]
        return (f"control saved to {res.checkpoint} after {res.epochs} epochs "
                f"(early stop: {res.early_stopped}, val ASR {last['val_asr']})")
    if args.command == "sample":
        return f"samples written to {pipeline.sample(cfg)}"
    if args.command == "eval":
        report = pipeline.evaluate(cfg)
        return f"ASR {report.asr} (config digest {cfg.digest()}); report in {lay.eval_dir}"
    if args.command == "sweep":
        return f"sweep CSV written to {pipeline.sweep(cfg)}"
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        print(run(args))
    except (ConfigError, CheckpointError, IncompleteCheckpoint, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure maps to exit 2
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
