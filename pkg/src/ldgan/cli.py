"""Command line front end: one subcommand per pipeline stage.

Every subcommand accepts the same flags; ``--config`` points at a JSON run
configuration and the remaining flags override single keys.  Exit codes:
0 success, 2 configuration error, 3 missing upstream artifact, 4 numerical
failure during training or analysis.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as cfgmod
from . import pipeline
from .errors import (
    ConfigError,
    DependencyError,
    FormatError,
    LdganError,
    ShapeError,
)
from .recovery import TASK_SOURCES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERICAL = 4

_COMMANDS = {
    "synth": lambda cfg, args: pipeline.run_synth(cfg, force=args.force),
    "train-ae": lambda cfg, args: pipeline.run_train_ae(cfg, force=args.force),
    "encode": lambda cfg, args: pipeline.run_encode(cfg, force=args.force),
    "train-gan": lambda cfg, args: pipeline.run_train_gan(cfg, force=args.force),
    "sample": lambda cfg, args: pipeline.run_sample(cfg, force=args.force),
    "train-task": lambda cfg, args: pipeline.run_train_task(cfg, force=args.force),
    "evaluate": lambda cfg, args: pipeline.run_evaluate(cfg, force=args.force),
    "analyze": lambda cfg, args: pipeline.run_analyze(cfg, force=args.force),
    "experiment": lambda cfg, args: pipeline.run_experiment(cfg, args.suite,
                                                            force=args.force),
}

_HELP = {
    "synth": "synthesize the train/test cube splits",
    "train-ae": "train the spectral autoencoder",
    "encode": "encode the train split into latent cubes",
    "train-gan": "train the generator (latent or full target)",
    "sample": "draw a pool of generated cubes",
    "train-task": "train a recovery network, optionally augmented",
    "evaluate": "per-cube test metrics for the trained recovery network",
    "analyze": "endmember and pca summaries of generated pools",
    "experiment": "run a multi-configuration suite, emit a long-format CSV",
}

# threadpoolctl returns a limiter that restores the old limits when it is
# garbage collected, so the active one has to stay referenced.
_thread_limiter = None


def _limit_threads(deterministic: bool) -> None:
    """Apply LDGAN_THREADS; deterministic mode pins BLAS to one thread."""
    global _thread_limiter
    raw = os.environ.get("LDGAN_THREADS")
    limit = None
    if raw is not None:
        try:
            limit = int(raw)
        except ValueError:
            raise ConfigError(f"LDGAN_THREADS must be an integer, got '{raw}'")
        if limit < 1:
            raise ConfigError(f"LDGAN_THREADS must be >= 1, got {limit}")
    if deterministic:
        limit = 1
    if limit is not None:
        from threadpoolctl import threadpool_limits

        _thread_limiter = threadpool_limits(limits=limit)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldgan",
        description="Spectral-image augmentation pipeline: synthesize cubes, "
                    "learn a low-dimensional generator, train recovery tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in _COMMANDS:
        s = sub.add_parser(name, help=_HELP[name])
        if name == "experiment":
            s.add_argument("suite", choices=pipeline.SUITES,
                           help="which sweep to run")
        s.add_argument("--config", metavar="PATH",
                       help="JSON run configuration (defaults apply without it)")
        s.add_argument("--seed", type=int, metavar="N",
                       help="override every stage seed")
        s.add_argument("--force", action="store_true",
                       help="rerun even when the manifest says outputs are current")
        s.add_argument("--deterministic", action="store_true",
                       help="single-threaded BLAS for bit-reproducible runs")
        s.add_argument("--out", metavar="DIR", help="run directory")
        s.add_argument("--channels", type=int, metavar="C",
                       help="latent channels of the autoencoder")
        s.add_argument("--mu-ae", type=float, metavar="MU", dest="mu_ae",
                       help="autoencoder variance regularizer weight")
        s.add_argument("--mu-gan", type=float, metavar="MU", dest="mu_gan",
                       help="generator variance regularizer weight")
        s.add_argument("--fraction", type=float, metavar="F",
                       help="augmentation pool fraction of the train split")
        s.add_argument("--target", choices=("latent", "full"),
                       help="what the generator emits")
        s.add_argument("--task", choices=cfgmod.TASK_KINDS,
                       help="which degradation the recovery stage inverts")
        s.add_argument("--source", choices=TASK_SOURCES,
                       help="augmentation source for train-task")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config)
        cfg = cfgmod.apply_overrides(
            cfg, seed=args.seed, out=args.out, deterministic=args.deterministic,
            channels=args.channels, mu_ae=args.mu_ae, mu_gan=args.mu_gan,
            fraction=args.fraction, target=args.target, task=args.task,
            source=args.source,
        )
        _limit_threads(cfg.deterministic)
        result = _COMMANDS[args.command](cfg, args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (LdganError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    state = "done" if result.ran else "up to date"
    print(f"{result.name}: {state} ({result.seconds:.1f}s)")
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
