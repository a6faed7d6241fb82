"""Command-line entry point: ``python3 -m paretorl <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 bad config or input, 3 missing or mismatched
checkpoint, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config, reference_text
from .numerics import NonFiniteGradientError
from .pareto import non_dominated_set
from .policy import SequenceError
from .rewards import CHANNELS, RewardError
from .trainer import TrainingAborted, read_metrics

log = logging.getLogger("paretorl")

EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_NUMERIC = 2, 3, 4


class InputError(ValueError):
    pass


def read_reward_matrix(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise InputError(f"reward file not found: {p}")
    rows = []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(x) for x in line.split()])
        except ValueError:
            raise InputError(f"{p}:{n}: expected whitespace-separated numbers, got {line!r}") from None
    if not rows:
        raise InputError(f"{p}: no reward rows")
    if len({len(r) for r in rows}) != 1:
        raise InputError(f"{p}: rows have differing channel counts")
    return np.asarray(rows)


def _fmt_row(values) -> str:
    return " ".join(f"{v:.4f}" for v in values)


# -- commands ---------------------------------------------------------------


def cmd_gen_data(cfg, args):
    print(pipeline.stage_gen_data(cfg))


def cmd_train_encoders(cfg, args):
    print(pipeline.stage_train_encoders(cfg))


def cmd_train_scorer(cfg, args):
    print(pipeline.stage_train_scorer(cfg))


def cmd_pretrain(cfg, args):
    print(pipeline.stage_pretrain(cfg))


def cmd_fit_normalizer(cfg, args):
    state = pipeline.stage_fit_normalizer(cfg)
    for name, lo, hi in zip(CHANNELS, state.min_val, state.max_val):
        print(f"{name}: min={lo:.6g} max={hi:.6g}")


def cmd_train_rl(cfg, args):
    path = pipeline.stage_train_rl(cfg, resume=args.resume)
    _, rows = read_metrics(path)
    if rows:
        last = rows[-1]
        print(f"iteration {int(last['iteration'])}: " +
              " ".join(f"{c}={last['norm_' + c]:.3f}" for c in CHANNELS[:cfg.k]) + f" kl={last['kl']:.3f}")
    print(path)


def cmd_evaluate(cfg, args):
    res = pipeline.stage_evaluate(cfg, args.checkpoint)
    print(f"match_rate={res['match_rate']:.4f} token_accuracy={res['token_accuracy']:.4f} "
          f"hidden_preference={res['preference']:.4f} mean_length={res['mean_length']:.2f}")
    print("normalized " + " ".join(f"{c}={v:.4f}" for c, v in zip(CHANNELS, res["normalized"])))


def cmd_ablate_tokens(cfg, args):
    res = pipeline.stage_ablate_tokens(cfg, args.checkpoint)
    print("token      " + " ".join(f"{c:>11s}" for c in CHANNELS[:cfg.k]) + "   total")
    for key, r in res.items():
        label = "none" if key is None else CHANNELS[key]
        print(f"{label:10s} " + " ".join(f"{v:11.4f}" for v in r["normalized"]) + f" {r['normalized'].sum():7.4f}")


def cmd_pareto_demo(cfg, args):
    r = read_reward_matrix(args.rewards)
    ps = non_dominated_set(r)
    print("{" + ", ".join(str(i) for i in ps.indices) + "}")
    if args.verbose:
        for i in ps.indices:
            print(f"  {i}: {_fmt_row(r[i])}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic task datasets"),
    "train-encoders": (cmd_train_encoders, "train both paired encoder families"),
    "train-scorer": (cmd_train_scorer, "train the preference scorer"),
    "pretrain": (cmd_pretrain, "supervised pretraining of the actor"),
    "fit-normalizer": (cmd_fit_normalizer, "fit per-channel reward bounds from warmup rollouts"),
    "train-rl": (cmd_train_rl, "PPO fine-tuning with Pareto selection or weighted sum"),
    "evaluate": (cmd_evaluate, "oracle evaluation of a trained actor"),
    "pareto-demo": (cmd_pareto_demo, "print the non-dominated rows of a reward matrix file"),
    "ablate-tokens": (cmd_ablate_tokens, "per-channel means under each reward token and under none"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paretorl", description=__doc__.splitlines()[0])
    parser.add_argument("--config-reference", action="store_true", help="print every config key with its default")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        if name == "train-rl":
            p.add_argument("--resume", action="store_true", help="continue from rl_state.ckpt if present")
        if name in ("evaluate", "ablate-tokens"):
            p.add_argument("--checkpoint", default="actor.ckpt", help="actor file inside out_dir")
        if name == "pareto-demo":
            p.add_argument("rewards", help="file of whitespace-separated reward rows")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.config_reference:
        sys.stdout.write(reference_text())
        return 0
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    fn, _ = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, args.overrides)
        fn(cfg, args)
    except (ConfigError, RewardError, InputError) as exc:
        print(f"error: bad config or input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, SequenceError, FileNotFoundError) as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingAborted, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
