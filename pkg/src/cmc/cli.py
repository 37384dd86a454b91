"""Command-line entry point: ``cmc run | ablate | sweep-horizon | report``.

Named flags cover the common keys; any other config key can be set with a
generic ``--key=value``. Errors print one JSON object to stderr and exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config, parse_flags
from . import harness

NAMED_KEYS = ("env", "reward", "algo", "cmc", "horizon", "episodes", "preset")


class CliError(Exception):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser():
    p = _Parser(prog="cmc", description="Curiosity-gated model-based/model-free control experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, multi_seed):
        sp.add_argument("--config", help="flat JSON config file")
        if multi_seed:
            sp.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default 0,1,2,3,4)")
        sp.add_argument("--seed", type=int, help="single seed")
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--workers", type=int, default=1, help="parallel seed processes")
        sp.add_argument("--progress-every", type=int, default=100, help="log every N episodes (0 = quiet)")
        for key in NAMED_KEYS:
            sp.add_argument(f"--{key}")

    common(sub.add_parser("run", help="one configuration over one or more seeds"), True)
    ab = sub.add_parser("ablate", help="{ddpg, cacla} x {cmc off, on}")
    common(ab, True)
    ab.add_argument("--final-window", type=int, default=300)
    sw = sub.add_parser("sweep-horizon", help="planning-horizon sweep")
    common(sw, True)
    sw.add_argument("--horizons", type=_int_list, default=[1, 3])
    sw.add_argument("--final-window", type=int, default=300)
    rp = sub.add_parser("report", help="normalized model-error curve for a run directory")
    rp.add_argument("run_dir")
    rp.add_argument("--out")
    return p


def _seeds(args):
    seeds = getattr(args, "seeds", None)
    if seeds is not None and args.seed is not None:
        raise CliError("--seed and --seeds are mutually exclusive", key="seed")
    if args.seed is not None:
        return [args.seed]
    return seeds or [0, 1, 2, 3, 4]


def _config(args, extra):
    overrides = parse_flags(extra)
    for key in NAMED_KEYS:
        value = getattr(args, key)
        if value is not None:
            if key in overrides:
                raise ConfigError(key, "given twice")
            overrides[key] = value
    return load_config(args.config, overrides)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        args, extra = build_parser().parse_known_args(argv)
        if args.command == "report":
            if extra:
                raise CliError(f"unexpected arguments: {extra}")
            curve = harness.model_error_report(args.run_dir, args.out)
            print(json.dumps({"episodes": len(curve), "early_late_drop": harness.early_late_drop(curve)}))
            return 0
        cfg = _config(args, extra)
        seeds = _seeds(args)
        common = dict(workers=args.workers, progress_every=args.progress_every)
        if args.command == "run":
            summaries, failures = harness.run_experiment(cfg, seeds, args.out_dir, **common)
            print(json.dumps({"runs": [harness.summary_dict(s) for s in summaries], "failures": failures}))
            return 1 if failures else 0
        if args.command == "ablate":
            table = harness.ablation_matrix(cfg, seeds, args.out_dir, args.final_window, **common)
        else:
            table = harness.horizon_sweep(cfg, args.horizons, seeds, args.out_dir, args.final_window, **common)
        print(json.dumps({"table": table, "ordering": harness.ordering(table)}))
        return 0
    except (ConfigError, CliError) as exc:
        _fail(type(exc).__name__, str(exc), getattr(exc, "key", None))
    except (OSError, ValueError) as exc:
        _fail(type(exc).__name__, str(exc), None)
    return 2


def _fail(kind, message, key):
    print(json.dumps({"error": kind, "message": message, "key": key}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
