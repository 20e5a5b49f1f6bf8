"""Command line entry point: ``parl <verb> [options]``.

Exit codes: 0 success, 2 configuration or contract error, 3 numeric fault,
4 I/O or file-format error.
"""

import argparse
import logging
import sys

from . import harness
from .exceptions import ConfigError, ContractViolation, NumericalFault, ParseError

log = logging.getLogger("parl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _seed_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="parl", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML experiment config")
    common.add_argument("--seed-list", type=_seed_list, default=None, help="comma separated seeds")
    common.add_argument("--out", default=None, help="output root (default: config 'out')")
    common.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("train", parents=[common], help="train target and surrogate ensembles")
    p = sub.add_parser("attack-eval", parents=[common], help="accuracy under the attack sweep")
    p.add_argument("--target", default=None, help="target checkpoint directory (single seed)")
    p.add_argument("--surrogate", default=None, help="surrogate checkpoint directory (single seed)")
    p.add_argument("--white-box", action="store_true", help="craft on the target itself")
    p = sub.add_parser("cka", parents=[common], help="layer-wise CKA between members")
    p.add_argument("--against", default=None, help="second run directory to compare members with")
    p = sub.add_parser("gradviz", parents=[common], help="gradient saliency images")
    p.add_argument("--index", type=int, default=0, help="evaluation example index")

    p = sub.add_parser("report", help="aggregate run directories into summary tables")
    p.add_argument("--out", required=True, help="output root holding run directories")
    p.add_argument("runs", nargs="*", help="run directories (default: all under --out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(args):
    if args.verb == "report":
        rows = harness.cmd_report(args.out, args.runs or None)
        print(f"{len(rows)} summary rows written to {args.out}")
        return EXIT_OK
    config = harness.ExperimentConfig.load(args.config)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    seeds = args.seed_list
    run_dir = harness.run_dir_for(config, args.out)
    if args.verb == "train":
        summaries = harness.cmd_train(config, seeds, args.out, args.jobs)
        for s in summaries:
            if s["status"] == "ok":
                print(f"seed {s['seed']}: clean {s['clean_accuracy']:.4f}  R/H {s['final_r_over_h']:+.4f}")
            else:
                print(f"seed {s['seed']}: FAILED {s['error']}")
        print(run_dir)
        return EXIT_NUMERIC if any(s["status"] != "ok" for s in summaries) else EXIT_OK
    if args.verb == "attack-eval":
        rows = harness.cmd_attack_eval(config, seeds, args.out, args.jobs, args.target,
                                       args.surrogate, args.white_box)
        for seed, mode, attack, eps, acc, _ in rows:
            print(f"seed {seed} {mode:10s} {attack:5s} eps={float(eps):.3f} acc={float(acc):.4f}")
    elif args.verb == "cka":
        for seed, pair, layer, value in harness.cmd_cka(config, seeds, args.out, args.against):
            print(f"seed {seed} pair {pair} layer {layer}: {float(value):.4f}")
    elif args.verb == "gradviz":
        for path in harness.cmd_gradviz(config, args.index, seeds, args.out):
            print(path)
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigError, ContractViolation) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericalFault as exc:
        log.error("numeric fault: %s", exc)
        return EXIT_NUMERIC
    except (OSError, ParseError) as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
